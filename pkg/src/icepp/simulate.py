"""Event-sequence simulation.

Ground-truth sequences come from Ogata thinning against an adaptive upper
bound; model forecasts come from exact inversion sampling of the closed-form
compensator. Both consume counter-based per-sequence RNG streams, so dataset
generation is reproducible regardless of scheduling.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ExplosionError, NumericalError
from .hawkes import (
    Event,
    EventSequence,
    HawkesInstance,
    _total_raw,
    _upper_bound_raw,
    stream_rng,
)
from .likelihood import IntensityParams, intensity_vector, model_compensator

RATIO_SLACK = 1e-9


@dataclass
class SimulationConfig:
    window_end: float = 50.0
    max_events: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.window_end <= 0:
            raise ConfigError("window_end must be positive")
        if self.max_events <= 0:
            raise ConfigError("max_events must be positive")


def _exponential(rng, rate: float) -> float:
    # inverse CDF on the stream; 1 - U is in (0, 1] so the log is safe
    return -math.log1p(-rng.random()) / rate


def simulate_sequence(
    inst: HawkesInstance, config: SimulationConfig, rng=None, stream_index: int = 0
) -> EventSequence:
    """Ogata thinning with the bound refreshed after every candidate.

    The bound stays valid between refreshes (bases are bounded by their
    remaining-window sup, positive kernels are non-increasing), so refreshing
    on rejection only tightens it.
    """
    if rng is None:
        rng = stream_rng(config.seed, stream_index)
    cap = config.max_events
    buf_t = np.empty(cap)
    buf_k = np.empty(cap, dtype=np.int64)
    n = 0
    t = 0.0
    T_end = config.window_end
    while True:
        bound = _upper_bound_raw(inst, buf_t[:n], buf_k[:n], t)
        if bound <= 0.0:
            break  # intensity is zero for the rest of the window
        u = t + _exponential(rng, bound)
        if u > T_end:
            break
        total, per_mark = _total_raw(inst, buf_t[:n], buf_k[:n], u)
        ratio = total / bound
        if ratio > 1.0 + RATIO_SLACK:
            raise NumericalError(
                f"thinning bound violated at t={u:.6g}: intensity {total:.6g} "
                f"> bound {bound:.6g}"
            )
        if rng.random() < ratio:
            if n >= cap:
                raise ExplosionError(
                    f"exceeded {cap} events before t={u:.6g} (window {T_end}); "
                    "the instance should have been rejected upstream"
                )
            cum = np.cumsum(per_mark)
            mark = int(np.searchsorted(cum, rng.random() * total, side="right"))
            buf_t[n] = u
            buf_k[n] = min(mark, inst.num_marks - 1)
            n += 1
        t = u
    return EventSequence(buf_t[:n].copy(), buf_k[:n].copy(), T_end, inst.num_marks)


def simulate_dataset(
    inst: HawkesInstance,
    n_sequences: int,
    config: SimulationConfig,
    threads: int = 1,
    stream_offset: int = 0,
) -> list[EventSequence]:
    """Independent sequences on per-index streams; order never depends on
    scheduling."""
    indices = range(stream_offset, stream_offset + n_sequences)
    if threads <= 1 or n_sequences <= 1:
        return [simulate_sequence(inst, config, stream_index=i) for i in indices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(
            pool.map(lambda i: simulate_sequence(inst, config, stream_index=i), indices)
        )


def _shifted(params: IntensityParams, t_from: float) -> IntensityParams:
    """Re-anchor the exponential-relaxation family at t_from (closed under it)."""
    if t_from < params.last_event_time:
        raise ContractError(
            f"t_from {t_from} precedes the params anchor {params.last_event_time}"
        )
    return IntensityParams(
        t_from, params.mu_hat, intensity_vector(params, t_from), params.beta_hat
    )


def simulate_from_estimate(
    params: IntensityParams, t_from: float, horizon: float, rng
):
    """Next event under the model intensity, or None if none before horizon.

    Exact inversion: solve compensator(delta) = Exp(1) draw by bisection to
    1e-10 absolute tolerance in delta, then draw the mark proportionally to
    the per-mark intensity at the sampled time.
    """
    if horizon < t_from:
        raise ContractError(f"horizon {horizon} precedes t_from {t_from}")
    local = _shifted(params, t_from)
    target = -math.log1p(-rng.random())
    d_max = horizon - t_from
    if model_compensator(local, d_max) < target:
        return None
    lo, hi = 0.0, d_max
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if model_compensator(local, mid) < target:
            lo = mid
        else:
            hi = mid
    delta = 0.5 * (lo + hi)
    lam = intensity_vector(local, t_from + delta)
    total = float(lam.sum())
    if total <= 0.0:  # numerically extinct; treat as censored
        return None
    cum = np.cumsum(lam)
    mark = int(np.searchsorted(cum, rng.random() * total, side="right"))
    return Event(t_from + delta, min(mark, params.num_marks - 1))


def sample_next_event_times(
    params: IntensityParams, t_from: float, horizon: float, n: int, rng
):
    """Vectorized inversion sampling of n next-event gaps from t_from.

    Returns (times, marks); censored draws (no event before horizon) carry
    NaN / -1. Used by evaluation, where per-sample bisection would crawl.
    """
    local = _shifted(params, t_from)
    d_max = horizon - t_from
    targets = -np.log1p(-rng.random(n))
    mu, al, be = local.mu_hat, local.alpha_hat, local.beta_hat

    def comp(d):
        x = np.outer(d, be)
        terms = np.outer(d, mu) + np.outer(d, al - mu) * T.expm1_over_array(x)
        return terms.sum(axis=1)

    censored = targets > comp(np.array([d_max]))[0]
    lo = np.zeros(n)
    hi = np.full(n, d_max)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        below = comp(mid) < targets
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    delta = 0.5 * (lo + hi)
    times = np.where(censored, np.nan, t_from + delta)

    gaps = np.where(censored, 0.0, delta)
    lam = mu[None, :] + (al - mu)[None, :] * np.exp(-np.outer(gaps, be))
    totals = lam.sum(axis=1)
    cum = np.cumsum(lam, axis=1)
    draws = rng.random(n) * totals
    marks = (cum < draws[:, None]).sum(axis=1)
    marks = np.where(censored | (totals <= 0), -1, np.minimum(marks, len(mu) - 1))
    return times, marks.astype(np.int64)
