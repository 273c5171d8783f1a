"""Marked point-process log-likelihoods.

Two routes that deliberately stay independent of each other:

* the model parametrization (per-mark exponential relaxation between an
  immediate level alpha and a resting level mu) has a closed-form
  compensator, used as the training loss;
* ground-truth intensities are integrated by adaptive Simpson quadrature,
  used as the evaluation oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import hawkes as H
from . import tensor as T
from .errors import ContractError, NumericalError

LOG_FLOOR = 1e-10


@dataclass
class IntensityParams:
    """Per-mark (mu, alpha, beta) triples anchored at the last history event.

    The intensity for mark k at t >= last_event_time is
        mu[k] + (alpha[k] - mu[k]) * exp(-beta[k] * (t - last_event_time)),
    which interpolates monotonically between alpha (at the event) and mu
    (far away), hence stays within [min(mu, alpha), max(mu, alpha)] >= 0.
    """

    last_event_time: float
    mu_hat: np.ndarray
    alpha_hat: np.ndarray
    beta_hat: np.ndarray

    def __post_init__(self):
        self.mu_hat = np.asarray(self.mu_hat, dtype=np.float64)
        self.alpha_hat = np.asarray(self.alpha_hat, dtype=np.float64)
        self.beta_hat = np.asarray(self.beta_hat, dtype=np.float64)
        if not (self.mu_hat.shape == self.alpha_hat.shape == self.beta_hat.shape):
            raise ContractError("parameter arrays must share one shape")
        stacked = np.concatenate([self.mu_hat, self.alpha_hat, self.beta_hat])
        if stacked.size and (not np.isfinite(stacked).all() or stacked.min() < 0):
            raise ContractError("intensity parameters must be finite and >= 0")

    @property
    def num_marks(self) -> int:
        return len(self.mu_hat)

    def rescaled(self, time_scale: float) -> "IntensityParams":
        """Map parameters from normalized time t' = t/s back to original units."""
        s = float(time_scale)
        return IntensityParams(
            self.last_event_time * s,
            self.mu_hat / s,
            self.alpha_hat / s,
            self.beta_hat / s,
        )


def intensity_vector(params: IntensityParams, t: float) -> np.ndarray:
    """Per-mark intensity at t; exact alpha at the anchor time."""
    delta = t - params.last_event_time
    if delta < 0:
        raise ContractError(
            f"time {t} precedes the params anchor {params.last_event_time}"
        )
    if delta == 0.0:
        return params.alpha_hat.copy()
    return params.mu_hat + (params.alpha_hat - params.mu_hat) * np.exp(
        -params.beta_hat * delta
    )


def eval_model_intensity(params: IntensityParams, t: float, mark: int) -> float:
    if not 0 <= mark < params.num_marks:
        raise ContractError(f"mark {mark} out of range [0, {params.num_marks})")
    return float(intensity_vector(params, t)[mark])


def model_compensator(params: IntensityParams, delta: float) -> float:
    """Integral of the summed per-mark intensity over a gap of length delta."""
    if delta < 0:
        raise ContractError(f"negative interval length {delta}")
    x = params.beta_hat * delta
    terms = params.mu_hat * delta + (
        params.alpha_hat - params.mu_hat
    ) * delta * T.expm1_over_array(x)
    return float(terms.sum())


@dataclass
class SequenceNLL:
    total: float
    per_event_log_intensity: np.ndarray
    compensator: float
    events_count: int

    @property
    def nats_per_event(self) -> float:
        return self.total / max(1, self.events_count)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "compensator": self.compensator,
            "events_count": self.events_count,
            "nats_per_event": self.nats_per_event,
        }


def _interval_edges(target: H.EventSequence, start_time: float = 0.0) -> np.ndarray:
    return np.concatenate([[start_time], target.times, [target.window_end]])


def sequence_nll_model(
    target: H.EventSequence,
    params_per_interval: list[IntensityParams],
    start_time: float = 0.0,
) -> SequenceNLL:
    """Exact NLL of a sequence under per-interval model parameters.

    n events need n+1 parameter sets; set i is anchored at the interval's
    start (the i-th event time, start_time before the first event). Event
    intensities are floored at LOG_FLOOR inside the log so all-zero heads
    stay finite. A nonzero start_time gives the conditional NLL of the
    window (start_time, T] (used for truncated histories).
    """
    n = len(target)
    if len(params_per_interval) != n + 1:
        raise ContractError(
            f"{n} events need {n + 1} parameter sets, got {len(params_per_interval)}"
        )
    edges = _interval_edges(target, start_time)
    compensator = 0.0
    logs = np.zeros(n)
    for i, params in enumerate(params_per_interval):
        start, stop = edges[i], edges[i + 1]
        if not math.isclose(params.last_event_time, start, rel_tol=0.0, abs_tol=1e-9):
            raise ContractError(
                f"interval {i} params anchored at {params.last_event_time}, "
                f"interval starts at {start}"
            )
        compensator += model_compensator(params, stop - start)
        if i < n:
            lam = eval_model_intensity(params, target.times[i], int(target.marks[i]))
            logs[i] = math.log(lam + LOG_FLOOR)
    total = -logs.sum() + compensator
    return SequenceNLL(float(total), logs, float(compensator), n)


def sequence_nll_graph(times, marks, window_end, num_marks, mu, alpha, beta, start_time=0.0):
    """Differentiable twin of sequence_nll_model on (n+1, K)-shaped tensors.

    times/marks are arrays in the same (possibly normalized) units as
    window_end; start_time shifts the first interval's opening edge (used for
    suffix-conditional likelihoods of truncated histories). Columns of
    mu/alpha/beta beyond num_marks are ignored. Returns the scalar NLL tensor.
    """
    times = np.asarray(times, dtype=np.float64)
    marks = np.asarray(marks, dtype=np.int64)
    n = len(times)
    if mu.shape[0] != n + 1:
        raise ContractError(f"need {n + 1} parameter rows, got {mu.shape[0]}")
    K = num_marks
    mu = T.slice_axis(mu, 1, 0, K)
    alpha = T.slice_axis(alpha, 1, 0, K)
    beta = T.slice_axis(beta, 1, 0, K)

    edges = np.concatenate([[start_time], times, [window_end]])
    deltas = np.diff(edges)
    dmat = T.Tensor.const(np.repeat(deltas[:, None], K, axis=1))

    amu = T.add(alpha, T.negate(mu))
    comp = T.add(T.mul(mu, dmat), T.mul(T.mul(amu, dmat), T.expm1_over(T.mul(beta, dmat))))
    nll = T.sum_all(comp)

    if n:
        rows = slice(0, n)
        mu_e = T.slice_axis(mu, 0, 0, n)
        amu_e = T.slice_axis(amu, 0, 0, n)
        beta_e = T.slice_axis(beta, 0, 0, n)
        d_e = T.Tensor.const(np.repeat(deltas[rows, None], K, axis=1))
        lam = T.add(mu_e, T.mul(amu_e, T.exp(T.negate(T.mul(beta_e, d_e)))))
        onehot = np.zeros((n, K))
        onehot[np.arange(n), marks] = 1.0
        picked = T.matmul(T.mul(lam, T.Tensor.const(onehot)), T.Tensor.const(np.ones((K, 1))))
        event_sum = T.sum_all(T.log(T.add(picked, T.Tensor.const(LOG_FLOOR))))
        nll = T.add(nll, T.negate(event_sum))
    return nll


def adaptive_simpson(f, a: float, b: float, tol: float = 1e-7, max_depth: int = 20) -> float:
    """Adaptive Simpson integration to absolute tolerance tol on [a, b]."""
    if b < a:
        raise ContractError(f"inverted interval [{a}, {b}]")
    if a == b:
        return 0.0
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    return _simpson_rec(f, a, b, fa, fm, fb, whole, tol, max_depth)


def _simpson_rec(f, a, b, fa, fm, fb, whole, tol, depth):
    m = 0.5 * (a + b)
    lm, rm = 0.5 * (a + m), 0.5 * (m + b)
    flm, frm = f(lm), f(rm)
    left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
    right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
    err = left + right - whole
    if abs(err) <= 15.0 * tol:
        return left + right + err / 15.0
    if depth <= 0:
        raise NumericalError(
            f"Simpson refinement did not converge on [{a}, {b}]: "
            f"estimate {left + right:.6e}, error {err:.3e}, tolerance {tol:.1e}"
        )
    return _simpson_rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + _simpson_rec(
        f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1
    )


def sequence_nll_ground_truth(
    inst: H.HawkesInstance,
    target: H.EventSequence,
    quadrature_points_per_interval: int = 4,
    tol: float = 1e-7,
    start_index: int = 0,
) -> SequenceNLL:
    """NLL of a sequence under its generating instance.

    Event terms are exact; each inter-event compensator is integrated by
    adaptive Simpson on `quadrature_points_per_interval` initial panels
    (clipping can kink the integrand, so panels localize the refinement).
    A nonzero start_index scores only events from that index on (conditioned
    on the full earlier history), matching a truncated model evaluation.
    """
    if target.num_marks != inst.num_marks:
        raise ContractError(
            f"sequence has {target.num_marks} marks, instance {inst.num_marks}"
        )
    q = max(1, int(quadrature_points_per_interval))
    edges = _interval_edges(target)
    n = len(target)
    logs = np.zeros(n - start_index)
    compensator = 0.0
    for i in range(start_index, n + 1):
        start, stop = float(edges[i]), float(edges[i + 1])
        times, marks = target.times[:i], target.marks[:i]

        def clipped_total(t):
            vals = H._per_mark_intensity(inst, times, marks, t)
            return float(np.maximum(vals, 0.0).sum())

        panel = np.linspace(start, stop, q + 1)
        for j in range(q):
            compensator += adaptive_simpson(
                clipped_total, float(panel[j]), float(panel[j + 1]), tol=tol / q
            )
        if i < n:
            lam = H.ground_truth_intensity(
                inst, target.prefix(i), float(target.times[i]), int(target.marks[i])
            )
            if lam <= 0.0:
                raise NumericalError(
                    f"event {i} at t={target.times[i]} has zero ground-truth intensity"
                )
            logs[i - start_index] = math.log(lam)
    total = -logs.sum() + compensator
    return SequenceNLL(float(total), logs, float(compensator), n - start_index)
