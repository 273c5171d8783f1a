"""Synthetic prior over marked Hawkes processes.

An instance pairs per-mark base intensities with signed pairwise interaction
kernels; the conditional intensity of mark k at time t is

    max(0, base_k(t) + sum over history events (t', k') of
           sign[k, k'] * kernel[k][k'](t - t'))

Sampling is counter-based: (seed, index) fully determines an instance, so
dataset generation parallelizes without shared RNG state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

import numpy as np
from scipy.special import gammaln

from .errors import ConfigError, ContractError, DataError

BASE_KINDS = ("constant", "sinusoidal", "exp_decay", "gamma")
KERNEL_KINDS = ("exp_decay", "power_law")

STABILITY_LIMIT = 0.9
MAX_STABILITY_REJECTIONS = 1000


class Event(NamedTuple):
    time: float
    mark: int


class EventSequence:
    """Strictly ordered (time, mark) events on the window (0, window_end]."""

    __slots__ = ("times", "marks", "window_end", "num_marks")

    def __init__(self, times, marks, window_end: float, num_marks: int):
        self.times = np.asarray(times, dtype=np.float64)
        self.marks = np.asarray(marks, dtype=np.int64)
        self.window_end = float(window_end)
        self.num_marks = int(num_marks)
        self._validate()

    def _validate(self):
        if self.window_end <= 0:
            raise DataError(f"window_end must be positive, got {self.window_end}")
        if self.num_marks < 1:
            raise DataError(f"num_marks must be >= 1, got {self.num_marks}")
        if self.times.ndim != 1 or self.marks.shape != self.times.shape:
            raise DataError("times and marks must be matching 1-D arrays")
        if len(self.times):
            if np.any(np.diff(self.times) <= 0):
                raise DataError("event times must be strictly increasing")
            if self.times[0] <= 0 or self.times[-1] > self.window_end:
                raise DataError(
                    f"event times must lie in (0, {self.window_end}]"
                )
            if self.marks.min() < 0 or self.marks.max() >= self.num_marks:
                raise DataError(
                    f"marks must lie in [0, {self.num_marks})"
                )

    @classmethod
    def from_events(cls, events: Iterable, window_end: float, num_marks: int):
        evs = [Event(float(t), int(k)) for t, k in events]
        return cls(
            [e.time for e in evs], [e.mark for e in evs], window_end, num_marks
        )

    @property
    def events(self) -> list[Event]:
        return [Event(float(t), int(k)) for t, k in zip(self.times, self.marks)]

    def __len__(self):
        return len(self.times)

    def prefix(self, n: int) -> "EventSequence":
        """First n events with the same window/mark space; a history H_t."""
        return EventSequence(
            self.times[:n].copy(), self.marks[:n].copy(),
            self.window_end, self.num_marks,
        )

    def gaps(self) -> np.ndarray:
        """Inter-event gaps including the opening gap from time 0."""
        if not len(self.times):
            return np.empty(0)
        return np.diff(np.concatenate([[0.0], self.times]))


@dataclass(frozen=True)
class BaseIntensitySpec:
    """History-independent intensity component for one mark.

    constant:   level
    sinusoidal: level + amplitude * sin(2*pi*t/period + phase); may dip
                negative, the intensity clip handles it
    exp_decay:  level * exp(-rate * t)
    gamma:      amplitude * gamma-pdf(t; shape, scale), shape >= 1 so the
                pointwise sup stays finite
    """

    kind: str
    params: dict

    def __post_init__(self):
        p = self.params
        if self.kind == "constant":
            if p["level"] < 0:
                raise ConfigError("constant base level must be >= 0")
        elif self.kind == "sinusoidal":
            if p["level"] < 0 or p["period"] <= 0:
                raise ConfigError("sinusoidal base needs level >= 0, period > 0")
        elif self.kind == "exp_decay":
            if p["level"] < 0 or p["rate"] <= 0:
                raise ConfigError("exp_decay base needs level >= 0, rate > 0")
        elif self.kind == "gamma":
            if p["amplitude"] < 0 or p["scale"] <= 0 or p["shape"] < 1:
                raise ConfigError(
                    "gamma base needs amplitude >= 0, scale > 0, shape >= 1"
                )
        else:
            raise ConfigError(f"unknown base kind '{self.kind}'")

    def evaluate(self, t):
        t = np.asarray(t, dtype=np.float64)
        p = self.params
        if self.kind == "constant":
            return np.full_like(t, p["level"])
        if self.kind == "sinusoidal":
            return p["level"] + p["amplitude"] * np.sin(
                2.0 * math.pi * t / p["period"] + p["phase"]
            )
        if self.kind == "exp_decay":
            return p["level"] * np.exp(-p["rate"] * t)
        if self.kind == "gamma":
            shape, scl, amp = p["shape"], p["scale"], p["amplitude"]
            lognorm = gammaln(shape) + shape * math.log(scl)
            with np.errstate(divide="ignore"):
                logt = np.where(t > 0, np.log(np.maximum(t, 1e-300)), -np.inf)
            out = np.exp((shape - 1.0) * logt - t / scl - lognorm) * amp
            return np.where(t > 0, out, 0.0 if shape > 1 else amp * math.exp(-lognorm))
        raise AssertionError(self.kind)

    def sup_after(self, t_from: float) -> float:
        """Pointwise supremum over [t_from, infinity)."""
        p = self.params
        if self.kind == "constant":
            return p["level"]
        if self.kind == "sinusoidal":
            return p["level"] + abs(p["amplitude"])
        if self.kind == "exp_decay":
            return float(self.evaluate(t_from))
        if self.kind == "gamma":
            mode = (p["shape"] - 1.0) * p["scale"]
            return float(self.evaluate(max(t_from, 0.0) if t_from > mode else mode))
        raise AssertionError(self.kind)


@dataclass(frozen=True)
class KernelSpec:
    """Non-negative, non-increasing interaction kernel with finite mass.

    exp_decay: weight * exp(-rate * tau), mass weight/rate
    power_law: weight * (tau + offset)^-exponent, exponent > 1,
               mass weight * offset^(1-exponent) / (exponent-1)
    """

    kind: str
    params: dict

    def __post_init__(self):
        p = self.params
        if self.kind == "exp_decay":
            if p["weight"] < 0 or p["rate"] <= 0:
                raise ConfigError("exp_decay kernel needs weight >= 0, rate > 0")
        elif self.kind == "power_law":
            if p["weight"] < 0 or p["exponent"] <= 1 or p["offset"] <= 0:
                raise ConfigError(
                    "power_law kernel needs weight >= 0, exponent > 1, offset > 0"
                )
        else:
            raise ConfigError(f"unknown kernel kind '{self.kind}'")

    def evaluate(self, tau):
        tau = np.asarray(tau, dtype=np.float64)
        p = self.params
        if self.kind == "exp_decay":
            return p["weight"] * np.exp(-p["rate"] * tau)
        if self.kind == "power_law":
            return p["weight"] * np.power(tau + p["offset"], -p["exponent"])
        raise AssertionError(self.kind)

    def integral(self) -> float:
        """Total mass over [0, infinity)."""
        p = self.params
        if self.kind == "exp_decay":
            return p["weight"] / p["rate"]
        return p["weight"] * p["offset"] ** (1.0 - p["exponent"]) / (p["exponent"] - 1.0)


@dataclass
class HawkesInstance:
    num_marks: int
    base: list
    kernels: list
    signs: np.ndarray

    def __post_init__(self):
        self.signs = np.asarray(self.signs, dtype=np.int64)
        K = self.num_marks
        if len(self.base) != K or self.signs.shape != (K, K):
            raise ConfigError("instance arrays do not match num_marks")
        if len(self.kernels) != K or any(len(row) != K for row in self.kernels):
            raise ConfigError("kernel grid must be num_marks x num_marks")
        if not np.isin(self.signs, (-1, 0, 1)).all():
            raise ConfigError("signs must be in {-1, 0, 1}")

    def to_dict(self) -> dict:
        return {
            "num_marks": self.num_marks,
            "base": [{"kind": b.kind, "params": b.params} for b in self.base],
            "kernels": [
                [{"kind": k.kind, "params": k.params} for k in row]
                for row in self.kernels
            ],
            "signs": self.signs.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "HawkesInstance":
        return cls(
            num_marks=int(d["num_marks"]),
            base=[BaseIntensitySpec(b["kind"], dict(b["params"])) for b in d["base"]],
            kernels=[
                [KernelSpec(k["kind"], dict(k["params"])) for k in row]
                for row in d["kernels"]
            ],
            signs=np.asarray(d["signs"], dtype=np.int64),
        )

    @classmethod
    def from_json(cls, s: str) -> "HawkesInstance":
        return cls.from_dict(json.loads(s))

    def padded(self, num_marks: int) -> "HawkesInstance":
        """The same process lifted onto a larger mark space: extra marks get
        zero base rate and inert kernels, so the law is unchanged."""
        K, K2 = self.num_marks, int(num_marks)
        if K2 == K:
            return self
        if K2 < K:
            raise ConfigError(f"cannot shrink mark space from {K} to {K2}")
        zero_base = BaseIntensitySpec("constant", {"level": 0.0})
        zero_kernel = KernelSpec("exp_decay", {"weight": 0.0, "rate": 1.0})
        base = list(self.base) + [zero_base] * (K2 - K)
        kernels = [
            [self.kernels[i][j] if i < K and j < K else zero_kernel for j in range(K2)]
            for i in range(K2)
        ]
        signs = np.zeros((K2, K2), dtype=np.int64)
        signs[:K, :K] = self.signs
        return HawkesInstance(K2, base, kernels, signs)


DEFAULT_RANGES = {
    "constant_level": (0.1, 1.5),
    "sin_level": (0.2, 1.2),
    "sin_amplitude": (0.1, 1.0),
    "sin_period": (5.0, 25.0),
    "sin_phase": (0.0, 2.0 * math.pi),
    "exp_decay_level": (0.5, 3.0),
    "exp_decay_rate": (0.02, 0.2),
    "gamma_shape": (1.5, 6.0),
    "gamma_scale": (2.0, 10.0),
    "gamma_amplitude": (10.0, 60.0),
    "kernel_weight": (0.05, 0.5),
    "kernel_exp_rate": (0.5, 3.0),
    "power_exponent": (2.0, 4.0),
    "power_offset": (0.5, 2.0),
}


@dataclass
class PriorConfig:
    num_marks_range: tuple = (1, 5)
    window_end: float = 50.0
    sparsity: float = 0.5
    inhibition_prob: float = 0.3
    seed: int = 0
    base_kinds: tuple = BASE_KINDS
    kernel_kinds: tuple = KERNEL_KINDS
    ranges: dict = field(default_factory=dict)

    def __post_init__(self):
        self.num_marks_range = (int(self.num_marks_range[0]), int(self.num_marks_range[1]))
        if not (1 <= self.num_marks_range[0] <= self.num_marks_range[1]):
            raise ConfigError(f"bad num_marks_range {self.num_marks_range}")
        if self.window_end <= 0:
            raise ConfigError("window_end must be positive")
        for name in ("sparsity", "inhibition_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        unknown = set(self.base_kinds) - set(BASE_KINDS)
        unknown |= set(self.kernel_kinds) - set(KERNEL_KINDS)
        if unknown:
            raise ConfigError(f"unknown functional kinds: {sorted(unknown)}")
        if not self.base_kinds or not self.kernel_kinds:
            raise ConfigError("base_kinds and kernel_kinds must be non-empty")
        merged = dict(DEFAULT_RANGES)
        merged.update({k: (float(v[0]), float(v[1])) for k, v in self.ranges.items()})
        for name, (lo, hi) in merged.items():
            if name not in DEFAULT_RANGES:
                raise ConfigError(f"unknown range '{name}'")
            if lo > hi:
                raise ConfigError(f"empty range {name}: ({lo}, {hi})")
        if merged["gamma_shape"][0] < 1.0:
            raise ConfigError("gamma_shape range must stay >= 1 (bounded sup)")
        self.ranges = merged

    def to_dict(self) -> dict:
        return {
            "num_marks_range": list(self.num_marks_range),
            "window_end": self.window_end,
            "sparsity": self.sparsity,
            "inhibition_prob": self.inhibition_prob,
            "seed": self.seed,
            "base_kinds": list(self.base_kinds),
            "kernel_kinds": list(self.kernel_kinds),
            "ranges": {k: list(v) for k, v in self.ranges.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        d = dict(d)
        for key in ("num_marks_range", "base_kinds", "kernel_kinds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def stream_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream: one Philox key per (seed, index) pair."""
    key = ((int(seed) & 0xFFFFFFFFFFFFFFFF) << 64) | (int(index) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def _draw_base(kind: str, rng, r: dict) -> BaseIntensitySpec:
    u = lambda name: float(rng.uniform(*r[name]))
    if kind == "constant":
        return BaseIntensitySpec("constant", {"level": u("constant_level")})
    if kind == "sinusoidal":
        return BaseIntensitySpec(
            "sinusoidal",
            {
                "level": u("sin_level"),
                "amplitude": u("sin_amplitude"),
                "period": u("sin_period"),
                "phase": u("sin_phase"),
            },
        )
    if kind == "exp_decay":
        return BaseIntensitySpec(
            "exp_decay", {"level": u("exp_decay_level"), "rate": u("exp_decay_rate")}
        )
    return BaseIntensitySpec(
        "gamma",
        {
            "shape": u("gamma_shape"),
            "scale": u("gamma_scale"),
            "amplitude": u("gamma_amplitude"),
        },
    )


def _draw_kernel(kind: str, rng, r: dict) -> KernelSpec:
    u = lambda name: float(rng.uniform(*r[name]))
    if kind == "exp_decay":
        return KernelSpec("exp_decay", {"weight": u("kernel_weight"), "rate": u("kernel_exp_rate")})
    return KernelSpec(
        "power_law",
        {"weight": u("kernel_weight"), "exponent": u("power_exponent"), "offset": u("power_offset")},
    )


def sample_instance(config: PriorConfig, index: int = 0) -> HawkesInstance:
    """Draw one instance from the prior; deterministic in (config.seed, index).

    Rejection-resampled until every positive-interaction row of kernel masses
    sums below the stability limit.
    """
    rng = stream_rng(config.seed, index)
    r = config.ranges
    for _ in range(MAX_STABILITY_REJECTIONS):
        K = int(rng.integers(config.num_marks_range[0], config.num_marks_range[1] + 1))
        base = [
            _draw_base(config.base_kinds[rng.integers(len(config.base_kinds))], rng, r)
            for _ in range(K)
        ]
        signs = np.zeros((K, K), dtype=np.int64)
        kernels = []
        for k in range(K):
            row = []
            for kp in range(K):
                if rng.random() >= config.sparsity:
                    signs[k, kp] = -1 if rng.random() < config.inhibition_prob else 1
                row.append(
                    _draw_kernel(
                        config.kernel_kinds[rng.integers(len(config.kernel_kinds))], rng, r
                    )
                )
            kernels.append(row)
        load = np.zeros(K)
        for k in range(K):
            load[k] = sum(
                kernels[k][kp].integral() for kp in range(K) if signs[k, kp] > 0
            )
        if load.max(initial=0.0) < STABILITY_LIMIT:
            return HawkesInstance(K, base, kernels, signs)
    raise ConfigError(
        f"no stable instance after {MAX_STABILITY_REJECTIONS} draws; "
        "the configured kernel ranges produce explosive processes"
    )


def _per_mark_intensity(inst: HawkesInstance, times, marks, t: float) -> np.ndarray:
    """Unclipped per-mark intensity, t at or after every history time."""
    vals = np.array([float(b.evaluate(t)) for b in inst.base])
    if len(times):
        for kp in range(inst.num_marks):
            tau = t - times[marks == kp]
            if not len(tau):
                continue
            for k in range(inst.num_marks):
                z = inst.signs[k, kp]
                if z:
                    vals[k] += z * float(inst.kernels[k][kp].evaluate(tau).sum())
    return vals


def _check_ordering(history: EventSequence, t: float):
    if len(history) and t <= history.times[-1]:
        raise ContractError(
            f"query time {t} is not after the last history event "
            f"at {history.times[-1]}"
        )


def ground_truth_intensity(
    inst: HawkesInstance, history: EventSequence, t: float, mark: int
) -> float:
    """Clipped conditional intensity of one mark given a strict history."""
    if not 0 <= mark < inst.num_marks:
        raise ContractError(f"mark {mark} out of range [0, {inst.num_marks})")
    _check_ordering(history, t)
    vals = _per_mark_intensity(inst, history.times, history.marks, t)
    return float(max(0.0, vals[mark]))


def _total_raw(inst: HawkesInstance, times, marks, t: float):
    vals = np.maximum(_per_mark_intensity(inst, times, marks, t), 0.0)
    return float(vals.sum()), vals


def total_intensity(inst: HawkesInstance, history: EventSequence, t: float):
    """Summed clipped intensity plus the per-mark vector (for mark choice)."""
    _check_ordering(history, t)
    return _total_raw(inst, history.times, history.marks, t)


def _upper_bound_raw(inst: HawkesInstance, times, marks, t_from: float) -> float:
    bound = sum(max(0.0, b.sup_after(t_from)) for b in inst.base)
    if len(times):
        for kp in range(inst.num_marks):
            tau = t_from - times[marks == kp]
            if not len(tau):
                continue
            for k in range(inst.num_marks):
                if inst.signs[k, kp] > 0:
                    bound += float(inst.kernels[k][kp].evaluate(tau).sum())
    return float(bound)


def intensity_upper_bound(
    inst: HawkesInstance, history: EventSequence, t_from: float
) -> float:
    """Bound on total intensity over [t_from, next event), history fixed.

    Base sups are taken over the remaining window; positive kernels are
    non-increasing so their left endpoint dominates; inhibitory terms are
    dropped (they only lower the intensity).
    """
    return _upper_bound_raw(inst, history.times, history.marks, t_from)


def intensity_grid(
    inst: HawkesInstance, seq: EventSequence, ts
) -> np.ndarray:
    """Clipped per-mark intensity along a grid with the running history.

    At each grid time t the history is the set of seq events strictly
    before t; returns shape (len(ts), num_marks).
    """
    ts = np.asarray(ts, dtype=np.float64)
    out = np.zeros((len(ts), inst.num_marks))
    for i, t in enumerate(ts):
        n_hist = int(np.searchsorted(seq.times, t, side="left"))
        vals = _per_mark_intensity(inst, seq.times[:n_hist], seq.marks[:n_hist], t)
        out[i] = np.maximum(vals, 0.0)
    return out
