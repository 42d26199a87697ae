"""Conditional intensities, exact compensators and (composite) log-likelihoods.

The propagation kernel is normalised, ``alpha * beta * exp(-beta * u)``, so
that each upstream event contributes ``alpha`` expected offspring in total.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import EventLog, ModelParams, ModuleRef, TopologyError


class NumericalDomainError(ArithmeticError):
    """An intensity evaluated to a nonpositive value at an observed event."""


class IntervalError(ValueError):
    pass


@dataclass(frozen=True)
class SubWindowing:
    """Partition of [0, T) into ``K`` equal sub-windows of length ``T / K``."""

    window_length: float
    K: int = 1

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"sub-window count must be a positive integer, got {self.K}")
        if not self.window_length >= 0:
            raise ValueError(f"window length must be nonnegative, got {self.window_length}")
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "window_length", float(self.window_length))

    @property
    def d(self) -> float:
        return self.window_length / self.K

    def index(self, times) -> np.ndarray:
        """Window index of each time, ``floor(t / d)`` clamped to ``K - 1``."""
        t = np.asarray(times, dtype=float)
        if self.K == 1 or self.d == 0:
            return np.zeros(t.shape, dtype=np.int64)
        return np.minimum(np.floor(t / self.d).astype(np.int64), self.K - 1)

    def bounds(self, k: int) -> tuple[float, float]:
        start = k * self.d
        end = self.window_length if k == self.K - 1 else (k + 1) * self.d
        return start, end

    def ends(self, idx: np.ndarray) -> np.ndarray:
        """Right edge of the window each index refers to (the last one ends at T)."""
        e = (np.asarray(idx) + 1) * self.d
        return np.where(np.asarray(idx) == self.K - 1, self.window_length, e)


def _upstream(params: ModelParams, module: ModuleRef) -> list[ModuleRef]:
    return sorted(up for (down, up) in params.alpha if down == module)


def _pair(params: ModelParams, downstream: ModuleRef, upstream: ModuleRef):
    key = (downstream, upstream)
    if upstream.stage != downstream.stage - 1 or key not in params.alpha or key not in params.beta:
        raise TopologyError(f"no propagation pair {downstream}<-{upstream}")
    return params.alpha[key], params.beta[key]


def _in_window(times: np.ndarray, window) -> np.ndarray:
    if window is None:
        return times
    a, b = window
    return times[(times >= a) & (times < b)]


def primary_intensity(params: ModelParams, module: ModuleRef) -> float:
    try:
        return params.lambda0[module]
    except KeyError:
        raise TopologyError(f"unknown module {module}") from None


def propagated_intensity(params: ModelParams, downstream: ModuleRef, upstream: ModuleRef, t: float,
                         upstream_events, candidate_window=None) -> float:
    a, b = _pair(params, downstream, upstream)
    tj = _in_window(np.asarray(upstream_events, dtype=float), candidate_window)
    tj = tj[tj < t]
    if tj.size == 0:
        return 0.0
    return float(a * b * np.exp(-b * (t - tj)).sum())


def total_intensity(params: ModelParams, module: ModuleRef, t: float, log: EventLog,
                    candidate_window=None) -> float:
    lam = primary_intensity(params, module)
    for up in _upstream(params, module):
        lam += propagated_intensity(params, module, up, t, log[up], candidate_window)
    return lam


def compensator(params: ModelParams, module: ModuleRef, interval, log: EventLog,
                candidate_window=None) -> float:
    """Closed-form integral of the total intensity over ``interval = (a, b)``."""
    a, b = map(float, interval)
    if a > b:
        raise IntervalError(f"interval start {a} exceeds end {b}")
    total = primary_intensity(params, module) * (b - a)
    for up in _upstream(params, module):
        al, be = _pair(params, module, up)
        tj = _in_window(log[up], candidate_window)
        tj = tj[tj < b]
        if tj.size and al != 0.0:
            lo = np.maximum(a, tj) - tj
            total += al * float(np.sum(np.exp(-be * lo) - np.exp(-be * (b - tj))))
    return total


@dataclass(frozen=True)
class PackedModule:
    """Flat arrays describing one downstream module for the compiled kernels."""

    module: ModuleRef
    upstream: tuple
    t_down: np.ndarray
    down_win: np.ndarray
    up_times: np.ndarray
    up_ptr: np.ndarray
    up_win: np.ndarray
    up_lag_to_end: np.ndarray  # window right edge minus event time
    first: np.ndarray


def pack_module(log: EventLog, module: ModuleRef, upstream: list[ModuleRef],
                windows: SubWindowing) -> PackedModule:
    t_down = np.ascontiguousarray(log[module], dtype=np.float64)
    parts = [np.asarray(log[u], dtype=np.float64) for u in upstream]
    up_ptr = np.zeros(len(parts) + 1, dtype=np.int64)
    up_ptr[1:] = np.cumsum([p.size for p in parts])
    up_times = np.ascontiguousarray(np.concatenate(parts) if parts else np.empty(0))
    up_win = windows.index(up_times)
    first = np.zeros((len(parts), windows.K + 1), dtype=np.int64)
    for u in range(len(parts)):
        w = up_win[up_ptr[u]:up_ptr[u + 1]]
        first[u] = np.searchsorted(w, np.arange(windows.K + 1), side="left")
    lag_end = windows.ends(up_win) - up_times
    return PackedModule(module, tuple(upstream), t_down, windows.index(t_down), up_times, up_ptr,
                        up_win, lag_end, first)


def module_composite_loglik(params: ModelParams, packed: PackedModule, T: float) -> float:
    lam0 = primary_intensity(params, packed.module)
    if not packed.upstream:
        n = packed.t_down.size
        if n and lam0 <= 0:
            raise NumericalDomainError(f"module {packed.module}: nonpositive intensity at an event")
        return (n * np.log(lam0) if n else 0.0) - lam0 * T
    alpha = np.array([params.alpha[(packed.module, u)] for u in packed.upstream])
    beta = np.array([params.beta[(packed.module, u)] for u in packed.upstream])
    sum_log, *_ = _kernels.estep_stats(packed.t_down, packed.down_win, packed.up_times, packed.up_ptr,
                                       packed.first, lam0, alpha, beta)
    if not np.isfinite(sum_log):
        raise NumericalDomainError(f"module {packed.module}: nonpositive intensity at an event")
    comp = lam0 * T
    for u in range(len(packed.upstream)):
        lag = packed.up_lag_to_end[packed.up_ptr[u]:packed.up_ptr[u + 1]]
        comp += alpha[u] * float(np.sum(-np.expm1(-beta[u] * lag)))
    return sum_log - comp


def composite_log_likelihood(params: ModelParams, log: EventLog, windows: SubWindowing) -> float:
    """Sum over sub-windows of block log-likelihoods with window-restricted propagation."""
    T = log.window_length
    total = 0.0
    for mod in sorted(params.lambda0):
        packed = pack_module(log, mod, _upstream(params, mod), windows)
        total += module_composite_loglik(params, packed, T)
    return total


def log_likelihood(params: ModelParams, log: EventLog) -> float:
    """Full log-likelihood summed over modules (unrestricted propagation candidates)."""
    return composite_log_likelihood(params, log, SubWindowing(log.window_length, 1))
