"""Full-likelihood EM (K = 1) and composite-likelihood EM (K > 1).

The M-step uses the closed-form updates: primary rate from the expected
number of primary events, alpha from expected offspring over the
window-truncated exposure, and a single fixed-point step for beta with the
previous beta inside the exposure terms. Because the truncated exposure
``sum(1 - exp(-beta * lag))`` is concave in beta, its tangent at the
previous beta minorises the expected complete-data log-likelihood and this
beta step maximises the minoriser. The iteration is therefore a generalised
EM and keeps the ascent property.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import _kernels
from .core import EventLog, ModelParams, ModuleRef, SystemTopology, validate_topology
from .intensity import PackedModule, SubWindowing, pack_module

FLOOR = 1e-12


@dataclass(frozen=True)
class FitConfig:
    K: int = 1
    max_iterations: int = 500
    tolerance: float = 1e-6
    init: ModelParams | str = "default"
    keep_posterior: bool = True

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if isinstance(self.init, str) and self.init != "default":
            raise ValueError(f"init must be ModelParams or 'default', got {self.init!r}")


@dataclass(frozen=True)
class ModulePosterior:
    """Branching probabilities of one downstream module in CSR layout.

    Candidates of event ``i`` live in ``indptr[i]:indptr[i+1]``;
    ``upstream_module`` indexes into ``upstream`` and ``upstream_index`` is
    the position of the candidate within that upstream module's sequence.
    """

    module: ModuleRef
    upstream: tuple
    times: np.ndarray
    p0: np.ndarray
    indptr: np.ndarray
    upstream_module: np.ndarray
    upstream_index: np.ndarray
    prob: np.ndarray

    def event(self, i: int) -> dict:
        sl = slice(self.indptr[i], self.indptr[i + 1])
        out = {"primary": float(self.p0[i])}
        for u, j, p in zip(self.upstream_module[sl], self.upstream_index[sl], self.prob[sl]):
            out[(self.upstream[u], int(j))] = float(p)
        return out

    def totals(self) -> np.ndarray:
        n = self.p0.size
        per_event = np.zeros(n)
        if self.prob.size:
            rows = np.repeat(np.arange(n), np.diff(self.indptr))
            np.add.at(per_event, rows, self.prob)
        return self.p0 + per_event

    def normalization_error(self) -> float:
        if self.p0.size == 0:
            return 0.0
        return float(np.max(np.abs(self.totals() - 1.0)))


@dataclass(frozen=True)
class BranchingPosterior:
    modules: Mapping[ModuleRef, ModulePosterior]

    def __getitem__(self, module: ModuleRef) -> ModulePosterior:
        return self.modules[module]

    def normalization_error(self) -> float:
        return max((mp.normalization_error() for mp in self.modules.values()), default=0.0)


@dataclass
class FitReport:
    estimates: ModelParams
    ll_trace: list
    iterations: int
    converged: bool
    elapsed: float
    K: int
    posterior: BranchingPosterior | None = None
    max_normalization_error: float = 0.0
    pairs_per_iteration: int = 0
    initial: ModelParams | None = None

    def is_ascending(self, rel_slack: float = 1e-8) -> bool:
        return trace_violations(self.ll_trace, rel_slack) == 0

    def to_dict(self) -> dict:
        return {
            "estimates": self.estimates.to_dict(),
            "ll_trace": [float(x) for x in self.ll_trace],
            "iterations": self.iterations,
            "converged": self.converged,
            "elapsed_seconds": self.elapsed,
            "K": self.K,
            "max_normalization_error": self.max_normalization_error,
            "pairs_per_iteration": self.pairs_per_iteration,
        }


def trace_violations(trace, rel_slack: float = 1e-8) -> int:
    """Number of steps where the objective drops by more than ``rel_slack`` relative."""
    tr = np.asarray(trace, dtype=float)
    if tr.size < 2:
        return 0
    drop = tr[:-1] - tr[1:]
    return int(np.sum(drop > rel_slack * np.maximum(np.abs(tr[:-1]), 1.0)))


def _downstream(topology: SystemTopology) -> list[ModuleRef]:
    return [m for m in topology.modules() if m.stage >= 2]


def _pack_all(log: EventLog, topology: SystemTopology, windows: SubWindowing) -> dict:
    return {m: pack_module(log, m, topology.upstream_of(m), windows) for m in _downstream(topology)}


def _infer_topology(log: EventLog, params: ModelParams | None = None) -> SystemTopology:
    mods = set(log.modules())
    if params is not None:
        mods |= set(params.lambda0)
    if not mods:
        return SystemTopology((1,))
    S = max(m.stage for m in mods)
    counts = [max([m.module for m in mods if m.stage == s], default=1) for s in range(1, S + 1)]
    return SystemTopology(tuple(counts))


def default_init(log: EventLog, topology: SystemTopology, windows: SubWindowing) -> ModelParams:
    """Scale-aware starting point.

    Primary rate: half the empirical rate. Propagation ratio: half the ratio
    of downstream to upstream counts, clipped to [0.05, 0.95]. Decay rate:
    inverse mean lag from each downstream event to its latest in-window
    upstream predecessor, 1.0 when there is no such pair.
    """
    T = log.window_length
    lam = {}
    for m in topology.modules():
        lam[m] = max(log.count(m) / (2 * T), FLOOR) if T > 0 else FLOOR
    alpha, beta = {}, {}
    for down, up in topology.pairs():
        n_down, n_up = log.count(down), log.count(up)
        alpha[(down, up)] = float(np.clip(0.5 * n_down / n_up, 0.05, 0.95)) if n_up else 0.05
        td, tu = log[down], log[up]
        b = 1.0
        if td.size and tu.size:
            pos = np.searchsorted(tu, td, side="left") - 1
            ok = pos >= 0
            if ok.any():
                prev = tu[pos[ok]]
                same = windows.index(prev) == windows.index(td[ok])
                lags = td[ok][same] - prev[same]
                if lags.size and lags.mean() > 0:
                    b = 1.0 / float(lags.mean())
        beta[(down, up)] = b
    return ModelParams(lam, alpha, beta)


def _module_arrays(params: ModelParams, packed: PackedModule):
    alpha = np.array([params.alpha[(packed.module, u)] for u in packed.upstream], dtype=float)
    beta = np.array([params.beta[(packed.module, u)] for u in packed.upstream], dtype=float)
    return params.lambda0[packed.module], alpha, beta


def _exposures(packed: PackedModule, beta: np.ndarray):
    """Truncated exposure sum(1 - e^{-b L}) and its beta-derivative sum(L e^{-b L}) per upstream module."""
    U = len(packed.upstream)
    C = np.zeros(U)
    D = np.zeros(U)
    for u in range(U):
        lag = packed.up_lag_to_end[packed.up_ptr[u]:packed.up_ptr[u + 1]]
        C[u] = np.sum(-np.expm1(-beta[u] * lag))
        D[u] = np.sum(lag * np.exp(-beta[u] * lag))
    return C, D


@dataclass
class _Stats:
    sum_p0: dict = field(default_factory=dict)
    sum_p: dict = field(default_factory=dict)
    sum_pl: dict = field(default_factory=dict)
    loglik: float = 0.0
    max_err: float = 0.0
    pairs: int = 0


def _estep(params: ModelParams, log: EventLog, topology: SystemTopology, packs: dict) -> _Stats:
    T = log.window_length
    st = _Stats()
    for m in topology.modules(1):
        n = log.count(m)
        lam0 = params.lambda0[m]
        st.sum_p0[m] = float(n)
        st.loglik += (n * np.log(lam0) if n else 0.0) - lam0 * T
    for m, packed in packs.items():
        lam0, alpha, beta = _module_arrays(params, packed)
        sum_log, sp0, sp, spl, err, npairs = _kernels.estep_stats(
            packed.t_down, packed.down_win, packed.up_times, packed.up_ptr, packed.first, lam0, alpha, beta)
        C, _ = _exposures(packed, beta)
        st.loglik += sum_log - lam0 * T - float(alpha @ C)
        st.sum_p0[m] = sp0
        for u, up in enumerate(packed.upstream):
            st.sum_p[(m, up)] = sp[u]
            st.sum_pl[(m, up)] = spl[u]
        st.max_err = max(st.max_err, err)
        st.pairs += npairs
    return st


def _mstep(st: _Stats, log: EventLog, previous: ModelParams, packs: dict) -> ModelParams:
    T = log.window_length
    lam = {}
    for m, s in st.sum_p0.items():
        lam[m] = max(s / T, FLOOR) if T > 0 else FLOOR
    alpha, beta = dict(previous.alpha), dict(previous.beta)
    for m, packed in packs.items():
        _, _, b_prev = _module_arrays(previous, packed)
        C, D = _exposures(packed, b_prev)
        for u, up in enumerate(packed.upstream):
            key = (m, up)
            P = st.sum_p[key]
            if P <= 0.0:
                alpha[key] = 0.0
                beta[key] = previous.beta[key]
                continue
            a_new = P / C[u]
            alpha[key] = a_new
            beta[key] = max(P / (st.sum_pl[key] + a_new * D[u]), FLOOR)
    return ModelParams(lam, alpha, beta)


def _posterior(params: ModelParams, log: EventLog, topology: SystemTopology, packs: dict) -> BranchingPosterior:
    out = {}
    for m in topology.modules(1):
        t = log[m]
        n = t.size
        out[m] = ModulePosterior(m, (), t, np.ones(n), np.zeros(n + 1, dtype=np.int64),
                                 np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0))
    for m, packed in packs.items():
        lam0, alpha, beta = _module_arrays(params, packed)
        counts = _kernels.pair_counts(packed.t_down, packed.down_win, packed.up_times, packed.up_ptr, packed.first)
        indptr = np.zeros(counts.size + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        p0, prob, umod, uidx, _ = _kernels.estep_full(
            packed.t_down, packed.down_win, packed.up_times, packed.up_ptr, packed.first, lam0, alpha, beta, indptr)
        out[m] = ModulePosterior(m, packed.upstream, packed.t_down, p0, indptr, umod, uidx, prob)
    return BranchingPosterior(out)


def e_step(params: ModelParams, log: EventLog, windows: SubWindowing,
           topology: SystemTopology | None = None) -> BranchingPosterior:
    """Posterior branching probabilities with candidates restricted to each event's sub-window."""
    topology = topology or _infer_topology(log, params)
    log = log.conform(topology)
    return _posterior(params, log, topology, _pack_all(log, topology, windows))


def m_step(posterior: BranchingPosterior, log: EventLog, windows: SubWindowing,
           previous: ModelParams, topology: SystemTopology | None = None) -> ModelParams:
    """Closed-form parameter update from a posterior (see module docstring)."""
    topology = topology or _infer_topology(log, previous)
    log = log.conform(topology)
    packs = _pack_all(log, topology, windows)
    st = _Stats()
    for m in topology.modules():
        mp = posterior[m]
        st.sum_p0[m] = float(np.sum(mp.p0))
    for m, packed in packs.items():
        mp = posterior[m]
        rows = np.repeat(np.arange(mp.p0.size), np.diff(mp.indptr))
        up_times = [log[u] for u in mp.upstream]
        for u, up in enumerate(mp.upstream):
            sel = mp.upstream_module == u
            p = mp.prob[sel]
            lags = mp.times[rows[sel]] - up_times[u][mp.upstream_index[sel]]
            st.sum_p[(m, up)] = float(p.sum())
            st.sum_pl[(m, up)] = float(np.sum(p * lags))
    return _mstep(st, log, previous, packs)


def fit(log: EventLog, topology: SystemTopology, config: FitConfig = FitConfig()) -> FitReport:
    """Alternate E and M steps until the relative change of the composite
    log-likelihood falls below ``config.tolerance``.

    ``ll_trace[a]`` is the objective at the a-th iterate. Non-convergence
    is reported through ``converged=False``, never raised.
    """
    start = time.perf_counter()
    log = log.conform(topology)
    windows = SubWindowing(log.window_length, config.K)
    packs = _pack_all(log, topology, windows)
    if isinstance(config.init, ModelParams):
        bad = validate_topology(topology, config.init)
        if not bad.ok:
            raise ValueError("invalid initial parameters: " + "; ".join(bad.violations))
        params = config.init
    else:
        params = default_init(log, topology, windows)
    initial = params

    trace = []
    converged = False
    max_err = 0.0
    pairs = 0
    for _ in range(config.max_iterations):
        st = _estep(params, log, topology, packs)
        trace.append(st.loglik)
        max_err = max(max_err, st.max_err)
        pairs = st.pairs
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) / (abs(trace[-1]) + 1.0) < config.tolerance:
            converged = True
            break
        params = _mstep(st, log, params, packs)

    posterior = _posterior(params, log, topology, packs) if config.keep_posterior else None
    elapsed = time.perf_counter() - start
    return FitReport(params, trace, len(trace), converged, elapsed, config.K, posterior, max_err, pairs, initial)


def estimate_cost(log: EventLog, windows: SubWindowing, topology: SystemTopology | None = None) -> int:
    """Exact number of (downstream event, upstream candidate) pairs one E-step visits."""
    topology = topology or _infer_topology(log)
    log = log.conform(topology)
    total = 0
    for packed in _pack_all(log, topology, windows).values():
        counts = _kernels.pair_counts(packed.t_down, packed.down_win, packed.up_times, packed.up_ptr, packed.first)
        total += int(counts.sum())
    return total
