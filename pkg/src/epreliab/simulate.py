"""Synthetic multi-stage event logs.

Stage 1 is a homogeneous Poisson process per module, optionally overlaid
with error-injection ticks. Every later stage is drawn by thinning,
conditional on the realised events of the stage before it.

Random streams are derived from ``(seed, replication, stage, module)``
through ``numpy.random.SeedSequence``, so a replication's output does not
depend on which worker ran it or in what order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import EventLog, ModelParams, ModuleRef, SystemTopology, validate_topology


@dataclass(frozen=True)
class InjectionSchedule:
    module: ModuleRef
    intervals: tuple
    probability: float
    tick_rate: float = 20.0

    def __post_init__(self):
        spans = tuple(sorted((float(a), float(b)) for a, b in self.intervals))
        for a, b in spans:
            if not 0 <= a <= b:
                raise ValueError(f"bad injection interval [{a}, {b})")
        for (a0, b0), (a1, b1) in zip(spans, spans[1:]):
            if a1 < b0:
                raise ValueError(f"injection intervals overlap: [{a0}, {b0}) and [{a1}, {b1})")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"injection probability must lie in [0, 1], got {self.probability}")
        if not self.tick_rate > 0:
            raise ValueError(f"tick rate must be positive, got {self.tick_rate}")
        object.__setattr__(self, "intervals", spans)

    def ticks(self) -> np.ndarray:
        """Sampling instants n / tick_rate falling inside the schedule's intervals."""
        out = []
        for a, b in self.intervals:
            n0 = int(np.ceil(a * self.tick_rate))
            n1 = int(np.ceil(b * self.tick_rate))
            n = np.arange(n0, n1)
            t = n / self.tick_rate
            # guard against rounding at the interval edges
            out.append(t[(t >= a) & (t < b)])
        return np.concatenate(out) if out else np.empty(0)


@dataclass(frozen=True)
class SimConfig:
    topology: SystemTopology
    params: ModelParams
    window_length: float
    seed: int = 0
    stage1_source: str | Sequence[InjectionSchedule] = "hpp"
    replication: int = 0

    def __post_init__(self):
        bad = validate_topology(self.topology, self.params)
        if not bad.ok:
            raise ValueError("invalid simulation parameters: " + "; ".join(bad.violations))
        if not self.window_length >= 0:
            raise ValueError("window length must be nonnegative")
        if isinstance(self.stage1_source, str):
            if self.stage1_source != "hpp":
                raise ValueError(f"stage1_source must be 'hpp' or a list of schedules, got {self.stage1_source!r}")
        else:
            object.__setattr__(self, "stage1_source", tuple(self.stage1_source))
            for sch in self.stage1_source:
                if sch.module.stage != 1 or sch.module not in self.topology:
                    raise ValueError(f"injection schedule targets {sch.module}, which is not a stage-1 module")
                if sch.intervals and sch.intervals[-1][1] > self.window_length:
                    raise ValueError(f"injection interval for {sch.module} extends past T={self.window_length}")


def stream(seed: int, replication: int, module: ModuleRef, purpose: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(replication), module.stage, module.module, purpose])
    return np.random.Generator(np.random.PCG64(ss))


def simulate_hpp(rate: float, T: float, rng: np.random.Generator) -> np.ndarray:
    """Homogeneous Poisson process on [0, T) from exponential inter-arrivals."""
    if T <= 0:
        return np.empty(0)
    if not rate > 0:
        raise ValueError(f"rate must be positive, got {rate}")
    out = []
    t = 0.0
    # draw in blocks sized to the expected count
    block = max(16, int(rate * T * 1.1) + 16)
    while True:
        gaps = rng.exponential(1.0 / rate, size=block)
        times = t + np.cumsum(gaps)
        inside = times[times < T]
        out.append(inside)
        if inside.size < times.size:
            break
        t = times[-1]
    res = np.concatenate(out)
    # strictly increasing: a zero gap can only come from float underflow
    return res[np.concatenate(([True], np.diff(res) > 0))] if res.size else res


def generate_injection_events(schedule: InjectionSchedule, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(p) draw at every tick of the schedule; events sit on the tick."""
    ticks = schedule.ticks()
    if ticks.size == 0 or schedule.probability == 0.0:
        return np.empty(0)
    u = rng.random(ticks.size)
    return ticks[u <= schedule.probability] if schedule.probability < 1.0 else ticks


def simulate_downstream(params: ModelParams, module: ModuleRef, upstream_logs: dict, T: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Thinning for lambda0 + sum alpha*beta*exp(-beta*(t - t_j)) given fixed upstream events.

    Between upstream events the intensity only decays, so its current value
    dominates it until the next upstream event; the bound is refreshed at
    every accepted/rejected candidate and at every upstream crossing.
    """
    if T <= 0:
        return np.empty(0)
    lam0 = params.lambda0[module]
    ups = sorted(upstream_logs)
    ab = np.array([params.alpha[(module, u)] * params.beta[(module, u)] for u in ups], dtype=float)
    be = np.array([params.beta[(module, u)] for u in ups], dtype=float)
    # merged upstream arrivals, tagged with their source module
    if ups:
        times = np.concatenate([np.asarray(upstream_logs[u], dtype=float) for u in ups])
        tags = np.concatenate([np.full(len(upstream_logs[u]), i) for i, u in enumerate(ups)])
        order = np.argsort(times, kind="stable")
        arr_t, arr_u = times[order], tags[order]
    else:
        arr_t, arr_u = np.empty(0), np.empty(0, dtype=int)
    state = np.zeros(len(ups))  # sum_j exp(-beta (t - t_j)) per upstream module
    t = 0.0
    nxt = 0
    out = []
    n_up = arr_t.size
    while True:
        # absorb upstream events at or before t (strictly earlier events excite)
        while nxt < n_up and arr_t[nxt] <= t:
            dt = t - arr_t[nxt]
            state[arr_u[nxt]] += np.exp(-be[arr_u[nxt]] * dt)
            nxt += 1
        bound = lam0 + float(ab @ state)
        horizon = arr_t[nxt] if nxt < n_up else T
        cand = t + rng.exponential(1.0 / bound)
        if cand >= horizon:
            if horizon >= T:
                break
            state *= np.exp(-be * (horizon - t))
            t = horizon
            continue
        state *= np.exp(-be * (cand - t))
        t = cand
        lam = lam0 + float(ab @ state)
        if rng.random() * bound <= lam:
            if not out or cand > out[-1]:
                out.append(cand)
    return np.array(out)


def simulate_system(config: SimConfig) -> EventLog:
    """Stage 1 from Poisson (plus injections, if scheduled), then each later stage in order."""
    topo, params, T = config.topology, config.params, config.window_length
    events = {}
    schedules = {}
    if not isinstance(config.stage1_source, str):
        for sch in config.stage1_source:
            schedules.setdefault(sch.module, []).append(sch)
    for m in topo.modules(1):
        base = simulate_hpp(params.lambda0[m], T, stream(config.seed, config.replication, m, 0))
        extra = [generate_injection_events(sch, stream(config.seed, config.replication, m, 1 + i))
                 for i, sch in enumerate(schedules.get(m, []))]
        events[m] = np.unique(np.concatenate([base] + extra)) if extra else base
    for s in range(2, topo.stage_count + 1):
        for m in topo.modules(s):
            ups = {u: events[u] for u in topo.modules(s - 1)}
            events[m] = simulate_downstream(params, m, ups, T, stream(config.seed, config.replication, m, 0))
    return EventLog(T, events)


def two_parent_topology() -> SystemTopology:
    return SystemTopology((2, 1))


def two_parent_params(stage1_rate: float = 0.2, lambda0: float = 0.5, alpha: float = 0.3, beta: float = 0.3) -> ModelParams:
    """Two stage-1 modules feeding one stage-2 module (numerical study setup)."""
    return ModelParams.uniform(two_parent_topology(), lambda0, alpha, beta, stage1_rate=stage1_rate)
