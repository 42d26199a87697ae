"""Topology, event data and parameter containers shared by every other module.

Stage and module indices are 1-based at the public surface, matching the
usual ``m_s`` notation for "module m at stage s".
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np


class TopologyError(ValueError):
    """Raised for references that do not exist in a topology."""


class EventLogError(ValueError):
    """Raised for malformed event data (unsorted, duplicated, out of window)."""


@dataclass(frozen=True, order=True)
class ModuleRef:
    stage: int
    module: int

    def __post_init__(self):
        if int(self.stage) < 1 or int(self.module) < 1:
            raise TopologyError(f"indices are 1-based, got {self.stage}.{self.module}")

    def __str__(self) -> str:
        return f"{self.stage}.{self.module}"

    @classmethod
    def parse(cls, text: str) -> "ModuleRef":
        try:
            s, m = str(text).strip().split(".")
            return cls(int(s), int(m))
        except (ValueError, TypeError) as exc:
            raise TopologyError(f"bad module reference {text!r}; expected 'stage.module'") from exc


Pair = tuple  # (downstream ModuleRef, upstream ModuleRef)


def pair_key(pair: Pair) -> str:
    down, up = pair
    return f"{down}<-{up}"


def parse_pair_key(text: str) -> Pair:
    try:
        down, up = str(text).split("<-")
    except ValueError as exc:
        raise TopologyError(f"bad pair key {text!r}; expected 'S.M<-S.M'") from exc
    return ModuleRef.parse(down), ModuleRef.parse(up)


@dataclass(frozen=True)
class SystemTopology:
    modules_per_stage: tuple

    def __post_init__(self):
        counts = tuple(int(m) for m in self.modules_per_stage)
        if not counts:
            raise TopologyError("a topology needs at least one stage")
        if any(m < 1 for m in counts):
            raise TopologyError(f"every stage needs at least one module, got {list(counts)}")
        object.__setattr__(self, "modules_per_stage", counts)

    @property
    def stage_count(self) -> int:
        return len(self.modules_per_stage)

    def modules(self, stage: int | None = None) -> list[ModuleRef]:
        stages = range(1, self.stage_count + 1) if stage is None else [stage]
        return [ModuleRef(s, m) for s in stages for m in range(1, self.modules_per_stage[s - 1] + 1)]

    def pairs(self) -> list[Pair]:
        """All (downstream, upstream) pairs allowed between adjacent stages."""
        out = []
        for s in range(2, self.stage_count + 1):
            for down in self.modules(s):
                for up in self.modules(s - 1):
                    out.append((down, up))
        return out

    def upstream_of(self, module: ModuleRef) -> list[ModuleRef]:
        self.check(module)
        if module.stage == 1:
            return []
        return self.modules(module.stage - 1)

    def __contains__(self, module: ModuleRef) -> bool:
        return (
            isinstance(module, ModuleRef)
            and 1 <= module.stage <= self.stage_count
            and 1 <= module.module <= self.modules_per_stage[module.stage - 1]
        )

    def check(self, module: ModuleRef) -> None:
        if module not in self:
            raise TopologyError(f"module {module} is not part of topology {list(self.modules_per_stage)}")


def parameter_count(topology: SystemTopology) -> int:
    """Number of free parameters: M_1 + sum_{s>=2} M_s (2 M_{s-1} + 1)."""
    m = topology.modules_per_stage
    return m[0] + sum(m[s] * (2 * m[s - 1] + 1) for s in range(1, len(m)))


@dataclass(frozen=True)
class ModelParams:
    """Primary rates per module and (alpha, beta) per adjacent-stage pair.

    ``alpha`` is the expected number of downstream offspring per upstream
    event; the propagation kernel is ``alpha * beta * exp(-beta * lag)``.
    """

    lambda0: Mapping[ModuleRef, float]
    alpha: Mapping[Pair, float] = field(default_factory=dict)
    beta: Mapping[Pair, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "lambda0", {k: float(v) for k, v in self.lambda0.items()})
        object.__setattr__(self, "alpha", {k: float(v) for k, v in self.alpha.items()})
        object.__setattr__(self, "beta", {k: float(v) for k, v in self.beta.items()})

    @classmethod
    def uniform(cls, topology: SystemTopology, lambda0: float, alpha: float, beta: float,
                stage1_rate: float | None = None) -> "ModelParams":
        lam = {}
        for mod in topology.modules():
            lam[mod] = stage1_rate if (mod.stage == 1 and stage1_rate is not None) else lambda0
        pairs = topology.pairs()
        return cls(lam, {p: alpha for p in pairs}, {p: beta for p in pairs})

    def flatten(self, topology: SystemTopology) -> np.ndarray:
        """Parameter vector ordered as: lambda0 per module, then alpha, beta per pair."""
        lam = [self.lambda0[m] for m in topology.modules()]
        pairs = topology.pairs()
        return np.array(lam + [self.alpha[p] for p in pairs] + [self.beta[p] for p in pairs], dtype=float)

    def labels(self, topology: SystemTopology) -> list[str]:
        pairs = topology.pairs()
        return (
            [f"lambda0[{m}]" for m in topology.modules()]
            + [f"alpha[{pair_key(p)}]" for p in pairs]
            + [f"beta[{pair_key(p)}]" for p in pairs]
        )

    def to_dict(self) -> dict:
        return {
            "lambda0": {str(k): v for k, v in sorted(self.lambda0.items())},
            "alpha": {pair_key(k): v for k, v in sorted(self.alpha.items())},
            "beta": {pair_key(k): v for k, v in sorted(self.beta.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelParams":
        return cls(
            {ModuleRef.parse(k): v for k, v in data.get("lambda0", {}).items()},
            {parse_pair_key(k): v for k, v in data.get("alpha", {}).items()},
            {parse_pair_key(k): v for k, v in data.get("beta", {}).items()},
        )


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_topology(topology: SystemTopology, params: ModelParams) -> ValidationResult:
    """Check ``params`` against ``topology``; collects every violation instead of raising."""
    problems = []
    modules = topology.modules()
    for mod in modules:
        if mod not in params.lambda0:
            problems.append(f"missing primary rate for module {mod}")
        elif not params.lambda0[mod] > 0 or not np.isfinite(params.lambda0[mod]):
            problems.append(f"nonpositive primary rate for module {mod}: {params.lambda0[mod]}")
    for mod in params.lambda0:
        if mod not in topology:
            problems.append(f"stray primary rate key {mod}")

    expected = set(topology.pairs())
    for name, table in (("alpha", params.alpha), ("beta", params.beta)):
        for p in sorted(expected):
            if p not in table:
                problems.append(f"missing pair {pair_key(p)} in {name}")
        for p in table:
            if p not in expected:
                problems.append(f"stray pair key {pair_key(p)} in {name}")
    for p, a in params.alpha.items():
        if p in expected and (not a >= 0 or not np.isfinite(a)):
            problems.append(f"negative propagation ratio alpha[{pair_key(p)}] = {a}")
    for p, b in params.beta.items():
        if p in expected and (not b > 0 or not np.isfinite(b)):
            problems.append(f"nonpositive decay rate beta[{pair_key(p)}] = {b}")
    return ValidationResult(tuple(problems))


def _as_times(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    arr.setflags(write=False)
    return arr


class EventLog:
    """Per-module strictly increasing event times on the window [0, T)."""

    def __init__(self, window_length: float, events: Mapping[ModuleRef, Iterable[float]]):
        T = float(window_length)
        if not (T >= 0 and np.isfinite(T)):
            raise EventLogError(f"window length must be finite and nonnegative, got {window_length}")
        self._T = T
        store = {}
        for mod, times in events.items():
            if not isinstance(mod, ModuleRef):
                raise EventLogError(f"event keys must be ModuleRef, got {mod!r}")
            arr = _as_times(times)
            if arr.size:
                if not np.all(np.isfinite(arr)):
                    raise EventLogError(f"module {mod}: non-finite timestamp")
                if arr[0] < 0 or arr[-1] >= T:
                    bad = arr[(arr < 0) | (arr >= T)][0]
                    raise EventLogError(f"module {mod}: timestamp {bad!r} outside [0, {T!r})")
                diffs = np.diff(arr)
                if np.any(diffs <= 0):
                    i = int(np.argmax(diffs <= 0))
                    kind = "duplicate" if diffs[i] == 0 else "out-of-order"
                    raise EventLogError(
                        f"module {mod}: {kind} timestamp {arr[i + 1]!r} at position {i + 1}"
                    )
            store[mod] = arr
        self._events = dict(sorted(store.items()))

    @property
    def window_length(self) -> float:
        return self._T

    @property
    def events(self) -> Mapping[ModuleRef, np.ndarray]:
        return dict(self._events)

    def __getitem__(self, module: ModuleRef) -> np.ndarray:
        return self._events.get(module, _EMPTY)

    def modules(self) -> list[ModuleRef]:
        return list(self._events)

    def __iter__(self) -> Iterator[ModuleRef]:
        return iter(self._events)

    def count(self, module: ModuleRef | None = None) -> int:
        if module is None:
            return sum(a.size for a in self._events.values())
        return int(self[module].size)

    def stage_events(self, stage: int) -> tuple[np.ndarray, list[ModuleRef]]:
        """Union of a stage's module sequences, sorted by (time, module)."""
        mods = [m for m in self._events if m.stage == stage]
        times, owners = [], []
        for m in mods:
            times.append(self._events[m])
            owners.extend([m] * self._events[m].size)
        if not times:
            return _EMPTY, []
        t = np.concatenate(times)
        order = np.lexsort((np.array([o.module for o in owners]), t))
        return t[order], [owners[i] for i in order]

    def system_events(self) -> tuple[np.ndarray, list[ModuleRef]]:
        stages = sorted({m.stage for m in self._events})
        times, owners = [], []
        for s in stages:
            t, o = self.stage_events(s)
            times.append(t)
            owners.extend(o)
        if not times:
            return _EMPTY, []
        t = np.concatenate(times)
        order = np.lexsort((np.array([o.module for o in owners]), np.array([o.stage for o in owners]), t))
        return t[order], [owners[i] for i in order]

    def truncate(self, tau: float) -> "EventLog":
        """Events strictly before ``tau``, on the window [0, tau)."""
        tau = float(tau)
        if tau < 0 or tau > self._T:
            raise EventLogError(f"truncation point {tau} outside [0, {self._T}]")
        return EventLog(tau, {m: a[a < tau] for m, a in self._events.items()})

    def between(self, module: ModuleRef, a: float, b: float) -> np.ndarray:
        arr = self[module]
        return arr[(arr >= a) & (arr < b)]

    def conform(self, topology: SystemTopology) -> "EventLog":
        """Check modules against ``topology`` and add empty sequences for silent modules."""
        for m in self._events:
            if m not in topology:
                raise TopologyError(
                    f"event log has module {m} which is not in topology {list(topology.modules_per_stage)}"
                )
        full = {m: self[m] for m in topology.modules()}
        return EventLog(self._T, full)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventLog):
            return NotImplemented
        if self._T != other._T:
            return False
        mods = set(self._events) | set(other._events)
        return all(np.array_equal(self[m], other[m]) for m in mods)

    def __repr__(self) -> str:
        counts = ", ".join(f"{m}: {a.size}" for m, a in self._events.items())
        return f"EventLog(T={self._T}, {{{counts}}})"


_EMPTY = _as_times([])
