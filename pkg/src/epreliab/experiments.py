"""Study pipelines shared by the command line and the acceptance suite.

Two study families are provided:

* ``numerical``: two stage-1 modules feeding one stage-2 module, with
  stage-1 rate 0.2 and stage-2 (lambda0, alpha, beta) = (0.5, 0.3, 0.3).
* ``injection``: the same layout standing in for 2-D detection, 3-D
  detection and localization. Detection errors are injected on a 20 Hz
  grid on top of a weak Poisson background; localization errors follow
  the propagation model with the parameters in ``INJECTION_PARAMS``.

Replications are independent and deterministic in ``(seed, replication)``,
so ``jobs > 1`` (a process pool) produces the same numbers as ``jobs = 1``.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import EventLog, ModelParams, ModuleRef, SystemTopology
from .estimation import FitConfig, FitReport, fit
from .evaluation import BENCHMARKS, fit_benchmark, mae, predict_benchmark, predict_count, rrmse
from .selection import SelectionReport, stepwise_select_k
from .simulate import InjectionSchedule, SimConfig, simulate_system

NUMERICAL_TOPOLOGY = SystemTopology((2, 1))
NUMERICAL_PARAMS = ModelParams.uniform(NUMERICAL_TOPOLOGY, 0.5, 0.3, 0.3, stage1_rate=0.2)
NUMERICAL_T = (500.0, 1000.0, 2500.0, 5000.0)
NUMERICAL_K = (1, 2, 5, 10, 20, 50, 100, 250, 500)
NUMERICAL_R = 100

# fits in the studies run to a tight tolerance so EM is the exact-likelihood reference
STUDY_TOLERANCE = 1e-9
STUDY_MAX_ITERATIONS = 5000

_DET2, _DET3, _LOC = ModuleRef(1, 1), ModuleRef(1, 2), ModuleRef(2, 1)
INJECTION_TOPOLOGY = SystemTopology((2, 1))
INJECTION_PARAMS = ModelParams(
    {_DET2: 0.05, _DET3: 0.05, _LOC: 0.2},
    {(_LOC, _DET2): 0.3, (_LOC, _DET3): 0.2},
    {(_LOC, _DET2): 2.0, (_LOC, _DET3): 2.0},
)
INJECTION_T = 200.0
INJECTION_TAU = 180.0
INJECTION_DTAU = 20.0
INJECTION_R = 30
TICK_RATE = 20.0
# label -> (condition, 2-D probability, 3-D probability, intervals)
_ALWAYS = ((0.0, 200.0),)
_INTERMITTENT = ((50.0, 100.0), (150.0, 200.0))
SCENARIOS = {
    "Sce. 1": ("clear", 0.00, 0.00, _ALWAYS),
    "Sce. 2": ("snow", 0.40, 0.25, _ALWAYS),
    "Sce. 3": ("rain", 0.55, 0.50, _ALWAYS),
    "Sce. 4": ("foggy", 0.60, 0.60, _ALWAYS),
    "Sce. 5": ("snow", 0.40, 0.25, _INTERMITTENT),
    "Sce. 6": ("rain", 0.55, 0.50, _INTERMITTENT),
    "Sce. 7": ("foggy", 0.60, 0.60, _INTERMITTENT),
}
INTERMITTENT = ("Sce. 5", "Sce. 6", "Sce. 7")


def scaled_replications(reference_R: int, scale: float) -> int:
    R = int(round(reference_R * scale))
    if R < 2:
        raise ValueError(f"scale {scale} gives R={R} replications per cell; the minimum is R=2")
    return R


def pool_map(func, items, jobs: int = 1) -> list:
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [func(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(func, items))


# ---------------------------------------------------------------- simulation

@dataclass(frozen=True)
class _SimJob:
    config: SimConfig

    def __call__(self, replication: int) -> EventLog:
        c = self.config
        return simulate_system(SimConfig(c.topology, c.params, c.window_length, c.seed, c.stage1_source, replication))


def simulate_replications(config: SimConfig, R: int, jobs: int = 1) -> list[EventLog]:
    return pool_map(_SimJob(config), range(R), jobs)


def injection_schedules(label: str) -> list[InjectionSchedule]:
    _, p2, p3, spans = SCENARIOS[label]
    return [InjectionSchedule(_DET2, spans, p2, TICK_RATE), InjectionSchedule(_DET3, spans, p3, TICK_RATE)]


def injection_config(label: str, seed: int) -> SimConfig:
    return SimConfig(INJECTION_TOPOLOGY, INJECTION_PARAMS, INJECTION_T, seed, injection_schedules(label))


# ---------------------------------------------------------------- fitting

@dataclass(frozen=True)
class _FitJob:
    topology: SystemTopology
    config: FitConfig

    def __call__(self, log: EventLog) -> FitReport:
        return fit(log, self.topology, self.config)


def study_fit_config(K: int, tolerance: float = STUDY_TOLERANCE,
                     max_iterations: int = STUDY_MAX_ITERATIONS) -> FitConfig:
    return FitConfig(K=K, tolerance=tolerance, max_iterations=max_iterations, keep_posterior=False)


def fit_replications(logs, topology: SystemTopology, config: FitConfig, jobs: int = 1) -> list[FitReport]:
    return pool_map(_FitJob(topology, config), logs, jobs)


@dataclass
class MethodSummary:
    K: int
    labels: list
    mean: np.ndarray
    sd: np.ndarray
    rrmse: np.ndarray
    elapsed: np.ndarray
    converged: int
    reports: list = field(default_factory=list, repr=False)

    @property
    def mrrmse(self) -> float:
        return float(np.mean(self.rrmse))


def summarize(reports: list[FitReport], truth: ModelParams, topology: SystemTopology) -> MethodSummary:
    est = np.array([r.estimates.flatten(topology) for r in reports])
    return MethodSummary(
        K=reports[0].K,
        labels=truth.labels(topology),
        mean=est.mean(axis=0),
        sd=est.std(axis=0, ddof=1) if len(reports) > 1 else np.zeros(est.shape[1]),
        rrmse=np.array([rrmse(truth, r.estimates) for r in reports]),
        elapsed=np.array([r.elapsed for r in reports]),
        converged=sum(r.converged for r in reports),
        reports=reports,
    )


# ---------------------------------------------------------------- K selection

@dataclass
class SelectionSpec:
    topology: SystemTopology
    params: ModelParams
    window_length: float
    R: int
    seed: int
    candidates: tuple = (1, 2, 5, 10, 20, 50)
    alpha: float = 0.05
    tolerance: float = STUDY_TOLERANCE
    max_iterations: int = STUDY_MAX_ITERATIONS

    def __post_init__(self):
        if self.R < 2:
            raise ValueError(f"selection needs at least R=2 replications, got {self.R}")


def select_k(spec: SelectionSpec, jobs: int = 1, sink: list | None = None) -> tuple[int, SelectionReport, dict]:
    """Simulate R datasets once, then score every candidate K on the same datasets.

    Every ``FitReport`` produced is appended to ``sink`` when one is given.
    """
    logs = simulate_replications(SimConfig(spec.topology, spec.params, spec.window_length, spec.seed), spec.R, jobs)
    scores: dict[int, np.ndarray] = {}

    def runner(K: int, R: int):
        reports = fit_replications(logs[:R], spec.topology,
                                   study_fit_config(K, spec.tolerance, spec.max_iterations), jobs)
        if sink is not None:
            sink.extend(reports)
        scores[K] = np.array([rrmse(spec.params, r.estimates) for r in reports])
        return scores[K]

    K_star, report = stepwise_select_k(spec.candidates, runner, spec.R, spec.alpha)
    return K_star, report, scores


# ---------------------------------------------------------------- prediction

@dataclass(frozen=True)
class _PredictJob:
    label: str
    seed: int
    K: int
    tau: float
    dtau: float
    tolerance: float

    def __call__(self, replication: int) -> dict:
        c = injection_config(self.label, self.seed)
        log = simulate_system(SimConfig(c.topology, c.params, c.window_length, c.seed, c.stage1_source, replication))
        return prediction_cell(log, INJECTION_TOPOLOGY, self.tau, self.dtau, self.K, self.tolerance)


def prediction_cell(log: EventLog, topology: SystemTopology, tau: float, dtau: float, K: int = 1,
                    tolerance: float = 1e-6) -> dict:
    """Fit every method on [0, tau) and predict each downstream module's count in [tau, tau + dtau).

    Returns ``{module: {"actual": n, "ep_observed": x, "ep_frozen": x, <benchmark>: x}}``.
    """
    past = log.truncate(tau)
    rep = fit(past, topology, FitConfig(K=K, tolerance=tolerance, max_iterations=STUDY_MAX_ITERATIONS,
                                        keep_posterior=False))
    horizon = (tau, tau + dtau)
    out = {}
    for m in topology.modules():
        if m.stage < 2:
            continue
        row = {
            "actual": float(log.between(m, tau, tau + dtau).size),
            "ep_observed": predict_count(rep.estimates, m, log, horizon, upstream="observed"),
            "ep_frozen": predict_count(rep.estimates, m, past, horizon, upstream="frozen"),
        }
        for b in BENCHMARKS:
            row[b] = predict_benchmark(fit_benchmark(b, past[m], tau).params, horizon)
        out[m] = row
    return out


PREDICTION_METHODS = ("ep_observed", "ep_frozen") + BENCHMARKS


def injection_study(label: str, R: int, seed: int, K: int = 1, tau: float = INJECTION_TAU,
                    dtau: float = INJECTION_DTAU, tolerance: float = 1e-6, jobs: int = 1) -> dict:
    """MAE of every method for the localization module over R replications of one scenario."""
    cells = pool_map(_PredictJob(label, seed, K, tau, dtau, tolerance), range(R), jobs)
    actual = [c[_LOC]["actual"] for c in cells]
    result = {"scenario": label, "R": R, "actual_mean": float(np.mean(actual))}
    result["mae"] = {meth: mae(actual, [c[_LOC][meth] for c in cells]) for meth in PREDICTION_METHODS}
    result["cells"] = [{k: float(v) for k, v in c[_LOC].items()} for c in cells]
    return result

