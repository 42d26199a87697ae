"""Accuracy metrics, count prediction and benchmark reliability-growth models.

Benchmarks are fitted by maximising the point-process log-likelihood
``sum(log lambda(t_i)) - Lambda(T)``:

* ``poisson``: ``lambda = theta1`` (closed-form fit ``n / T``);
* ``musa_okumoto``: ``lambda = theta2 / (1 + theta2 * theta1 * t)``;
* ``gompertz``: ``lambda = theta1 * theta2**t * theta3**(theta2**t) * log(theta2) * log(theta3)``,
  whose mean-value function is ``theta1 * theta3**(theta2**t)``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .core import EventLog, ModelParams, ModuleRef, SystemTopology
from .intensity import IntervalError, compensator

BENCHMARKS = ("poisson", "musa_okumoto", "gompertz")
_NPARAM = {"poisson": 1, "musa_okumoto": 2, "gompertz": 3}


class DomainError(ArithmeticError):
    """A relative metric was asked to divide by a zero reference value."""


# ---------------------------------------------------------------- metrics

def rrmse(truth: ModelParams, estimate: ModelParams) -> float:
    """Root mean squared relative error over every parameter of ``truth``."""
    t_keys = (set(truth.lambda0), set(truth.alpha), set(truth.beta))
    e_keys = (set(estimate.lambda0), set(estimate.alpha), set(estimate.beta))
    if t_keys != e_keys:
        raise ValueError("truth and estimate have different parameter keys")
    t, e = [], []
    for a, b in ((truth.lambda0, estimate.lambda0), (truth.alpha, estimate.alpha), (truth.beta, estimate.beta)):
        for k in sorted(a):
            t.append(a[k])
            e.append(b[k])
    t, e = np.array(t), np.array(e)
    if t.size == 0:
        raise ValueError("no parameters to compare")
    if np.any(t == 0):
        raise DomainError("relative error undefined: a true parameter is exactly 0")
    return float(np.sqrt(np.mean(((t - e) / t) ** 2)))


def mrrmse(values) -> float:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("mrrmse needs at least one value")
    return float(v.mean())


def mae(actual, predicted) -> float:
    a = np.asarray(actual, dtype=float)
    p = np.asarray(predicted, dtype=float)
    if a.shape != p.shape:
        raise ValueError(f"length mismatch: {a.size} actual vs {p.size} predicted")
    if a.size == 0:
        raise ValueError("mae needs at least one pair")
    return float(np.mean(np.abs(a - p)))


# ---------------------------------------------------------------- prediction

def _horizon(horizon) -> tuple[float, float]:
    tau, end = map(float, horizon)
    if end < tau:
        raise IntervalError(f"prediction horizon [{tau}, {end}) has negative length")
    return tau, end


def predict_count(params: ModelParams, module: ModuleRef, log: EventLog, horizon,
                  upstream: str = "frozen") -> float:
    """Expected number of events of ``module`` in ``horizon = (tau, tau + dtau)``.

    ``upstream="frozen"`` uses only upstream events before ``tau``: their
    residual excitation plus the primary rate. ``upstream="observed"``
    integrates the intensity given every upstream event in the log that
    precedes the time of integration, i.e. the compensator over the horizon
    when the upstream stage is observed while the module is forecast.
    """
    tau, end = _horizon(horizon)
    if upstream == "frozen":
        past = EventLog(max(tau, log.window_length),
                        {m: a[a < tau] for m, a in log.events.items()})
        return compensator(params, module, (tau, end), past)
    if upstream == "observed":
        if end > log.window_length:
            raise IntervalError(f"horizon end {end} is past the log's window {log.window_length}")
        return compensator(params, module, (tau, end), log)
    raise ValueError(f"upstream must be 'frozen' or 'observed', got {upstream!r}")


# ---------------------------------------------------------------- benchmarks

@dataclass(frozen=True)
class BenchmarkParams:
    model: str
    theta: tuple

    def __post_init__(self):
        if self.model not in BENCHMARKS:
            raise ValueError(f"unknown benchmark {self.model!r}; expected one of {BENCHMARKS}")
        th = tuple(float(x) for x in self.theta)
        if len(th) != _NPARAM[self.model]:
            raise ValueError(f"{self.model} takes {_NPARAM[self.model]} parameters, got {len(th)}")
        if not all(np.isfinite(th)) or th[0] <= 0:
            raise ValueError(f"{self.model}: theta1 must be positive and finite, got {th}")
        if self.model == "musa_okumoto" and not th[1] > 0:
            raise ValueError(f"musa_okumoto: theta2 must be positive, got {th[1]}")
        if self.model == "gompertz" and not (0 < th[1] < 1 and 0 < th[2] < 1):
            raise ValueError(f"gompertz: theta2 and theta3 must lie in (0, 1), got {th[1:]}")
        object.__setattr__(self, "theta", th)

    def to_dict(self) -> dict:
        return {"model": self.model, "theta": list(self.theta)}


def benchmark_intensity(bp: BenchmarkParams, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("benchmark intensity is defined for t >= 0")
    th = bp.theta
    if bp.model == "poisson":
        out = np.full(t.shape, th[0])
    elif bp.model == "musa_okumoto":
        out = th[1] / (1.0 + th[1] * th[0] * t)
    else:
        l2, l3 = np.log(th[1]), np.log(th[2])
        out = np.exp(np.log(th[0]) + t * l2 + np.exp(t * l2) * l3) * l2 * l3
    return float(out) if out.ndim == 0 else out


def _mean_value(bp: BenchmarkParams, t: float) -> float:
    th = bp.theta
    if bp.model == "poisson":
        return th[0] * t
    if bp.model == "musa_okumoto":
        return np.log1p(th[1] * th[0] * t) / th[0]
    return th[0] * th[2] ** (th[1] ** t)


def benchmark_compensator(bp: BenchmarkParams, a: float, b: float) -> float:
    """Integral of the benchmark intensity over [a, b), in closed form."""
    if b < a:
        raise IntervalError(f"interval start {a} exceeds end {b}")
    if bp.model == "gompertz":
        # theta1 * (theta3**g_b - theta3**g_a) with g = theta2**t, in logs
        th = bp.theta
        l3 = np.log(th[2])
        ga, gb = th[1] ** a, th[1] ** b
        return float(np.exp(np.log(th[0]) + gb * l3) * -np.expm1((ga - gb) * l3))
    return float(_mean_value(bp, b) - _mean_value(bp, a))


def benchmark_loglik(bp: BenchmarkParams, events, T: float) -> float:
    ev = np.asarray(events, dtype=float)
    lam = np.atleast_1d(benchmark_intensity(bp, ev)) if ev.size else np.empty(0)
    if np.any(lam <= 0):
        return -np.inf
    return float(np.sum(np.log(lam)) - benchmark_compensator(bp, 0.0, T))


def _unpack(model: str, z: np.ndarray) -> tuple:
    if model == "musa_okumoto":
        return (np.exp(z[0]), np.exp(z[1]))
    return (np.exp(z[0]), special.expit(z[1]), special.expit(z[2]))


# search box in transformed coordinates; keeps every iterate representable
_ZMAX = {"musa_okumoto": np.array([50.0, 50.0]), "gompertz": np.array([700.0, 35.0, 35.0])}


def _transformed_loglik(model: str, z: np.ndarray, ev: np.ndarray, T: float) -> float:
    if np.any(np.abs(z) > _ZMAX[model]):
        return -np.inf
    if model == "musa_okumoto":
        th1, th2 = np.exp(z)
        c = th2 * th1
        return float(ev.size * np.log(th2) - np.sum(np.log1p(c * ev)) - np.log1p(c * T) / th1)
    # gompertz in logs: theta1 may be huge while theta3 is tiny
    a = z[0]
    l2, l3 = special.log_expit(z[1]), special.log_expit(z[2])
    g = np.exp(ev * l2)
    logs = a + ev * l2 + g * l3 + np.log(-l2) + np.log(-l3)
    gT = np.exp(T * l2)
    comp = np.exp(a + gT * l3) * -np.expm1((1.0 - gT) * l3)
    return float(np.sum(logs) - comp)


def _starts(model: str, n: int, T: float) -> list[np.ndarray]:
    """Eight starting points on a log-scaled grid around the data's scale."""
    rate = max(n, 1) / T
    if model == "musa_okumoto":
        grid = itertools.product(rate * np.array([0.5, 1.0, 2.0, 4.0]), [0.01, 2.0])
        # second coordinate is the dimensionless curvature theta2 * theta1 * T
        return [np.log([c / (t2 * T), t2]) for t2, c in grid]
    grid = itertools.product([1.5, 6.0], [1.0, 6.0], [0.1, 0.6])
    # (scale of total, decay over the window, theta3)
    out = []
    for s, k, t3 in grid:
        t2 = np.exp(-k / T)
        out.append(np.array([np.log(s * max(n, 1)), special.logit(t2), special.logit(t3)]))
    return out


@dataclass(frozen=True)
class BenchmarkFit:
    params: BenchmarkParams
    loglik: float
    converged: bool

    def to_dict(self) -> dict:
        return {**self.params.to_dict(), "loglik": self.loglik, "converged": self.converged}


def fit_benchmark(model: str, events, T: float) -> BenchmarkFit:
    """Maximum-likelihood fit on [0, T); multi-start Nelder-Mead for the NHPP models.

    Box constraints are enforced by fitting in log (positive) and logit
    ((0, 1)) coordinates, so returned parameters are always admissible.
    """
    if model not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {model!r}; expected one of {BENCHMARKS}")
    ev = np.asarray(events, dtype=float)
    if not T > 0:
        raise ValueError(f"window length must be positive, got {T}")
    n = ev.size
    if model == "poisson":
        if n == 0:
            raise ValueError("poisson fit needs at least one event")
        bp = BenchmarkParams("poisson", (n / T,))
        return BenchmarkFit(bp, benchmark_loglik(bp, ev, T), True)

    def objective(z):
        v = _transformed_loglik(model, z, ev, T)
        return -v if np.isfinite(v) else np.inf

    best = None
    for z0 in _starts(model, n, T):
        res = optimize.minimize(objective, z0, method="Nelder-Mead",
                                options={"xatol": 1e-9, "fatol": 1e-10, "maxiter": 4000, "maxfev": 8000})
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise ArithmeticError(f"{model}: no start produced a finite likelihood")
    bp = BenchmarkParams(model, _unpack(model, best.x))
    return BenchmarkFit(bp, -float(best.fun), bool(best.success))


def predict_benchmark(bp: BenchmarkParams, horizon) -> float:
    tau, end = _horizon(horizon)
    return benchmark_compensator(bp, tau, end)


def downstream_modules(topology: SystemTopology) -> list[ModuleRef]:
    return [m for m in topology.modules() if m.stage >= 2]
