"""Friedman rank test and stepwise selection of the sub-window count."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats


class SelectionError(RuntimeError):
    """A runner failed mid-selection; ``report`` holds the steps completed so far."""

    def __init__(self, message: str, report: "SelectionReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class PerformanceMatrix:
    """Scores (lower is better), one row per replication, one column per method."""

    methods: tuple
    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        if s.ndim != 2:
            raise ValueError("scores must be a 2-D replications x methods matrix")
        if s.shape[1] != len(self.methods):
            raise ValueError(f"{s.shape[1]} score columns for {len(self.methods)} methods")
        if s.shape[0] < 2 or s.shape[1] < 2:
            raise ValueError(f"need at least 2 replications and 2 methods, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("performance matrix has missing or non-finite cells")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "scores", s)


def friedman_test(matrix: PerformanceMatrix) -> tuple[float, float]:
    """Friedman chi-square with tie correction; p-value from chi2(k - 1)."""
    s = matrix.scores
    n, k = s.shape
    ranks = stats.rankdata(s, axis=1)
    rank_sums = ranks.sum(axis=0)
    ties = 0.0
    for row in s:
        _, counts = np.unique(row, return_counts=True)
        ties += float(np.sum(counts ** 3 - counts))
    denom = 1.0 - ties / (n * k * (k * k - 1))
    if denom <= 1e-12:
        return 0.0, 1.0
    chi2 = (12.0 / (n * k * (k + 1)) * float(np.sum(rank_sums ** 2)) - 3.0 * n * (k + 1)) / denom
    chi2 = max(chi2, 0.0)
    return chi2, float(stats.chi2.sf(chi2, k - 1))


@dataclass
class SelectionStep:
    methods: tuple
    statistic: float
    p_value: float
    rejected: bool

    def to_dict(self) -> dict:
        return {"methods": list(self.methods), "statistic": self.statistic,
                "p_value": self.p_value, "rejected": self.rejected}


@dataclass
class SelectionReport:
    K_star: int
    steps: list = field(default_factory=list)
    alpha: float = 0.05

    def to_dict(self) -> dict:
        return {"K_star": self.K_star, "alpha": self.alpha, "steps": [s.to_dict() for s in self.steps]}


def method_label(K: int) -> str:
    return "EM" if K == 1 else f"CLEM({K})"


def stepwise_select_k(candidates: Sequence[int], runner: Callable[[int, int], Sequence[float]], R: int,
                      alpha: float = 0.05) -> tuple[int, SelectionReport]:
    """Grow the comparison set {EM, CLEM(K_2), ...} until a Friedman test rejects.

    ``runner(K, R)`` returns per-replication scores of CLEM(K) on the same R
    datasets for every K. The first step compares EM with the next two
    candidates; each later step adds one. On the first rejection the
    largest K of the previous (accepted) step is returned; if no step
    rejects, the largest candidate.
    """
    cands = [int(k) for k in candidates]
    if not cands or cands[0] != 1 or any(b <= a for a, b in zip(cands, cands[1:])):
        raise ValueError(f"candidates must be strictly increasing and start at 1, got {cands}")
    if not 0 < alpha < 1:
        raise ValueError(f"significance level must lie in (0, 1), got {alpha}")
    report = SelectionReport(K_star=1, alpha=alpha)
    if len(cands) == 1:
        return 1, report

    columns: dict[int, np.ndarray] = {}

    def column(K: int) -> np.ndarray:
        if K not in columns:
            try:
                vals = np.asarray(runner(K, R), dtype=float)
            except Exception as exc:
                raise SelectionError(f"runner failed for {method_label(K)}: {exc}", report) from exc
            if vals.shape != (R,) or not np.all(np.isfinite(vals)):
                raise SelectionError(f"runner returned invalid scores for {method_label(K)}", report)
            columns[K] = vals
        return columns[K]

    accepted = 1
    size = min(3, len(cands))
    while size <= len(cands):
        ks = cands[:size]
        mat = PerformanceMatrix(tuple(method_label(k) for k in ks), np.column_stack([column(k) for k in ks]))
        stat, p = friedman_test(mat)
        rejected = p < alpha
        report.steps.append(SelectionStep(mat.methods, stat, p, rejected))
        if rejected:
            break
        accepted = ks[-1]
        size += 1
    report.K_star = accepted
    return accepted, report
