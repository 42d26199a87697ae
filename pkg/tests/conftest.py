"""Shared study data for the acceptance suite and its one-line-per-criterion summary."""
import pytest

from epreliab.experiments import (NUMERICAL_PARAMS, NUMERICAL_TOPOLOGY, fit_replications, simulate_replications,
                                  study_fit_config)
from epreliab.simulate import SimConfig

ACCEPTANCE_SEED = 1
ACCEPTANCE_R = 30

# criterion number -> (passed, detail); filled in by tests/test_acceptance.py
RESULTS: dict = {}
# every FitReport produced by the acceptance studies, audited for ascent and normalization
FIT_REPORTS: list = []


class StudyCache:
    """Simulated logs and fits of the numerical study, computed once per session."""

    def __init__(self):
        self._logs = {}
        self._fits = {}

    def logs(self, T: float):
        if T not in self._logs:
            cfg = SimConfig(NUMERICAL_TOPOLOGY, NUMERICAL_PARAMS, T, ACCEPTANCE_SEED)
            self._logs[T] = simulate_replications(cfg, ACCEPTANCE_R)
        return self._logs[T]

    def fits(self, T: float, K: int):
        if (T, K) not in self._fits:
            reports = fit_replications(self.logs(T), NUMERICAL_TOPOLOGY, study_fit_config(K))
            FIT_REPORTS.extend(reports)
            self._fits[(T, K)] = reports
        return self._fits[(T, K)]


@pytest.fixture(scope="session")
def study():
    return StudyCache()


@pytest.fixture
def record():
    def _record(criterion: int, passed: bool, detail: str):
        RESULTS[criterion] = (bool(passed), detail)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(RESULTS):
        passed, detail = RESULTS[c]
        terminalreporter.write_line(f"criterion {c:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
