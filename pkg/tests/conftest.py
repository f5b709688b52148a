import numpy as np
import pytest

from barriercert.nn import OptimizerConfig
from barriercert.trajectories import DatasetSpec, ExperimentConfig, TrajectorySample


def small_experiment(**overrides) -> ExperimentConfig:
    """Seconds-scale blobs instance used across unit tests."""
    kw = dict(dataset=DatasetSpec("blobs", 120, 80, 2, 2, 3.0), hidden=(8,),
              optimizer=OptimizerConfig("sgd", 0.1, 32), horizon=60,
              budget_grid=(0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0), alpha=0.05, clean_runs=3,
              master_seed=3)
    kw.update(overrides)
    return ExperimentConfig(**kw)


def fake_sample(index, delta, gap, d=2, g_c=1.0, diverged=False, alpha=0.1):
    rng = np.random.default_rng(index)
    theta = rng.normal(size=d)
    return TrajectorySample(index, index, "train", delta, theta, theta + 1, theta + 1.01,
                            theta + 0.01, g_c - gap, gap, gap <= alpha and not diverged, diverged)


@pytest.fixture
def experiment():
    return small_experiment()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    reports = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" in rep.nodeid and rep.when == "call":
                reports.append((rep.nodeid, outcome))
    if not reports:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for nodeid, outcome in sorted(reports):
        name = nodeid.split("::")[-1]
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
