import numpy as np
import pytest

from attnindex.vecstore import WorkloadSpec, generate_workload


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_workload():
    """One head, 4096 tokens: big enough for graph search to be non-trivial."""
    return generate_workload(WorkloadSpec(n_ctx=4096, n_decode=64, seed=3))[0]


@pytest.fixture(scope="session")
def gqa_workloads():
    return generate_workload(WorkloadSpec(n_ctx=2048, n_heads=4, n_kv_groups=2, n_decode=16, seed=5))


# Acceptance criteria record one line each here; the lines are echoed in
# the terminal summary so they show up even when output is captured.
CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA):
            terminalreporter.write_line(line)
