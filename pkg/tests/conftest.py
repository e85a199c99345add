import numpy as np
import pytest

from lesion_gnn.cohort import CohortSpec, generate_cohort
from lesion_gnn.graph import REGIONS, GraphConfig, Lesion, LesionGraph


def random_lesions(rng, n, feature_dim=8):
    pos = rng.uniform(0.0, 1.0, size=(n, 3))
    feats = rng.normal(size=(n, feature_dim))
    return [Lesion(pos[i], feats[i], REGIONS[int(rng.integers(len(REGIONS)))]) for i in range(n)]


def random_graph(rng, n=None, feature_dim=8, k=5, tau=0.3, label=None):
    """Small graph; tau larger than the default so edge weights are not all negligible."""
    n = int(rng.integers(3, 16)) if n is None else n
    label = int(rng.integers(2)) if label is None else label
    return LesionGraph.build(random_lesions(rng, n, feature_dim), label, GraphConfig(k=k, tau=tau),
                             patient_id=f"g{rng.integers(10**9)}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(CohortSpec(n_patients=60, seed=3))


# (criterion number, passed, detail), filled by test_acceptance.py
ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
