import math

import numpy as np
import pytest

import oracles
from clustcox import TrialData

BETA_D1 = -0.5 * math.log(2)

D1_CSV = """cluster,time,event,z1
a,1,1,1
b,2,1,0
a,3,0,1
"""


def d1() -> TrialData:
    # clusters {s1, s3 | s2}
    return TrialData.from_arrays([1.0, 2.0, 3.0], [1, 1, 0], [[1.0], [0.0], [1.0]], ["a", "b", "a"])


def random_trial(rng, identifiable=True, **kw) -> TrialData:
    """Random small trial; by default redrawn until the MLE is finite."""
    while True:
        recs = oracles.random_records(rng, **kw)
        if not identifiable or oracles.has_finite_mle(recs):
            t, e, z, c = oracles.to_arrays(recs)
            return TrialData.from_arrays(t, e, z, c)


@pytest.fixture
def d1_data() -> TrialData:
    return d1()


@pytest.fixture
def d1_csv(tmp_path):
    path = tmp_path / "d1.csv"
    path.write_text(D1_CSV)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
