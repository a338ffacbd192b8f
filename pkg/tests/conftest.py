import numpy as np
import pytest

from sparsepair.numerics import l2_normalize

# criterion -> (passed, detail), filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {key}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_batch(rng, K, N, d):
    z = l2_normalize(rng.standard_normal((K * N, d)))
    return z, np.repeat(np.arange(K), N)
