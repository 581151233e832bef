import numpy as np
import pytest

from nstr.linalg import SparseSpdMatrix


def random_spd(rng: np.random.Generator, n: int, cond: float = 50.0) -> np.ndarray:
    """Dense SPD matrix with eigenvalues spread over [1, cond]."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.exp(rng.uniform(0.0, np.log(cond), n))
    A = (Q * lam) @ Q.T
    return 0.5 * (A + A.T)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def spd_factory(rng):
    def make(n, cond=50.0):
        return SparseSpdMatrix.from_dense(random_spd(rng, n, cond))

    return make


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
