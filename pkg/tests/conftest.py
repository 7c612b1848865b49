import numpy as np
import pytest

from spgm.fo_core import FirstOrderTriple
from spgm.problems import make_rng, quadratic_1d


class PSDQuadratic:
    """``x'Hx/2`` with a random PSD ``H``; minimizer 0, minimum 0."""

    def __init__(self, d, seed, rank=None):
        rng = make_rng(seed)
        B = rng.standard_normal((d, rank or d))
        self.H = B @ B.T
        self.L = float(np.linalg.eigvalsh(self.H)[-1])
        self.d = d
        self.x0 = rng.standard_normal(d)
        self.x_star = np.zeros(d)
        self.f_star = 0.0

    def evaluate(self, x):
        g = self.H @ x
        return 0.5 * float(x @ g), g

    def triple(self, x):
        f, g = self.evaluate(x)
        return FirstOrderTriple(x, f, g)


@pytest.fixture
def quad():
    """``x^2 / 2`` with ``L = 1`` started at 1."""
    return quadratic_1d(curvature=1.0, L=1.0, x0=1.0)


@pytest.fixture
def psd_quadratic():
    return PSDQuadratic
