import numpy as np
import pytest

from rfmem.constants import compute_constants
from rfmem.features import SpectralMeasure, build_gram_gep, sample_gaussian_data, sample_weights


class ReferenceSetup:
    """d=100, psi_p=64, psi_n=8, t=0.01, isotropic data: one GEP realization."""

    d, psi_p, psi_n, t = 100, 64, 8, 0.01

    def __init__(self):
        self.p, self.n = self.psi_p * self.d, self.psi_n * self.d
        self.measure = SpectralMeasure.isotropic(1.0)
        self.constants = compute_constants("tanh", 1.0, self.t)
        self.W = sample_weights(self.p, self.d, 11)
        self.data = sample_gaussian_data(self.d, self.n, self.measure, 12)
        self.gram = build_gram_gep(self.W, self.data, self.constants, seed=13)
        self._ev = None

    @property
    def eigenvalues(self):
        if self._ev is None:
            self._ev = np.linalg.eigvalsh(self.gram.U)
        return self._ev


@pytest.fixture(scope="session")
def ref():
    return ReferenceSetup()


_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record ``(criterion, passed, detail)``; the lines are printed at the end of the run."""

    def record(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
