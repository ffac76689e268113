import numpy as np
import pytest

from tvcs.analysis import gradient_matrix
from tvcs.problems import make_problem
from tvcs.spectral import to_vector


def measurement_rows(mask):
    """Real constraint rows (Re and Im of the observed DFT rows) in the flat ordering."""
    dims = mask.observed.shape
    N = int(np.prod(dims))
    F = np.empty((N, N), complex)
    for j in range(N):
        e = np.zeros(N)
        e[j] = 1
        F[:, j] = to_vector(np.fft.fftn(e.reshape(dims, order="F"), norm="ortho"))
    rows = F[mask.indices]
    b = mask.values
    return np.vstack([rows.real, rows.imag]), np.concatenate([b.real, b.imag])


def brute_project(q, mask):
    """Projection of the field ``q`` onto {K u : A u = b} via the dense KKT system."""
    dims = mask.observed.shape
    G = gradient_matrix(dims)
    A, b = measurement_rows(mask)
    n = G.shape[1]
    kkt = np.block([[G.T @ G, A.T], [A, np.zeros((A.shape[0], A.shape[0]))]])
    rhs = np.concatenate([G.T @ to_vector(q, field=True), b])
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:n]


def random_problem(shape, fraction=0.3, seed=0):
    rng = np.random.default_rng(seed)
    return make_problem(rng.standard_normal(shape), fraction, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
