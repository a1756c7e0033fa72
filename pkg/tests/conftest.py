import numpy as np
import pytest
import scipy.sparse as sp

from gems.graph_core import LaplacianMatrix, WeightedGraph, build_rbf_graph, laplacian


def random_rbf_graph(n, seed, sigma=0.5, knn=None):
    coords = np.random.default_rng(seed).uniform(size=(n, 2))
    return coords, build_rbf_graph(coords, sigma, knn=knn)


def path_laplacian(n, weight=1.0):
    w = sp.diags([np.full(n - 1, weight), np.full(n - 1, weight)], [1, -1], shape=(n, n))
    return laplacian(WeightedGraph(w))


def random_orthogonal(n, rng):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def random_laplacian(n, rng, density=0.5):
    w = rng.uniform(size=(n, n)) * (rng.uniform(size=(n, n)) < density)
    w = np.triu(w, 1)
    w = w + w.T
    return LaplacianMatrix(sp.csr_matrix(np.diag(w.sum(1)) - w))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
