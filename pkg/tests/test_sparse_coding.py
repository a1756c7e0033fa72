import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_laplacian
from gems.errors import InvalidInputError
from gems.sparse_coding import (
    CodeMatrix,
    coding_objective,
    grsc,
    manifold_laplacian,
    omp,
    omp_batch,
    read_codes,
    refit_on_supports,
    write_codes,
)


def unit_dict(n, k, rng):
    d = rng.standard_normal((n, k))
    return d / np.linalg.norm(d, axis=0)


def ls_residual(d, y, s):
    s = list(s)
    c, *_ = np.linalg.lstsq(d[:, s], y, rcond=None)
    return np.linalg.norm(y - d[:, s] @ c)


def test_omp_exact_atom(rng):
    d = unit_dict(10, 20, rng)
    for t in (1, 3, 5):
        x = omp(d, d[:, 7], t)
        assert np.flatnonzero(x).tolist() == [7]
        assert x[7] == pytest.approx(1.0, abs=1e-12)
        assert np.linalg.norm(d @ x - d[:, 7]) < 1e-12


def test_omp_orthogonal_signal_gives_zero_code():
    d = np.eye(4)[:, :2]
    y = np.array([0.0, 0.0, 1.0, 2.0])
    x = omp(d, y, 2)
    assert not np.any(x)
    assert np.array_equal(y - d @ x, y)


def test_omp_residual_orthogonal_to_support(rng):
    d = unit_dict(12, 30, rng)
    y = rng.standard_normal(12)
    x = omp(d, y, 5)
    s = np.flatnonzero(x)
    assert s.size == 5
    assert np.abs(d[:, s].T @ (y - d @ x)).max() < 1e-10


def test_omp_against_exhaustive_support_search():
    # the oracle measures the greedy gap; plain OMP is not expected to find
    # the best pair every time (about two thirds of trials at this size)
    hits = 0
    gaps = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d = unit_dict(6, 8, rng)
        y = rng.standard_normal(6)
        x = omp(d, y, 2)
        best = min(itertools.combinations(range(8), 2), key=lambda s: ls_residual(d, y, s))
        r_omp = np.linalg.norm(y - d @ x)
        r_best = ls_residual(d, y, best)
        assert r_best <= r_omp + 1e-12  # the oracle can only be better
        hits += set(np.flatnonzero(x)) == set(best)
        gaps.append(r_omp - r_best)
    assert hits >= 50
    assert min(gaps) >= -1e-12


def test_omp_clamps_sparsity(rng):
    d = unit_dict(4, 6, rng)
    with pytest.warns(UserWarning):
        x = omp(d, rng.standard_normal(4), 9)
    assert np.count_nonzero(x) <= 4


def test_omp_rejects_unnormalized_dictionary(rng):
    with pytest.raises(InvalidInputError):
        omp(2 * unit_dict(4, 6, rng), rng.standard_normal(4), 2)


def test_omp_batch_bitwise_equals_single(rng):
    d = unit_dict(30, 60, rng)
    y = rng.standard_normal((30, 50))
    codes = omp_batch(d, y, 6).toarray()
    for i in range(50):
        assert np.array_equal(codes[:, i], omp(d, y[:, i], 6))


def test_grsc_beta_zero_is_omp(rng):
    d = unit_dict(16, 32, rng)
    y = rng.standard_normal((16, 40))
    lc = manifold_laplacian(y, 5)
    a = grsc(d, y, lc, 0.0, 4)
    b = omp_batch(d, y, 4)
    assert (a.matrix != b.matrix).nnz == 0


def test_grsc_single_signal_is_omp(rng):
    d = unit_dict(8, 12, rng)
    y = rng.standard_normal((8, 1))
    a = grsc(d, y, np.zeros((1, 1)), 0.7, 3)
    assert np.array_equal(a.toarray()[:, 0], omp(d, y[:, 0], 3))


def exhaustive_grsc(d, y, lc, beta):
    k, m = d.shape[1], y.shape[1]
    best = np.inf
    for combo in itertools.product(range(k), repeat=m):
        codes = refit_on_supports(d, y, lc, beta, [[c] for c in combo], 1)
        best = min(best, coding_objective(d, y, codes, lc, beta))
    return best


def test_grsc_against_exhaustive_enumeration():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        d = unit_dict(5, 6, rng)
        y = rng.standard_normal((5, 3))
        lc = random_laplacian(3, rng, density=1.0)
        beta = 0.5
        ours = coding_objective(d, y, grsc(d, y, lc, beta, 1), lc, beta)
        base = omp_batch(d, y, 1)
        base_obj = coding_objective(d, y, base, lc, beta)
        oracle = exhaustive_grsc(d, y, lc, beta)
        assert ours <= base_obj + 1e-12
        assert oracle <= ours + 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 2.0))
def test_grsc_never_loses_to_omp_supports(seed, beta):
    rng = np.random.default_rng(seed)
    d = unit_dict(10, 20, rng)
    y = rng.standard_normal((10, 25))
    lc = manifold_laplacian(y, 4)
    codes = grsc(d, y, lc, beta, 3)
    assert np.diff(codes.matrix.indptr).max() <= 3
    baseline = refit_on_supports(d, y, lc, beta, omp_batch(d, y, 3).supports(), 3)
    assert coding_objective(d, y, codes, lc, beta) <= coding_objective(d, y, baseline, lc, beta) * (1 + 1e-12)
    hist = [v for _, v in codes.history]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:]))


def test_refit_beta_zero_is_least_squares(rng):
    d = unit_dict(8, 15, rng)
    y = rng.standard_normal((8, 4))
    sup = [[0, 3], [5], [], [1, 2, 14]]
    codes = refit_on_supports(d, y, None, 0.0, sup)
    x = codes.toarray()
    for i, s in enumerate(sup):
        if s:
            c, *_ = np.linalg.lstsq(d[:, s], y[:, i], rcond=None)
            np.testing.assert_allclose(x[s, i], c, rtol=1e-10)


def test_refit_empty_supports(rng):
    d = unit_dict(5, 7, rng)
    y = rng.standard_normal((5, 3))
    lc = random_laplacian(3, rng, 1.0)
    codes = refit_on_supports(d, y, lc, 0.4, [[], [], []], 2)
    assert codes.matrix.nnz == 0
    assert coding_objective(d, y, codes, lc, 0.4) == pytest.approx(np.sum(y**2))


def test_refit_is_stationary(rng):
    d = unit_dict(7, 10, rng)
    y = rng.standard_normal((7, 6))
    lc = random_laplacian(6, rng, 0.7)
    beta = 0.8
    sup = [rng.choice(10, size=3, replace=False) for _ in range(6)]
    codes = refit_on_supports(d, y, lc, beta, sup, 3)
    x = codes.toarray()
    # analytic gradient on the supports
    grad = -2 * d.T @ (y - d @ x) + 2 * beta * x @ lc.toarray()
    mask = x != 0
    assert np.linalg.norm(grad[mask]) < 1e-8
    # finite differences agree
    h = 1e-6
    for (a, i) in list(zip(*np.nonzero(mask)))[:6]:
        xp, xm = x.copy(), x.copy()
        xp[a, i] += h
        xm[a, i] -= h
        fd = (coding_objective(d, y, xp, lc, beta) - coding_objective(d, y, xm, lc, beta)) / (2 * h)
        assert abs(fd) < 1e-6 * max(1.0, np.sum(y**2))


def test_refit_singular_system_uses_ridge(rng):
    d = unit_dict(4, 3, rng)
    d = np.column_stack([d[:, 0], d[:, 0], d[:, 1]])
    y = rng.standard_normal((4, 1))
    codes = refit_on_supports(d, y, None, 0.0, [[0, 1]])
    assert any(n.startswith("ridge") for n in codes.notes)
    assert np.all(np.isfinite(codes.toarray()))


def test_code_matrix_bound():
    with pytest.raises(InvalidInputError):
        CodeMatrix(np.ones((3, 2)), 2)


def test_manifold_laplacian_valid(rng):
    y = rng.standard_normal((6, 40))
    lc = manifold_laplacian(y, 5).toarray()
    assert np.abs(lc.sum(1)).max() < 1e-12
    np.testing.assert_allclose(lc, lc.T)
    assert np.count_nonzero(lc - np.diag(np.diag(lc)), axis=1).min() >= 5


def test_codes_roundtrip(tmp_path, rng):
    d = unit_dict(6, 9, rng)
    codes = omp_batch(d, rng.standard_normal((6, 5)), 3)
    write_codes(tmp_path / "codes.txt", codes)
    assert (tmp_path / "codes.txt").read_text().startswith("# K=9 M=5 T=3")
    back = read_codes(tmp_path / "codes.txt")
    assert (back.matrix != codes.matrix).nnz == 0 and back.t == 3
