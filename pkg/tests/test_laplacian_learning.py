import warnings

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import random_orthogonal, random_rbf_graph
from gems.data import gen_smooth_signals
from gems.dict_learning import TrainConfig, gems_train, init_sparse_dict
from gems.errors import InvalidInputError
from gems.graph_core import LaplacianMatrix, laplacian
from gems.laplacian_learning import (
    LaplacianLearnConfig,
    adaptive_train,
    laplacian_objective,
    learn_from_rows,
    learn_laplacian,
    learn_manifold_laplacian,
    project_simplex,
)
from gems.wavelet import haar_basis_from_laplacian


def check_constraints(lm, n):
    assert np.abs(lm - lm.T).max() < 1e-12
    assert np.abs(lm.sum(axis=1)).max() < 1e-8
    assert abs(np.trace(lm) - n) < 1e-8
    off = lm - np.diag(np.diag(lm))
    assert off.max() <= 1e-10


def cvxpy_oracle(feats, alpha, mu):
    cp = pytest.importorskip("cvxpy")
    n = feats.shape[0]
    # symmetry as an explicit constraint: symmetric=True variables gave wrong
    # optima with the conic solvers in this cvxpy build
    lv = cp.Variable((n, n))
    mask = np.ones((n, n)) - np.eye(n)
    cons = [lv == lv.T, cp.multiply(mask, lv) <= 0, lv @ np.ones(n) == 0, cp.trace(lv) == n]
    obj = alpha * cp.sum(cp.multiply(feats @ feats.T, lv)) + mu * cp.sum_squares(lv)
    cp.Problem(cp.Minimize(obj), cons).solve(solver=cp.CLARABEL)
    return lv.value


def test_project_simplex(rng):
    for _ in range(20):
        v = rng.standard_normal(12) * 3
        w = project_simplex(v, 2.5)
        assert w.min() >= 0 and w.sum() == pytest.approx(2.5)
        # optimality: v - w is constant on the support and no larger off it
        d = v - w
        s = w > 0
        assert np.ptp(d[s]) < 1e-12
        assert np.all(d[~s] <= d[s][0] + 1e-12)


@pytest.mark.parametrize("n", [3, 5, 6])
def test_alpha_zero_is_complete_graph(rng, n):
    feats = rng.standard_normal((n, 4))
    lm = learn_from_rows(feats, 0.0, 1.0).toarray()
    ref = np.full((n, n), -1.0 / (n - 1)) + np.eye(n) * (1 + 1.0 / (n - 1))
    np.testing.assert_allclose(lm, ref, atol=1e-12)
    np.testing.assert_allclose(cvxpy_oracle(feats, 0.0, 1.0), ref, atol=1e-6)


@pytest.mark.parametrize("n,alpha,mu", [(4, 1.0, 1.0), (6, 0.5, 0.2), (6, 3.0, 1.0)])
def test_matches_generic_qp(rng, n, alpha, mu):
    feats = rng.standard_normal((n, 5))
    lm, info = learn_from_rows(feats, alpha, mu, return_info=True)
    lm = lm.toarray()
    check_constraints(lm, n)
    assert info.converged and info.kkt_residual < 1e-6
    ref = cvxpy_oracle(feats, alpha, mu)
    np.testing.assert_allclose(lm, ref, atol=1e-5)
    f = lambda x: alpha * np.trace(feats.T @ x @ feats) + mu * np.sum(x * x)  # noqa: E731
    assert f(lm) <= f(ref) + 1e-7
    assert info.objective == pytest.approx(f(lm), rel=1e-9)


def test_two_points_is_fixed():
    lm, info = learn_from_rows(np.array([[0.0, 1.0], [3.0, 1.0]]), 2.0, 0.5, return_info=True)
    np.testing.assert_array_equal(lm.toarray(), [[1.0, -1.0], [-1.0, 1.0]])
    assert info.objective == pytest.approx(2.0 * 9.0 + 0.5 * 4.0)


def test_two_clusters_cut_is_suppressed(rng):
    n = 12
    cl = np.repeat([0, 1], n // 2)
    phi = random_orthogonal(n, rng)
    # effective atoms constant on each cluster
    d = np.stack([np.where(cl == 0, *rng.standard_normal(2)) for _ in range(10)], axis=1)
    a = phi.T @ d
    lm = learn_laplacian(phi, a, 1.0, 0.05).toarray()
    check_constraints(lm, n)
    same = cl[:, None] == cl[None, :]
    off = ~np.eye(n, dtype=bool)
    within = -lm[same & off].mean()
    across = -lm[~same].mean()
    assert within > 10 * max(across, 1e-300)


def test_objective_not_worse_than_complete_graph(rng):
    for s in range(5):
        n = 20
        phi = random_orthogonal(n, np.random.default_rng(s))
        a = rng.standard_normal((n, 30))
        lm = learn_laplacian(phi, a, 1.0, 1.0)
        complete = np.eye(n) * (1 + 1 / (n - 1)) - 1 / (n - 1)
        assert laplacian_objective(lm, phi, a, 1.0, 1.0) <= laplacian_objective(complete, phi, a, 1.0, 1.0) + 1e-12
        check_constraints(lm.toarray(), n)


def test_manifold_variant_learns_over_columns(rng):
    x = rng.standard_normal((5, 9))
    lc = learn_manifold_laplacian(x, 1.0, 1.0)
    assert lc.n_nodes == 9
    np.testing.assert_allclose(lc.toarray(), learn_from_rows(x.T, 1.0, 1.0).toarray())


def test_nonconvergence_warns(rng):
    with pytest.warns(RuntimeWarning, match="graph learning"):
        learn_from_rows(rng.standard_normal((30, 4)), 1.0, 1.0, max_iters=2)


def test_invalid_inputs():
    with pytest.raises(InvalidInputError):
        learn_from_rows(np.ones((3, 2)), 1.0, 0.0)
    with pytest.raises(InvalidInputError):
        learn_from_rows(np.ones((1, 2)), 1.0, 1.0)
    with pytest.raises(InvalidInputError):
        LaplacianLearnConfig(mu=-1)
    with pytest.raises(InvalidInputError):
        LaplacianLearnConfig.from_dict({"rounds": 2})
    cfg = LaplacianLearnConfig(alpha=0.3)
    assert LaplacianLearnConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- adaptive loop


def _corrupt(l, rng, frac=0.3):
    """Rewire a fraction of the edges, keeping the weight multiset."""
    adj = -l.toarray()
    np.fill_diagonal(adj, 0)
    n = adj.shape[0]
    iu, ju = np.triu_indices(n, 1)
    w = adj[iu, ju].copy()
    on, off = np.flatnonzero(w > 0), np.flatnonzero(w == 0)
    k = int(frac * on.size)
    drop = rng.choice(on, k, replace=False)
    add = rng.choice(off, k, replace=False)
    w[add] = rng.permutation(w[drop])
    w[drop] = 0
    b = np.zeros((n, n))
    b[iu, ju] = w
    b = b + b.T
    return LaplacianMatrix(sp.csr_matrix(np.diag(b.sum(1)) - b))


def _trace_normalized(l):
    lm = l.toarray() if hasattr(l, "toarray") else np.asarray(l)
    return lm * lm.shape[0] / np.trace(lm)


def test_adaptive_zero_rounds_is_plain_training():
    coords, g = random_rbf_graph(16, 5, knn=4)
    lap = laplacian(g)
    basis = haar_basis_from_laplacian(lap)
    y = gen_smooth_signals(lap, 80, 5.0, 1).matrix
    cfg = TrainConfig(t_sparsity=3, p_sparsity=3, alpha=0.1, beta=0.0, iterations=4, seed=2)
    a0 = init_sparse_dict(y, basis, 32, 3, 2)
    ref = gems_train(y, basis, a0, lap, None, cfg, trace_atoms=False)
    out = adaptive_train(y, lap, cfg, LaplacianLearnConfig(outer_rounds=0), a0=a0, phi0=basis)
    assert out.trace == ref.trace
    assert (out.dictionary.matrix != ref.dictionary.matrix).nnz == 0
    assert out.laplacian is lap


def test_adaptive_rounds_keep_invariants():
    coords, g = random_rbf_graph(16, 6, knn=4)
    lap = laplacian(g)
    y = gen_smooth_signals(lap, 200, 5.0, 2).matrix
    cfg = TrainConfig(t_sparsity=3, p_sparsity=3, alpha=0.0, beta=0.0, iterations=3, seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out = adaptive_train(y, lap, cfg, LaplacianLearnConfig(outer_rounds=2, inner_iters=2))
    assert len(out.rounds) == 2
    check_constraints(out.laplacian.toarray(), 16)
    assert out.basis.orthogonality_error() < 1e-10
    assert out.dictionary.atom_norm_error() < 1e-8
    assert np.diff(out.dictionary.matrix.indptr).max() <= 3


def test_adaptive_recovers_planted_graph():
    wins = 0
    trials = 50
    for s in range(trials):
        rng = np.random.default_rng(s)
        _, g = random_rbf_graph(16, s, knn=4)
        hidden = laplacian(g)
        y = gen_smooth_signals(hidden, 640, 10.0, s).matrix
        start = _corrupt(hidden, rng)
        cfg = TrainConfig(t_sparsity=4, p_sparsity=4, alpha=0.0, beta=0.0, iterations=5, seed=s)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out = adaptive_train(y, start, cfg, LaplacianLearnConfig(outer_rounds=3))
        ref = _trace_normalized(hidden)
        wins += np.linalg.norm(_trace_normalized(out.laplacian) - ref) < np.linalg.norm(_trace_normalized(start) - ref)
    assert wins >= 0.8 * trials
