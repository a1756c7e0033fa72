"""Laplacian learning from a trained dictionary and the adaptive outer loop.

The Laplacian is parametrized by the edge weights ``w_ij >= 0`` (``i < j``),
so symmetry, nonpositive off-diagonals and zero row sums hold by
construction.  The trace constraint becomes ``sum(w) = N / 2`` and the
feasible set is a scaled simplex; the quadratic objective is minimized by
accelerated projected gradient with exact simplex projection.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .dict_learning import (
    SparseDict,
    TrainConfig,
    TrainResult,
    gems_train,
    greedy_basis_codes,
    init_sparse_dict,
)
from .errors import InvalidInputError
from .graph_core import LaplacianMatrix
from .sparse_coding import CodeMatrix
from .wavelet import HaarBasis, haar_basis_from_laplacian

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LaplacianLearnConfig:
    alpha: float = 1.0  # smoothness weight of the graph-learning objective
    mu: float = 1.0
    solver_tol: float = 1e-9
    max_iters: int = 20000
    outer_rounds: int = 3
    inner_iters: int = 5  # partial training iterations per outer round

    def __post_init__(self):
        if not self.mu > 0:
            raise InvalidInputError("mu must be positive")
        if self.alpha < 0:
            raise InvalidInputError("alpha must be nonnegative")
        if self.outer_rounds < 0 or self.inner_iters < 0 or self.max_iters < 1:
            raise InvalidInputError("round and iteration counts must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LaplacianLearnConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown graph-learning options: {sorted(unknown)}")
        return cls(**d)


class LearnInfo(NamedTuple):
    iterations: int
    objective: float
    kkt_residual: float
    converged: bool


def project_simplex(v: np.ndarray, total: float) -> np.ndarray:
    """Euclidean projection onto ``{w >= 0, sum(w) = total}``."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    idx = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / idx > 0)[-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(v - tau, 0.0)


class _EdgeQP:
    """``c^T w + mu (||deg(w)||^2 + 2 ||w||^2)`` over the complete edge set."""

    def __init__(self, feats: np.ndarray, alpha: float, mu: float):
        n = feats.shape[0]
        self.n = n
        self.iu, self.ju = np.triu_indices(n, k=1)
        # squared distances between rows, ||f_i - f_j||^2
        sq = np.einsum("ij,ij->i", feats, feats)
        gram = feats @ feats.T
        dist = sq[self.iu] + sq[self.ju] - 2.0 * gram[self.iu, self.ju]
        self.c = alpha * np.maximum(dist, 0.0)
        self.mu = mu
        self.lip = 4.0 * mu * n

    def degrees(self, w):
        return np.bincount(self.iu, w, self.n) + np.bincount(self.ju, w, self.n)

    def value(self, w) -> float:
        deg = self.degrees(w)
        return float(self.c @ w + self.mu * (deg @ deg + 2.0 * (w @ w)))

    def grad(self, w) -> np.ndarray:
        deg = self.degrees(w)
        return self.c + self.mu * (2.0 * (deg[self.iu] + deg[self.ju]) + 4.0 * w)


def _kkt_residual(qp: _EdgeQP, w, total) -> float:
    g = qp.grad(w)
    step = project_simplex(w - g / qp.lip, total)
    return float(qp.lip * np.linalg.norm(w - step) / max(np.linalg.norm(g), 1e-300))


def _solve_edge_qp(qp: _EdgeQP, total: float, tol: float, max_iters: int):
    e = qp.iu.size
    w = np.full(e, total / e)  # complete-graph start, feasible
    z = w.copy()
    t = 1.0
    f_prev = qp.value(w)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        w_new = project_simplex(z - qp.grad(z) / qp.lip, total)
        f_new = qp.value(w_new)
        if f_new > f_prev:
            # adaptive restart of the momentum
            t = 1.0
            z = w
            w_new = project_simplex(w - qp.grad(w) / qp.lip, total)
            f_new = qp.value(w_new)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = w_new + ((t - 1.0) / t_new) * (w_new - w)
        step = np.linalg.norm(w_new - w)
        w, t, f_prev = w_new, t_new, f_new
        if step <= tol * max(np.linalg.norm(w), 1e-300):
            if _kkt_residual(qp, w, total) < 1e-6:
                converged = True
                break
    kkt = _kkt_residual(qp, w, total)
    return w, LearnInfo(it, f_prev, kkt, converged or kkt < 1e-6)


def _laplacian_from_weights(n, iu, ju, w) -> LaplacianMatrix:
    keep = w > 0
    iu, ju, w = iu[keep], ju[keep], w[keep]
    rows = np.concatenate([iu, ju])
    cols = np.concatenate([ju, iu])
    adj = sp.csr_matrix((np.concatenate([-w, -w]), (rows, cols)), shape=(n, n))
    deg = -np.asarray(adj.sum(axis=1)).ravel()
    return LaplacianMatrix((adj + sp.diags(deg)).tocsr())


def learn_from_rows(feats, alpha: float, mu: float, tol: float = 1e-9, max_iters: int = 20000, return_info: bool = False):
    """Laplacian over the rows of ``feats`` minimizing ``alpha Tr(F^T L F) + mu ||L||_F^2``.

    Constraints: symmetric, off-diagonals ``<= 0``, zero row sums and
    ``Tr(L) = N``.
    """
    feats = np.asarray(feats, dtype=float)
    if feats.ndim != 2:
        raise InvalidInputError("feature matrix must be 2-D")
    if not mu > 0:
        raise InvalidInputError("mu must be positive")
    if alpha < 0:
        raise InvalidInputError("alpha must be nonnegative")
    n = feats.shape[0]
    if n < 2:
        raise InvalidInputError("need at least 2 nodes")
    if n == 2:
        lap = LaplacianMatrix(sp.csr_matrix(np.array([[1.0, -1.0], [-1.0, 1.0]])))
        info = LearnInfo(0, float(alpha * np.sum((feats[0] - feats[1]) ** 2) + 4 * mu), 0.0, True)
        return (lap, info) if return_info else lap
    qp = _EdgeQP(feats, alpha, mu)
    total = n / 2.0
    if alpha == 0 or not np.any(qp.c):
        w = np.full(qp.iu.size, total / qp.iu.size)
        info = LearnInfo(0, qp.value(w), 0.0, True)
    else:
        w, info = _solve_edge_qp(qp, total, tol, max_iters)
        if not info.converged:
            warnings.warn(
                f"graph learning stopped after {info.iterations} iterations "
                f"(KKT residual {info.kkt_residual:.2e})",
                RuntimeWarning,
                stacklevel=2,
            )
    lap = _laplacian_from_weights(n, qp.iu, qp.ju, w)
    return (lap, info) if return_info else lap


def learn_laplacian(phi, a, alpha: float, mu: float, tol: float = 1e-9, max_iters: int = 20000, return_info: bool = False):
    """Feature Laplacian for which the effective atoms ``Phi A`` are smooth.

    Minimizes ``alpha Tr(A^T Phi^T L Phi A) + mu ||L||_F^2`` over valid
    combinatorial Laplacians with trace ``N``.  Returns the best iterate with
    a warning if the solver does not converge; ``return_info`` adds a
    :class:`LearnInfo` with the KKT residual.
    """
    if isinstance(a, SparseDict):
        d = a.effective()
    else:
        phi_m = phi.matrix if isinstance(phi, HaarBasis) else np.asarray(phi, dtype=float)
        a = a.toarray() if sp.issparse(a) else np.asarray(a, dtype=float)
        d = phi_m @ a
    return learn_from_rows(d, alpha, mu, tol, max_iters, return_info)


def learn_manifold_laplacian(x, beta: float, mu: float, **kw):
    """Manifold Laplacian minimizing ``beta Tr(X L_c X^T) + mu ||L_c||_F^2``."""
    x = x.toarray() if isinstance(x, CodeMatrix) else (x.toarray() if sp.issparse(x) else np.asarray(x))
    return learn_from_rows(np.asarray(x, dtype=float).T, beta, mu, **kw)


def laplacian_objective(l, phi, a, alpha: float, mu: float) -> float:
    lm = l.toarray() if isinstance(l, LaplacianMatrix) else np.asarray(l, dtype=float)
    d = a.effective() if isinstance(a, SparseDict) else (phi.matrix if isinstance(phi, HaarBasis) else phi) @ a
    return float(alpha * np.sum(d * (lm @ d)) + mu * np.sum(lm * lm))


class AdaptiveResult(NamedTuple):
    laplacian: LaplacianMatrix
    basis: HaarBasis
    dictionary: SparseDict
    codes: CodeMatrix
    rounds: list  # per-round (round, training objective, graph-learning info)
    trace: list  # trace of the final training run


def adaptive_train(
    y,
    initial_l: LaplacianMatrix,
    cfg: TrainConfig,
    lcfg: LaplacianLearnConfig,
    l_c=None,
    a0: SparseDict | None = None,
    phi0: HaarBasis | None = None,
) -> AdaptiveResult:
    """Alternate partial training, graph learning and basis rebuilding.

    Each of ``lcfg.outer_rounds`` rounds runs ``lcfg.inner_iters`` training
    iterations, learns a new Laplacian from the effective atoms, rebuilds the
    graph-Haar basis from it and re-expresses every atom as a ``P``-sparse
    combination of the new basis.  A final training run to convergence
    follows.  With ``outer_rounds = 0`` this is plain :func:`gems_train`.
    The feature Laplacian used for the smoothness term of training is the
    current one (initial, then learned).
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if initial_l.n_nodes != n:
        raise InvalidInputError(f"Laplacian has {initial_l.n_nodes} nodes, signals have {n} rows")
    k = cfg.n_atoms or 2 * n
    lap = initial_l
    phi = phi0 if phi0 is not None else haar_basis_from_laplacian(lap)
    a = a0 if a0 is not None else init_sparse_dict(y, phi, k, cfg.p_sparsity, cfg.seed)
    feature_l = lap if cfg.alpha else None
    manifold = l_c if cfg.beta else None
    rounds = []
    for r in range(1, lcfg.outer_rounds + 1):
        part: TrainResult = gems_train(
            y, phi, a, feature_l, manifold, dataclasses.replace(cfg, iterations=lcfg.inner_iters), trace_atoms=False
        )
        lap, info = learn_laplacian(
            phi, part.dictionary, lcfg.alpha, lcfg.mu, lcfg.solver_tol, lcfg.max_iters, return_info=True
        )
        phi = haar_basis_from_laplacian(lap, allow_disconnected=True)
        err = phi.orthogonality_error()
        if err > 1e-10:
            raise InvalidInputError(f"rebuilt basis lost orthogonality ({err:.2e})")
        d_old = part.dictionary.effective()
        a = SparseDict(sp.csc_matrix(greedy_basis_codes(phi, d_old, cfg.p_sparsity)), phi, cfg.p_sparsity)
        feature_l = lap if cfg.alpha else None
        rounds.append((r, part.trace[-1][2], info))
        log.info("round %d: training objective %.6g, graph KKT %.2e", r, part.trace[-1][2], info.kkt_residual)
    final = gems_train(y, phi, a, feature_l, manifold, cfg, trace_atoms=False)
    return AdaptiveResult(lap, phi, final.dictionary, final.codes, rounds, final.trace)
