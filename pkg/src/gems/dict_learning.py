"""Double-sparse dictionary training over a graph-Haar base dictionary.

The effective dictionary is ``D = Phi A`` with a fixed orthogonal base
``Phi`` and a column-sparse ``A``.  ``gems_train`` alternates graph
regularized sparse coding of the signals with one-atom-at-a-time updates of
``A`` and of the matching row of the code matrix.  ``ksvd_train`` is the
unstructured baseline.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import cho_solve

from .errors import GemsError, InvalidInputError, NumericalError
from .graph_core import LaplacianMatrix
from .sparse_coding import COHERENCE_THRESHOLD, CodeMatrix, grsc, omp_batch
from .wavelet import HaarBasis

log = logging.getLogger(__name__)

DEAD_ATOM_NORM = 1e-12
ADMM_TOL = 1e-8
DENSE_COEFF_MAX = 400


class DeadAtomError(GemsError):
    """The effective atom vanished during normalization."""


@dataclass(frozen=True)
class TrainConfig:
    t_sparsity: int = 12
    p_sparsity: int = 12
    alpha: float = 0.1
    beta: float = 0.01
    iterations: int = 50
    atom_solver: str = "greedy"
    admm_rho: float = 1.0
    admm_iters: int = 50
    seed: int = 0
    n_atoms: int | None = None  # defaults to 2N
    tol: float = 1e-4  # relative objective change that counts as converged
    grsc_outer: int = 10
    manifold_knn: int = 10

    def __post_init__(self):
        if self.t_sparsity < 1 or self.p_sparsity < 1:
            raise InvalidInputError("sparsity levels T and P must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise InvalidInputError("alpha and beta must be nonnegative")
        if self.atom_solver not in ("greedy", "admm"):
            raise InvalidInputError(f"atom_solver must be 'greedy' or 'admm', got {self.atom_solver!r}")
        if self.admm_rho <= 0:
            raise InvalidInputError("admm_rho must be positive")
        if self.iterations < 0:
            raise InvalidInputError("iterations must be nonnegative")
        if self.alpha > 1:
            warnings.warn(
                "alpha > 1: normalizing the atom after the unconstrained solve is a poor "
                "approximation for strong smoothness weights",
                stacklevel=2,
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise InvalidInputError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


def _phi_matrix(phi) -> np.ndarray:
    return phi.matrix if isinstance(phi, HaarBasis) else np.asarray(phi, dtype=float)


def _phi_operator(phi):
    """Sparse form of the basis when it pays off (graph-Haar bases are sparse)."""
    if isinstance(phi, HaarBasis):
        return phi.sparse
    m = np.asarray(phi, dtype=float)
    if np.count_nonzero(m) < 0.25 * m.size:
        return sp.csc_matrix(m)
    return m


@dataclass(frozen=True)
class SparseDict:
    """Column-sparse ``A`` paired with its base dictionary ``Phi``."""

    matrix: sp.csc_matrix
    phi: object = field(repr=False)
    p: int = 0

    def __post_init__(self):
        a = sp.csc_matrix(self.matrix, dtype=float, copy=True)
        a.eliminate_zeros()
        a.sort_indices()
        p = self.p or int(np.diff(a.indptr).max(initial=0))
        counts = np.diff(a.indptr)
        if counts.size and counts.max() > p:
            raise InvalidInputError(f"an atom has {counts.max()} nonzeros, bound is {p}")
        object.__setattr__(self, "matrix", a)
        object.__setattr__(self, "p", p)

    @property
    def n_atoms(self) -> int:
        return self.matrix.shape[1]

    def effective(self) -> np.ndarray:
        """Dense effective dictionary ``Phi A``."""
        return np.asarray(_phi_operator(self.phi) @ self.matrix.toarray())

    def atom_norm_error(self) -> float:
        norms = np.linalg.norm(self.effective(), axis=0)
        return float(np.abs(norms - 1.0).max()) if norms.size else 0.0


@dataclass
class AtomUpdateWorkspace:
    """Restricted quantities for one atom update.

    ``error`` holds ``E_j`` limited to the signals that use the atom and
    ``g`` the matching (unit-norm) coefficient row.  ``m_mat`` is
    ``Phi^T L Phi``.  ``cache`` is shared between atoms of one sweep and holds
    factorizations that depend only on ``m_mat``, ``alpha`` and ``rho``.
    """

    error: np.ndarray
    g: np.ndarray
    phi: object
    m_mat: np.ndarray | None = None
    lc_r: sp.spmatrix | np.ndarray | None = None
    alpha: float = 0.0
    beta: float = 0.0
    rho: float = 1.0
    admm_iters: int = 50
    cache: dict = field(default_factory=dict)

    def target(self) -> np.ndarray:
        """``Psi = Phi^T E g``."""
        psi = self.__dict__.get("_psi")
        if psi is None:
            psi = np.asarray(_phi_operator(self.phi).T @ (self.error @ self.g)).ravel()
            self._psi = psi
        return psi


def _atom_objective_reduced(psi, a, m_mat, alpha) -> float:
    """Atom objective minus the constant ``||E g||^2`` (orthogonal base)."""
    val = float(a @ a - 2.0 * (a @ psi))
    if alpha and m_mat is not None:
        val += alpha * float(a @ (m_mat @ a))
    return val


def atom_objective(ws: AtomUpdateWorkspace, a) -> float:
    """``||E g - Phi a||^2 + alpha a^T M a`` for the workspace's ``E`` and ``g``."""
    a = np.asarray(a, dtype=float)
    r = ws.error @ ws.g - np.asarray(_phi_operator(ws.phi) @ a).ravel()
    val = float(r @ r)
    if ws.alpha and ws.m_mat is not None:
        val += ws.alpha * float(a @ (ws.m_mat @ a))
    return val


def atom_update_greedy(ws: AtomUpdateWorkspace, p: int) -> np.ndarray:
    """OMP-like pursuit for a ``p``-sparse atom with a smoothness penalty.

    Each pass adds the entry ``j`` maximizing
    ``(r_j - alpha a^T M_j)^2 / (1 + alpha M_jj)`` with value
    ``(r_j - alpha a^T M_j) / (1 + alpha M_jj)``, where ``r = Psi - a``.  The
    final support is refit by ``a_S = (I + alpha M_SS)^{-1} Psi_S``.  With
    ``alpha = 0`` this is exactly OMP against the identity dictionary.
    """
    psi = ws.target()
    n = psi.size
    p = min(p, n)
    alpha = ws.alpha if ws.m_mat is not None else 0.0
    m_mat = ws.m_mat
    a = np.zeros(n)
    support: list[int] = []
    thr = COHERENCE_THRESHOLD * np.sqrt(psi @ psi)
    if alpha:
        den = 1.0 + alpha * np.diag(m_mat)
        sq_den = np.sqrt(den)
    for _ in range(p):
        r = psi - a
        if alpha:
            num = r - alpha * (m_mat[:, support] @ a[support]) if support else r
            score = np.abs(num) / sq_den
        else:
            num = r
            score = np.abs(num)
        if support:
            score[support] = 0.0
        j = int(score.argmax())
        if score[j] <= thr:
            break
        a[j] = num[j] / den[j] if alpha else num[j]
        support.append(j)
    if not support:
        return a
    s = np.array(support)
    if alpha:
        sys = np.eye(s.size) + alpha * m_mat[np.ix_(s, s)]
        coef = np.linalg.solve(sys, psi[s])
    else:
        coef = np.linalg.solve(np.eye(s.size), psi[s])
    out = np.zeros(n)
    out[s] = coef
    return out


def hard_threshold(v: np.ndarray, p: int) -> np.ndarray:
    """Keep the ``p`` largest-magnitude entries (ties go to the lower index)."""
    out = np.zeros_like(v)
    if p >= v.size:
        out[:] = v
        return out
    keep = np.argsort(-np.abs(v), kind="stable")[:p]
    out[keep] = v[keep]
    return out


def _admm_solver(ws: AtomUpdateWorkspace):
    """Callable applying ``(Phi^T Phi + alpha M + rho I)^{-1}``, cached per workspace family."""
    key = ("admm", ws.alpha, ws.rho)
    fn = ws.cache.get(key)
    if fn is not None:
        return fn
    phi_m = _phi_matrix(ws.phi)
    n = phi_m.shape[1]
    orth = ws.cache.get("orthogonal")
    if orth is None:
        orth = np.abs(phi_m.T @ phi_m - np.eye(n)).max() < 1e-10
        ws.cache["orthogonal"] = orth
    alpha = ws.alpha if ws.m_mat is not None else 0.0
    if orth and not alpha:
        scale = 1.0 / (1.0 + ws.rho)
        fn = lambda v: v * scale  # noqa: E731
    elif orth:
        eig = ws.cache.get("m_eig")
        if eig is None:
            eig = np.linalg.eigh(ws.m_mat)
            ws.cache["m_eig"] = eig
        lam, u = eig
        inv = 1.0 / (1.0 + ws.rho + alpha * lam)
        fn = lambda v: u @ (inv * (u.T @ v))  # noqa: E731
    else:
        mat = phi_m.T @ phi_m + ws.rho * np.eye(n)
        if alpha:
            mat = mat + alpha * ws.m_mat
        cho = np.linalg.cholesky(mat)
        fn = lambda v: cho_solve((cho, True), v)  # noqa: E731
    ws.cache[key] = fn
    return fn


def atom_update_admm(ws: AtomUpdateWorkspace, p: int) -> np.ndarray:
    """ADMM on the split ``a = b`` with ``b`` constrained to be ``p``-sparse.

    Iterates ``a <- (Phi^T Phi + alpha M + rho I)^{-1}(Psi + rho (b - u))``,
    ``b <- S_p(a + u)``, ``u <- u + a - b`` from ``b = S_p(Psi)``, ``u = 0``.
    Hard thresholding makes the iteration cycle between supports on some
    inputs, so the best ``b`` seen is kept and refit exactly on its support.
    """
    psi = ws.target()
    solve = _admm_solver(ws)
    rho = ws.rho
    gram = _admm_gram(ws)

    def quad(v):
        # v is p-sparse, so only the support block of the Gram matrix matters
        s = np.flatnonzero(v)
        vs = v[s]
        return float(vs @ (gram[np.ix_(s, s)] @ vs) - 2.0 * (psi[s] @ vs))

    b = hard_threshold(psi, p)
    u = np.zeros_like(psi)
    best, best_val = b, quad(b)
    for _ in range(ws.admm_iters):
        a = solve(psi + rho * (b - u))
        b = hard_threshold(a + u, p)
        u = u + a - b
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(u))):
            raise NumericalError(f"ADMM atom update diverged (rho={rho})")
        val = quad(b)
        if val < best_val:
            best, best_val = b, val
        if np.linalg.norm(a - b) < ADMM_TOL:
            break
    s = np.flatnonzero(best)
    if s.size == 0:
        return best
    out = np.zeros_like(psi)
    out[s] = np.linalg.solve(gram[np.ix_(s, s)], psi[s])
    return out if quad(out) <= best_val else best


def _admm_gram(ws: AtomUpdateWorkspace) -> np.ndarray:
    """``Phi^T Phi + alpha M`` as a dense matrix, cached per workspace family."""
    key = ("gram", ws.alpha)
    g = ws.cache.get(key)
    if g is None:
        phi_m = _phi_matrix(ws.phi)
        g = phi_m.T @ phi_m
        if ws.alpha and ws.m_mat is not None:
            g = g + ws.alpha * ws.m_mat
        ws.cache[key] = g
    return g


def coeff_update(ws: AtomUpdateWorkspace, a) -> np.ndarray:
    """``g = (I + beta L_c^R)^{-1} E^T Phi a``."""
    d = np.asarray(_phi_operator(ws.phi) @ np.asarray(a, dtype=float)).ravel()
    rhs = ws.error.T @ d
    if not ws.beta or ws.lc_r is None:
        return rhs
    lr = ws.lc_r
    k = rhs.size
    if k <= DENSE_COEFF_MAX:
        lr = lr.toarray() if sp.issparse(lr) else np.asarray(lr)
        return np.linalg.solve(np.eye(k) + ws.beta * lr, rhs)
    sys = (sp.identity(k, format="csc") + ws.beta * sp.csc_matrix(lr)).tocsc()
    return spla.spsolve(sys, rhs)


def _block_value(r, a, g, ws: AtomUpdateWorkspace) -> float:
    """Objective terms that depend on one atom and its code row."""
    val = float(np.sum(r * r))
    if ws.alpha and ws.m_mat is not None:
        val += ws.alpha * float(a @ (ws.m_mat @ a))
    if ws.beta and ws.lc_r is not None:
        val += ws.beta * float(g @ (ws.lc_r @ g))
    return val


def normalize_atom_pair(a, g, phi):
    """Rescale so that ``||Phi a|| = 1`` while keeping ``a g^T`` fixed."""
    a = np.asarray(a, dtype=float)
    g = np.asarray(g, dtype=float)
    nrm = float(np.linalg.norm(np.asarray(_phi_operator(phi) @ a).ravel()))
    if nrm < DEAD_ATOM_NORM:
        raise DeadAtomError(f"effective atom norm {nrm:.3e} is below {DEAD_ATOM_NORM}")
    return a / nrm, g * nrm


def _check_dims(y, phi_m, a, x):
    n, m = y.shape
    if phi_m.shape != (n, n):
        raise InvalidInputError(f"basis shape {phi_m.shape} does not match signals {y.shape}")
    if a.shape[0] != n:
        raise InvalidInputError(f"A has {a.shape[0]} rows, expected {n}")
    if x.shape != (a.shape[1], m):
        raise InvalidInputError(f"X has shape {x.shape}, expected {(a.shape[1], m)}")


def gems_objective(y, phi, a, x, l=None, l_c=None, alpha: float = 0.0, beta: float = 0.0) -> float:
    """``||Y - Phi A X||_F^2 + alpha Tr(A^T Phi^T L Phi A) + beta Tr(X L_c X^T)``."""
    y = np.asarray(y, dtype=float)
    a = a.matrix if isinstance(a, SparseDict) else a
    x = x.matrix if isinstance(x, CodeMatrix) else x
    a = sp.csc_matrix(a)
    x = sp.csc_matrix(x)
    phi_m = _phi_matrix(phi)
    _check_dims(y, phi_m, a, x)
    op = _phi_operator(phi)
    d = np.asarray(op @ a.toarray())
    resid = y - np.asarray((x.T @ d.T).T)
    val = float(np.sum(resid**2))
    if alpha and l is not None:
        lm = l.matrix if isinstance(l, LaplacianMatrix) else sp.csr_matrix(l)
        val += alpha * float(np.sum(d * (lm @ d)))
    if beta and l_c is not None:
        lc = l_c.matrix if isinstance(l_c, LaplacianMatrix) else sp.csr_matrix(l_c)
        val += beta * float((x @ lc).multiply(x).sum())
    return val


def smoothness_matrix(phi, l) -> np.ndarray:
    """``M = Phi^T L Phi`` as a dense array."""
    op = _phi_operator(phi)
    lm = l.matrix if isinstance(l, LaplacianMatrix) else sp.csr_matrix(l)
    lp = lm @ op
    lp = lp.toarray() if sp.issparse(lp) else np.asarray(lp)
    m = np.asarray(op.T @ lp)
    return 0.5 * (m + m.T)


def greedy_basis_codes(phi, v, p: int) -> np.ndarray:
    """``p``-sparse codes of the columns of ``v`` in an orthogonal basis, unit effective norm."""
    coef = np.asarray(_phi_operator(phi).T @ np.asarray(v, dtype=float))
    if coef.ndim == 1:
        coef = coef[:, None]
    out = np.zeros_like(coef)
    for j in range(coef.shape[1]):
        ws = AtomUpdateWorkspace(error=np.zeros((coef.shape[0], 0)), g=np.zeros(0), phi=phi)
        ws._psi = coef[:, j]
        aj = atom_update_greedy(ws, p)
        nrm = np.linalg.norm(np.asarray(_phi_operator(phi) @ aj).ravel())
        out[:, j] = aj / nrm if nrm > DEAD_ATOM_NORM else aj
    return out


def init_sparse_dict(y, phi, k: int, p: int, seed: int = 0) -> SparseDict:
    """Atoms from ``p``-sparse basis codes of randomly chosen training signals."""
    y = np.asarray(y, dtype=float)
    rng = np.random.default_rng(seed)
    m = y.shape[1]
    pick = rng.choice(m, size=k, replace=k > m)
    a = greedy_basis_codes(phi, y[:, pick], p)
    return SparseDict(sp.csc_matrix(a), phi, p)


class TrainResult(NamedTuple):
    dictionary: SparseDict
    codes: CodeMatrix
    trace: list


class _ObjectiveTracker:
    """Running value of the training objective, updated term by term."""

    def __init__(self, resid, alpha, beta):
        self.resid_sq = np.sum(resid**2, axis=0)
        self.alpha = alpha
        self.beta = beta
        self.smooth = None
        self.manifold = None

    def total(self) -> float:
        val = float(self.resid_sq.sum())
        if self.alpha:
            val += self.alpha * float(self.smooth.sum())
        if self.beta:
            val += self.beta * float(self.manifold.sum())
        return val


def _restricted(lc, omega):
    if lc is None:
        return None
    return lc[omega][:, omega]


def gems_train(y, phi, a0, l=None, l_c=None, cfg: TrainConfig | None = None, trace_atoms: bool = True) -> TrainResult:
    """Train the sparse dictionary ``A`` by alternating coding and atom updates.

    Parameters
    ----------
    y : ndarray of shape (N, M)
        Training signals.
    phi : HaarBasis or ndarray of shape (N, N)
        Orthogonal base dictionary.
    a0 : SparseDict or array_like of shape (N, K)
        Initial sparse dictionary with unit effective atoms.
    l, l_c : LaplacianMatrix, optional
        Feature and manifold Laplacians; required when ``alpha`` or ``beta``
        is positive.
    cfg : TrainConfig
    trace_atoms : bool
        Record the objective after every atom and coefficient step, not only
        after sparse coding and at the end of each sweep.

    Returns
    -------
    TrainResult
        ``(dictionary, codes, trace)`` where ``trace`` is a list of
        ``(iteration, phase, objective)`` tuples.  Phases are ``init``
        (codes of the initial dictionary), ``select`` and ``refit`` (sparse
        coding), ``atom``, ``coef`` and ``replace`` (dictionary update) and
        ``end`` (after each sweep).
    """
    cfg = cfg or TrainConfig()
    y = np.asarray(y, dtype=float)
    n, m = y.shape
    phi_m = _phi_matrix(phi)
    op = _phi_operator(phi)
    a_in = a0.matrix if isinstance(a0, SparseDict) else sp.csc_matrix(a0)
    a_mat = np.asarray(a_in.toarray(), dtype=float)
    k = a_mat.shape[1]
    p = cfg.p_sparsity
    if phi_m.shape != (n, n) or a_mat.shape[0] != n:
        raise InvalidInputError("inconsistent dimensions between signals, basis and A")
    alpha = cfg.alpha if l is not None else 0.0
    beta = cfg.beta if l_c is not None else 0.0
    if cfg.alpha and l is None:
        raise InvalidInputError("alpha > 0 needs the feature Laplacian l")
    if cfg.beta and l_c is None:
        raise InvalidInputError("beta > 0 needs the manifold Laplacian l_c")
    lc = None
    if beta:
        lc = l_c.matrix if isinstance(l_c, LaplacianMatrix) else sp.csr_matrix(l_c)
        lc = sp.csr_matrix(lc)
    m_mat = smoothness_matrix(phi, l) if alpha else None
    solver = atom_update_admm if cfg.atom_solver == "admm" else atom_update_greedy
    d_mat = np.asarray(op @ a_mat)
    norms = np.linalg.norm(d_mat, axis=0)
    if np.any(np.abs(norms - 1.0) > 1e-8):
        raise InvalidInputError("initial atoms must satisfy ||Phi a_j|| = 1")
    cache: dict = {}
    trace: list = []

    def code(it):
        codes = grsc(d_mat, y, lc, beta, cfg.t_sparsity, max_outer=cfg.grsc_outer)
        const = alpha * float(np.sum(d_mat * (l.matrix @ d_mat))) if alpha else 0.0
        if it == 0:
            trace.append((0, "init", codes.history[-1][1] + const))
        else:
            for phase, val in codes.history:
                trace.append((it, phase, val + const))
        return codes

    codes = code(0)
    prev_end = trace[-1][2]
    for it in range(1, cfg.iterations + 1):
        if it > 1:
            codes = code(it)
        xr = codes.matrix.tocsr()
        xr.sort_indices()
        resid = y - np.asarray((xr.T @ d_mat.T).T)
        track = _ObjectiveTracker(resid, alpha, beta)
        if alpha:
            track.smooth = np.einsum("ij,ij->j", a_mat, m_mat @ a_mat)
        if beta:
            track.manifold = np.zeros(k)
            for j in range(k):
                om = xr.indices[xr.indptr[j] : xr.indptr[j + 1]]
                gx = xr.data[xr.indptr[j] : xr.indptr[j + 1]]
                if om.size:
                    track.manifold[j] = gx @ (_restricted(lc, om) @ gx)
        used_for_replacement: set[int] = set()

        for j in range(k):
            lo, hi = xr.indptr[j], xr.indptr[j + 1]
            omega = xr.indices[lo:hi]
            gx = xr.data[lo:hi]
            dead = omega.size == 0 or not np.any(gx)
            if not dead:
                e = resid[:, omega] + np.outer(d_mat[:, j], gx)
                lc_r = _restricted(lc, omega) if beta else None
                ws = AtomUpdateWorkspace(
                    error=e,
                    g=gx / np.linalg.norm(gx),
                    phi=phi,
                    m_mat=m_mat,
                    lc_r=lc_r,
                    alpha=alpha,
                    beta=beta,
                    rho=cfg.admm_rho,
                    admm_iters=cfg.admm_iters,
                    cache=cache,
                )
                a_new = solver(ws, p)
                try:
                    a_new, g_scaled = normalize_atom_pair(a_new, ws.g, phi)
                except DeadAtomError:
                    dead = True
            if dead:
                # drop the atom from the codes and restart it from the worst-fit signal
                if omega.size:
                    resid[:, omega] += np.outer(d_mat[:, j], gx)
                    xr.data[lo:hi] = 0.0
                    track.resid_sq[omega] = np.sum(resid[:, omega] ** 2, axis=0)
                    if beta:
                        track.manifold[j] = 0.0
                order = np.argsort(-track.resid_sq, kind="stable")
                if len(used_for_replacement) == order.size:
                    used_for_replacement.clear()  # more dead atoms than signals
                worst = next(int(i) for i in order if int(i) not in used_for_replacement)
                used_for_replacement.add(worst)
                a_new = greedy_basis_codes(phi, y[:, worst], p)[:, 0]
                a_mat[:, j] = a_new
                d_mat[:, j] = np.asarray(op @ a_new).ravel()
                if alpha:
                    track.smooth[j] = a_new @ (m_mat @ a_new)
                if trace_atoms:
                    trace.append((it, "replace", track.total()))
                continue

            d_new = np.asarray(op @ a_new).ravel()
            if trace_atoms:
                r_atom = e - np.outer(d_new, g_scaled)
                track.resid_sq[omega] = np.sum(r_atom**2, axis=0)
                if alpha:
                    track.smooth[j] = a_new @ (m_mat @ a_new)
                if beta:
                    track.manifold[j] = g_scaled @ (lc_r @ g_scaled)
                trace.append((it, "atom", track.total()))
            g_new = coeff_update(ws, a_new)
            r_new = e - np.outer(d_new, g_new)
            if _block_value(r_new, a_new, g_new, ws) > _block_value(resid[:, omega], a_mat[:, j], gx, ws):
                # the heuristic atom solvers can lose to the current pair; keep it then
                a_new, d_new, g_new = a_mat[:, j].copy(), d_mat[:, j].copy(), gx.copy()
                r_new = resid[:, omega]
            resid[:, omega] = r_new
            a_mat[:, j] = a_new
            d_mat[:, j] = d_new
            xr.data[lo:hi] = g_new
            track.resid_sq[omega] = np.sum(r_new**2, axis=0)
            if alpha:
                track.smooth[j] = a_new @ (m_mat @ a_new)
            if beta:
                track.manifold[j] = g_new @ (lc_r @ g_new)
            if trace_atoms:
                trace.append((it, "coef", track.total()))

        codes = CodeMatrix(xr.tocsc(), cfg.t_sparsity)
        end = track.total()
        trace.append((it, "end", end))
        if cfg.tol and abs(prev_end - end) <= cfg.tol * max(abs(prev_end), 1e-300):
            log.info("converged after %d iterations", it)
            break
        prev_end = end

    a_out = sp.csc_matrix(a_mat)
    return TrainResult(SparseDict(a_out, phi, p), codes, trace)


class KSVDResult(NamedTuple):
    dictionary: np.ndarray
    codes: CodeMatrix


def ksvd_train(y, t: int, k: int, iterations: int, seed: int = 0, d0=None, trace: list | None = None) -> KSVDResult:
    """Classic K-SVD: OMP coding and rank-one SVD atom updates.

    The initial dictionary (unless ``d0`` is given) consists of ``k``
    normalized training signals drawn at random.  Unused atoms are replaced
    by the worst-represented training signal.
    """
    y = np.asarray(y, dtype=float)
    n, m = y.shape
    rng = np.random.default_rng(seed)
    if d0 is None:
        pick = rng.choice(m, size=k, replace=k > m)
        d = y[:, pick].copy()
        d += 1e-12 * rng.standard_normal(d.shape) * (np.linalg.norm(d, axis=0) == 0)
    else:
        d = np.array(d0, dtype=float)
    d /= np.linalg.norm(d, axis=0)
    codes = omp_batch(d, y, t)
    for it in range(1, iterations + 1):
        xr = codes.matrix.tocsr()
        xr.sort_indices()
        resid = y - np.asarray((xr.T @ d.T).T)
        used: set[int] = set()
        for j in range(k):
            lo, hi = xr.indptr[j], xr.indptr[j + 1]
            omega = xr.indices[lo:hi]
            gx = xr.data[lo:hi]
            if omega.size == 0 or not np.any(gx):
                if omega.size:
                    resid[:, omega] += np.outer(d[:, j], gx)
                    xr.data[lo:hi] = 0.0
                err = np.sum(resid**2, axis=0)
                order = np.argsort(-err, kind="stable")
                if len(used) == order.size:
                    used.clear()  # more dead atoms than signals
                worst = next(int(i) for i in order if int(i) not in used)
                used.add(worst)
                v = y[:, worst]
                nv = np.linalg.norm(v)
                d[:, j] = v / nv if nv > 0 else rng.standard_normal(n) / np.sqrt(n)
                d[:, j] /= np.linalg.norm(d[:, j])
                continue
            e = resid[:, omega] + np.outer(d[:, j], gx)
            u, s, vt = np.linalg.svd(e, full_matrices=False)
            # sign chosen so the atom stays aligned with its previous version
            sgn = 1.0 if u[:, 0] @ d[:, j] >= 0 else -1.0
            d[:, j] = sgn * u[:, 0]
            g = sgn * s[0] * vt[0]
            resid[:, omega] = e - np.outer(d[:, j], g)
            xr.data[lo:hi] = g
        if trace is not None:
            trace.append((it, "end", float(np.sum(resid**2))))
        codes = omp_batch(d, y, t)
    return KSVDResult(d, codes)


# ----------------------------------------------------------------------------
# Model bundle


def write_sparse_matrix(path, a) -> None:
    """Triplet text format: header ``# rows=.. cols=..`` then ``row col value`` lines."""
    a = sp.csc_matrix(a)
    a.sort_indices()
    with open(path, "w") as fh:
        fh.write(f"# rows={a.shape[0]} cols={a.shape[1]}\n")
        for col in range(a.shape[1]):
            for p in range(a.indptr[col], a.indptr[col + 1]):
                fh.write(f"{a.indices[p]} {col} {a.data[p]:.17g}\n")


def read_sparse_matrix(path) -> sp.csc_matrix:
    lines = Path(path).read_text().splitlines()
    head = dict(tok.split("=") for tok in lines[0].lstrip("#").split())
    shape = (int(head["rows"]), int(head["cols"]))
    trip = np.array([ln.split() for ln in lines[1:] if ln.strip()], dtype=float).reshape(-1, 3)
    return sp.csc_matrix((trip[:, 2], (trip[:, 0].astype(np.intp), trip[:, 1].astype(np.intp))), shape=shape)


def write_trace(path, trace) -> None:
    with open(path, "w") as fh:
        fh.write("iter,phase,objective\n")
        for it, phase, val in trace:
            fh.write(f"{it},{phase},{float(val)!r}\n")


def read_trace(path) -> list:
    out = []
    for line in Path(path).read_text().splitlines()[1:]:
        it, phase, val = line.split(",")
        out.append((int(it), phase, float(val)))
    return out
