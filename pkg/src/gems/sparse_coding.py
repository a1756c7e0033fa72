"""Sparse coding over an effective dictionary.

``omp`` is plain orthogonal matching pursuit.  ``grsc`` adds the manifold
smoothness term ``beta * Tr(X L_c X^T)`` that couples the codes of different
signals; it alternates OMP-based support selection with an exact coupled
coefficient solve on the chosen supports (``refit_on_supports``).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidInputError
from .graph_core import LaplacianMatrix

log = logging.getLogger(__name__)

CG_RTOL = 1e-10
RIDGE = 1e-10
GRSC_MAX_OUTER = 10
# OMP stops when no correlation exceeds this fraction of ||y||.
COHERENCE_THRESHOLD = 1e-10


@dataclass(frozen=True)
class CodeMatrix:
    """``K x M`` sparse code matrix with at most ``t`` nonzeros per column."""

    matrix: sp.csc_matrix
    t: int
    history: tuple = field(default=(), compare=False)
    notes: tuple = field(default=(), compare=False)

    def __post_init__(self):
        m = sp.csc_matrix(self.matrix, dtype=float, copy=True)
        m.eliminate_zeros()
        m.sort_indices()
        counts = np.diff(m.indptr)
        if counts.size and counts.max() > self.t:
            raise InvalidInputError(f"a column has {counts.max()} nonzeros, bound is {self.t}")
        object.__setattr__(self, "matrix", m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def supports(self) -> list[np.ndarray]:
        m = self.matrix
        return [m.indices[m.indptr[i] : m.indptr[i + 1]].copy() for i in range(m.shape[1])]

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def usage(self) -> np.ndarray:
        """Number of signals that use each atom."""
        return np.bincount(self.matrix.indices, minlength=self.matrix.shape[0])


def _codes_from_lists(k: int, supports, coefs, t: int, **kw) -> CodeMatrix:
    counts = np.array([len(s) for s in supports], dtype=np.intp)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    rows = np.concatenate([np.asarray(s, dtype=np.intp) for s in supports]) if counts.sum() else np.zeros(0, np.intp)
    vals = np.concatenate([np.asarray(c, dtype=float) for c in coefs]) if counts.sum() else np.zeros(0)
    m = sp.csc_matrix((vals, rows, indptr), shape=(k, len(supports)))
    return CodeMatrix(m, t, **kw)


def _check_dictionary(d) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if d.ndim != 2:
        raise InvalidInputError("dictionary must be a 2-D array")
    norms = np.linalg.norm(d, axis=0)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise InvalidInputError("dictionary columns must have unit norm (within 1e-6)")
    return d


def _clamp_t(t: int, n: int, k: int) -> int:
    if t < 1:
        raise InvalidInputError(f"sparsity must be >= 1, got {t}")
    limit = min(n, k)
    if t > limit:
        warnings.warn(f"sparsity {t} exceeds min(N, K) = {limit}; clamping", stacklevel=3)
        return limit
    return t


class _OMPKernel:
    """Gram-based OMP; every signal takes exactly the same arithmetic path."""

    def __init__(self, d: np.ndarray):
        self.dt = np.ascontiguousarray(d.T)
        self.gram = self.dt @ d

    def solve(self, y: np.ndarray, t: int):
        y = np.ascontiguousarray(y, dtype=float)
        alpha0 = self.dt @ y
        alpha = alpha0.copy()
        thr = COHERENCE_THRESHOLD * np.sqrt(y @ y)
        support: list[int] = []
        coef = np.zeros(0)
        for _ in range(t):
            score = np.abs(alpha)
            if support:
                score[support] = 0.0
            j = int(score.argmax())
            if score[j] <= thr:
                break
            trial = support + [j]
            try:
                c = np.linalg.solve(self.gram[np.ix_(trial, trial)], alpha0[trial])
            except np.linalg.LinAlgError:
                break  # selected atom is linearly dependent on the support
            support, coef = trial, c
            # rows of the symmetric Gram matrix are contiguous, its columns are not
            alpha = alpha0 - coef @ self.gram[support]
        return np.array(support, dtype=np.intp), coef


def omp(d, y, t: int) -> np.ndarray:
    """Sparse code of a single signal ``y`` with at most ``t`` atoms.

    Returns the dense length-``K`` coefficient vector.  Coefficients on the
    selected support are the least-squares fit, so the residual is orthogonal
    to every selected atom.
    """
    d = _check_dictionary(d)
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.shape[0] != d.shape[0]:
        raise InvalidInputError(f"signal shape {y.shape} does not match dictionary {d.shape}")
    t = _clamp_t(t, *d.shape)
    s, c = _OMPKernel(d).solve(y, t)
    x = np.zeros(d.shape[1])
    x[s] = c
    return x


def omp_batch(d, y, t: int) -> CodeMatrix:
    """Column-wise :func:`omp` for an ``N x M`` batch, returned as a CodeMatrix."""
    d = _check_dictionary(d)
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[0] != d.shape[0]:
        raise InvalidInputError(f"signals shape {y.shape} does not match dictionary {d.shape}")
    t = _clamp_t(t, *d.shape)
    kern = _OMPKernel(d)
    supports, coefs = [], []
    for i in range(y.shape[1]):
        s, c = kern.solve(y[:, i], t)
        supports.append(s)
        coefs.append(c)
    return _codes_from_lists(d.shape[1], supports, coefs, t)


def _as_array_laplacian(l_c, m: int):
    if l_c is None:
        return None
    mat = l_c.matrix if isinstance(l_c, LaplacianMatrix) else sp.csr_matrix(l_c)
    if mat.shape != (m, m):
        raise InvalidInputError(f"manifold Laplacian has shape {mat.shape}, expected ({m}, {m})")
    return sp.csr_matrix(mat)


def coding_objective(d, y, x, l_c=None, beta: float = 0.0) -> float:
    """``||Y - D X||_F^2 + beta * Tr(X L_c X^T)``."""
    x = x.matrix if isinstance(x, CodeMatrix) else x
    x = sp.csr_matrix(x)
    resid = np.asarray(y, dtype=float) - (x.T @ np.asarray(d, dtype=float).T).T
    val = float(np.sum(resid**2))
    if beta and l_c is not None:
        lc = _as_array_laplacian(l_c, x.shape[1])
        val += beta * float((x @ lc).multiply(x).sum())
    return val


def _pad_supports(supports, m: int):
    t = max((len(s) for s in supports), default=0)
    pad = np.full((m, max(t, 1)), -1, dtype=np.intp)
    for i, s in enumerate(supports):
        pad[i, : len(s)] = s
    return pad


def refit_on_supports(d, y, l_c, beta: float, supports, t: int | None = None, x0=None) -> CodeMatrix:
    """Exact minimizer of the regularized coding objective on fixed supports.

    With ``beta > 0`` the columns are coupled through ``l_c`` and the joint
    normal equations are solved by preconditioned conjugate gradients.  A
    singular system is regularized with a tiny ridge and noted in
    ``CodeMatrix.notes``.
    """
    d = np.asarray(d, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = d.shape
    m = y.shape[1]
    supports = [np.asarray(s, dtype=np.intp) for s in supports]
    if len(supports) != m:
        raise InvalidInputError(f"got {len(supports)} supports for {m} signals")
    t = t if t is not None else max((s.size for s in supports), default=1)
    t = max(t, 1)
    if any(s.size > t for s in supports):
        raise InvalidInputError("a support exceeds the sparsity bound")
    lc = _as_array_laplacian(l_c, m) if beta else None
    gram = d.T @ d
    coupled = lc is not None and beta > 0 and lc.nnz > 0

    if not coupled:
        kern_dt = np.ascontiguousarray(d.T)
        coefs, notes = [], []
        for i, s in enumerate(supports):
            if s.size == 0:
                coefs.append(np.zeros(0))
                continue
            b = kern_dt[s] @ y[:, i]
            g = gram[np.ix_(s, s)]
            try:
                coefs.append(np.linalg.solve(g, b))
            except np.linalg.LinAlgError:
                coefs.append(np.linalg.solve(g + RIDGE * np.eye(s.size), b))
                notes.append(f"ridge:{i}")
        return _codes_from_lists(k, supports, coefs, t, notes=tuple(notes))

    counts = np.array([s.size for s in supports])
    n_slots = int(counts.sum())
    if n_slots == 0:
        return _codes_from_lists(k, supports, [np.zeros(0)] * m, t)
    pad = _pad_supports(supports, m)
    tp = pad.shape[1]
    valid = pad >= 0
    slot = np.full(pad.shape, -1, dtype=np.intp)
    slot[valid] = np.arange(n_slots)
    col_of_slot = np.repeat(np.arange(m), counts)
    atom_of_slot = pad[valid]

    dty = d.T @ y
    rhs = dty[atom_of_slot, col_of_slot]

    # per-column Gram blocks
    safe = np.where(valid, pad, 0)
    blocks = gram[safe[:, :, None], safe[:, None, :]]
    pair_ok = valid[:, :, None] & valid[:, None, :]
    r_idx = np.broadcast_to(slot[:, :, None], blocks.shape)[pair_ok]
    c_idx = np.broadcast_to(slot[:, None, :], blocks.shape)[pair_ok]
    vals = blocks[pair_ok]

    # manifold coupling: slots (i, a) and (j, a) interact with weight beta * Lc[i, j]
    pos = np.full((k, m), -1, dtype=np.intp)
    pos[atom_of_slot, col_of_slot] = np.arange(n_slots)
    lcoo = lc.tocoo()
    ei, ej, ev = lcoo.row, lcoo.col, lcoo.data
    atoms_e = pad[ei]  # (E, tp)
    src = slot[ei]
    dst = np.where(atoms_e >= 0, pos[np.where(atoms_e >= 0, atoms_e, 0), ej[:, None]], -1)
    hit = (src >= 0) & (dst >= 0)
    r_idx = np.concatenate([r_idx, src[hit]])
    c_idx = np.concatenate([c_idx, dst[hit]])
    vals = np.concatenate([vals, beta * np.broadcast_to(ev[:, None], hit.shape)[hit]])
    h = sp.csr_matrix((vals, (r_idx, c_idx)), shape=(n_slots, n_slots))

    # block-Jacobi preconditioner from the per-column diagonal blocks of h
    diag_l = lc.diagonal()
    pblocks = blocks + beta * diag_l[:, None, None] * np.eye(tp)[None]
    pblocks = np.where(pair_ok, pblocks, np.eye(tp)[None])
    notes = []
    try:
        pinv = np.linalg.inv(pblocks)
    except np.linalg.LinAlgError:
        pinv = np.linalg.inv(pblocks + RIDGE * np.eye(tp)[None])
        h = h + RIDGE * sp.identity(n_slots, format="csr")
        notes.append("ridge")

    def precond(v):
        vp = np.zeros((m, tp))
        vp[valid] = v
        return np.einsum("mij,mj->mi", pinv, vp)[valid]

    pre = spla.LinearOperator((n_slots, n_slots), matvec=precond, dtype=float)
    if x0 is None:
        x0 = precond(rhs)
    sol, info = spla.cg(h, rhs, x0=x0, rtol=CG_RTOL, atol=0.0, maxiter=20 * n_slots, M=pre)
    if info != 0 or not np.all(np.isfinite(sol)):
        log.warning("CG did not converge (info=%s); using a direct ridge solve", info)
        sol = spla.spsolve((h + RIDGE * sp.identity(n_slots)).tocsc(), rhs)
        notes.append("ridge")
    coefs = np.split(sol, np.cumsum(counts)[:-1])
    return _codes_from_lists(k, supports, coefs, t, notes=tuple(notes))


def grsc(d, y, l_c, beta: float, t: int, max_outer: int = GRSC_MAX_OUTER) -> CodeMatrix:
    """Graph-regularized sparse coding.

    Minimizes ``||Y - D X||_F^2 + beta Tr(X L_c X^T)`` subject to at most
    ``t`` nonzeros per column.  Starting from per-column OMP supports, each
    round re-selects supports by OMP against targets corrected for the
    coupling with neighbouring codes, refits exactly, and keeps the new
    supports only if the objective drops.  With ``beta == 0`` (or an empty
    ``l_c``) the result is exactly :func:`omp_batch`.

    ``history`` records ``(phase, objective)`` pairs: ``select`` for the OMP
    coefficients and ``refit`` after each accepted coupled solve.
    """
    if beta < 0:
        raise InvalidInputError(f"beta must be nonnegative, got {beta}")
    d = _check_dictionary(d)
    y = np.asarray(y, dtype=float)
    m = y.shape[1]
    lc = _as_array_laplacian(l_c, m)
    base = omp_batch(d, y, t)
    if beta == 0 or lc is None or lc.nnz == 0 or abs(lc).max() == 0:
        obj = coding_objective(d, y, base)
        return CodeMatrix(base.matrix, base.t, history=(("select", obj), ("refit", obj)))

    t = base.t
    history = [("select", coding_objective(d, y, base, lc, beta))]
    supports = base.supports()
    codes = refit_on_supports(d, y, lc, beta, supports, t)
    obj = coding_objective(d, y, codes, lc, beta)
    history.append(("refit", obj))
    lc_off = lc - sp.diags(lc.diagonal())
    for _ in range(max_outer):
        # coupling seen by column i from its neighbours: sum_j Lc[i, j] x_j
        coupling = (codes.matrix @ lc_off).toarray()
        target = y - beta * (d @ coupling)
        cand = omp_batch(d, target, t).supports()
        if all(np.array_equal(np.sort(a), np.sort(b)) for a, b in zip(cand, supports)):
            break
        trial = refit_on_supports(d, y, lc, beta, cand, t)
        trial_obj = coding_objective(d, y, trial, lc, beta)
        if not trial_obj < obj * (1 - 1e-12):
            break
        codes, obj, supports = trial, trial_obj, cand
        history.append(("refit", obj))
    return CodeMatrix(codes.matrix, t, history=tuple(history), notes=codes.notes)


def manifold_laplacian(y, knn: int = 10, sigma: float | None = None) -> LaplacianMatrix:
    """Laplacian of a kNN Gaussian-kernel graph whose nodes are the signals.

    ``sigma`` defaults to the median distance to the ``knn``-th neighbour.
    Neighbours are found by brute force in chunks, which is adequate for a
    few tens of thousands of signals.
    """
    y = np.asarray(y, dtype=float)
    m = y.shape[1]
    if m < 2:
        return LaplacianMatrix(sp.csr_matrix((m, m)))
    knn = min(knn, m - 1)
    sq = np.sum(y**2, axis=0)
    rows, cols, dist = [], [], []
    chunk = max(1, int(2e7 // max(m, 1)))
    for start in range(0, m, chunk):
        stop = min(m, start + chunk)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (y[:, start:stop].T @ y)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        nb = np.argpartition(d2, knn - 1, axis=1)[:, :knn]
        rows.append(np.repeat(np.arange(start, stop), knn))
        cols.append(nb.ravel())
        dist.append(np.sqrt(np.maximum(np.take_along_axis(d2, nb, axis=1).ravel(), 0.0)))
    r, c, dd = np.concatenate(rows), np.concatenate(cols), np.concatenate(dist)
    if sigma is None:
        sigma = float(np.median(dd.reshape(-1, knn).max(axis=1))) or 1.0
    w = np.exp(-(dd**2) / (2.0 * sigma**2))
    wm = sp.csr_matrix((w, (r, c)), shape=(m, m))
    wm = wm.maximum(wm.T)
    deg = np.asarray(wm.sum(axis=1)).ravel()
    return LaplacianMatrix(sp.diags(deg) - wm)


def write_codes(path, codes: CodeMatrix) -> None:
    """Triplet text format: header ``# K M T`` then ``col row value`` lines."""
    k, m = codes.shape
    mat = codes.matrix
    with open(path, "w") as fh:
        fh.write(f"# K={k} M={m} T={codes.t}\n")
        for col in range(m):
            for p in range(mat.indptr[col], mat.indptr[col + 1]):
                fh.write(f"{col} {mat.indices[p]} {mat.data[p]:.17g}\n")


def read_codes(path) -> CodeMatrix:
    lines = Path(path).read_text().splitlines()
    head = dict(tok.split("=") for tok in lines[0].lstrip("#").split())
    k, m, t = int(head["K"]), int(head["M"]), int(head["T"])
    cols, rows, vals = [], [], []
    for line in lines[1:]:
        if not line.strip():
            continue
        c, r, v = line.split()
        cols.append(int(c))
        rows.append(int(r))
        vals.append(float(v))
    mat = sp.csc_matrix((vals, (rows, cols)), shape=(k, m))
    return CodeMatrix(mat, t)
