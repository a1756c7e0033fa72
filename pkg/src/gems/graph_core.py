"""Weighted graphs, combinatorial Laplacians and Fiedler vectors.

Graphs are undirected, loop-free and stored as symmetric ``scipy.sparse``
CSR matrices.  Everything here is immutable after construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh_tridiagonal
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import InvalidInputError

log = logging.getLogger(__name__)

# Induced subgraphs up to this size are solved with a dense eigensolver.
DENSE_FIEDLER_MAX = 64
LANCZOS_MAX_ITER = 500
LANCZOS_TOL = 1e-8
# Fiedler entries below this magnitude are snapped to exactly zero so that
# the ">= 0" side assignment does not depend on rounding noise.
ZERO_SNAP = 1e-12


def _frozen_csr(m) -> sp.csr_matrix:
    m = sp.csr_matrix(m, dtype=float, copy=True)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    for arr in (m.data, m.indices, m.indptr):
        arr.flags.writeable = False
    return m


@dataclass(frozen=True)
class WeightedGraph:
    """Undirected weighted graph given by its adjacency matrix."""

    weights: sp.csr_matrix

    def __post_init__(self):
        w = _frozen_csr(self.weights)
        n, m = w.shape
        if n != m:
            raise InvalidInputError(f"adjacency matrix must be square, got {w.shape}")
        if w.nnz and w.data.min() < 0:
            raise InvalidInputError("edge weights must be nonnegative")
        if np.any(w.diagonal() != 0):
            raise InvalidInputError("self-loops are not supported (nonzero diagonal)")
        asym = abs(w - w.T)
        if asym.nnz and asym.max() > 1e-12 * max(1.0, abs(w).max()):
            raise InvalidInputError("adjacency matrix must be symmetric")
        object.__setattr__(self, "weights", w)

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_edges(self) -> int:
        return sp.triu(self.weights, k=1).nnz

    def is_connected(self) -> bool:
        n_comp, _ = connected_components(self.weights, directed=False)
        return n_comp == 1


@dataclass(frozen=True)
class LaplacianMatrix:
    """Combinatorial Laplacian ``L = Delta - W``.

    Nonnegative weights together with zero row sums make ``L`` diagonally
    dominant, so positive semi-definiteness follows from the checks below.
    """

    matrix: sp.csr_matrix

    def __post_init__(self):
        lm = _frozen_csr(self.matrix)
        n, m = lm.shape
        if n != m:
            raise InvalidInputError(f"Laplacian must be square, got {lm.shape}")
        off = lm - sp.diags(lm.diagonal())
        scale = max(1.0, abs(lm).max()) if lm.nnz else 1.0
        if off.nnz and off.data.max() > 1e-10 * scale:
            raise InvalidInputError("Laplacian off-diagonal entries must be <= 0")
        asym = abs(lm - lm.T)
        if asym.nnz and asym.max() > 1e-10 * scale:
            raise InvalidInputError("Laplacian must be symmetric")
        rows = np.asarray(lm.sum(axis=1)).ravel()
        if n and np.abs(rows).max() > 1e-8 * scale:
            raise InvalidInputError("Laplacian row sums must vanish")
        object.__setattr__(self, "matrix", lm)

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[0]

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def graph(self) -> WeightedGraph:
        """Adjacency with ``w_ij = -L_ij``; tiny positive noise is clipped."""
        off = -(self.matrix - sp.diags(self.matrix.diagonal()))
        off = off.tocsr()
        off.data = np.maximum(off.data, 0.0)
        off = (off + off.T) * 0.5
        return WeightedGraph(off)


def _check_coords(coords) -> np.ndarray:
    x = np.asarray(coords, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidInputError("need at least 2 points given as an (n, d) array")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("coordinates must be finite")
    return x


def _neighbor_pairs(x: np.ndarray, knn: int | None):
    """Candidate edge list (i < j) with Euclidean distances."""
    n = x.shape[0]
    if knn is None:
        i, j = np.triu_indices(n, k=1)
        d = np.linalg.norm(x[i] - x[j], axis=1)
        return i, j, d
    if not 1 <= knn < n:
        raise InvalidInputError(f"knn must satisfy 1 <= knn < n ({n}), got {knn}")
    tree = cKDTree(x)
    dist, idx = tree.query(x, k=knn + 1)
    rows, cols, ds = [], [], []
    for i in range(n):
        nb = idx[i]
        keep = nb != i
        sel_idx = nb[keep][:knn]
        sel_d = dist[i][keep][:knn]
        rows.append(np.full(sel_idx.size, i))
        cols.append(sel_idx)
        ds.append(sel_d)
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    d = np.concatenate(ds)
    # OR-style symmetrization: an edge survives if either endpoint picked it.
    lo, hi = np.minimum(r, c), np.maximum(r, c)
    key = lo * n + hi
    _, first = np.unique(key, return_index=True)
    return lo[first], hi[first], d[first]


def _graph_from_pairs(n: int, i, j, w) -> WeightedGraph:
    m = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n))
    return WeightedGraph(m.tocsr())


def build_rbf_graph(coords, sigma: float, knn: int | None = None) -> WeightedGraph:
    """Gaussian kernel graph ``w_ij = exp(-d_ij^2 / (2 sigma^2))``.

    Parameters
    ----------
    coords : array_like of shape (n, d)
        Node positions.
    sigma : float
        Kernel width, must be positive.
    knn : int, optional
        If given, keep edge ``(i, j)`` only when ``j`` is among the ``knn``
        nearest neighbours of ``i`` or vice versa.  Coincident points give
        weight-one edges.
    """
    x = _check_coords(coords)
    if not sigma > 0:
        raise InvalidInputError(f"sigma must be positive, got {sigma}")
    i, j, d = _neighbor_pairs(x, knn)
    w = np.exp(-(d**2) / (2.0 * sigma**2))
    return _graph_from_pairs(x.shape[0], i, j, w)


def build_inverse_distance_graph(coords, knn: int | None = None) -> WeightedGraph:
    """Graph with edge weights ``1 / d_ij``; coincident points are rejected."""
    x = _check_coords(coords)
    i, j, d = _neighbor_pairs(x, knn)
    if np.any(d == 0):
        raise InvalidInputError("inverse-distance weights are undefined for coincident points")
    return _graph_from_pairs(x.shape[0], i, j, 1.0 / d)


def median_neighbor_distance(coords, knn: int = 1) -> float:
    """Median distance from each point to its ``knn``-th nearest neighbour."""
    x = _check_coords(coords)
    dist, _ = cKDTree(x).query(x, k=knn + 1)
    return float(np.median(dist[:, -1]))


def laplacian(g: WeightedGraph) -> LaplacianMatrix:
    w = g.weights
    deg = np.asarray(w.sum(axis=1)).ravel()
    return LaplacianMatrix(sp.diags(deg) - w)


def dirichlet_energy(l: LaplacianMatrix, f) -> float | np.ndarray:
    """Graph Dirichlet energy ``f^T L f``.

    Evaluated as ``1/2 sum_ij w_ij (f_i - f_j)^2`` over the stored edges, which
    is nonnegative by construction.  A 2-D ``f`` returns one value per column.
    """
    f = np.asarray(f, dtype=float)
    if f.shape[0] != l.n_nodes or f.ndim > 2:
        raise InvalidInputError(f"signal has shape {f.shape}, expected leading dimension {l.n_nodes}")
    coo = sp.triu(l.matrix, k=1).tocoo()
    w = -coo.data
    diff = f[coo.row] - f[coo.col]
    if f.ndim == 1:
        return float(np.sum(w * diff**2))
    return np.sum(w[:, None] * diff**2, axis=0)


def induced_laplacian(l: LaplacianMatrix, subset) -> sp.csr_matrix:
    """Laplacian of the subgraph induced by ``subset`` (not the principal submatrix)."""
    idx = np.asarray(subset, dtype=np.intp)
    sub = l.matrix[idx][:, idx]
    w = -(sub - sp.diags(sub.diagonal()))
    w = w.tocsr()
    deg = np.asarray(w.sum(axis=1)).ravel()
    return (sp.diags(deg) - w).tocsr()


@dataclass(frozen=True)
class FiedlerResult:
    vector: np.ndarray
    value: float
    connected: bool
    iterations: int
    method: str


def _fix_sign(v: np.ndarray) -> np.ndarray:
    v = np.array(v, dtype=float)
    v /= np.linalg.norm(v)
    v[np.abs(v) < ZERO_SNAP] = 0.0
    nz = np.flatnonzero(v)
    if nz.size and v[nz[0]] < 0:
        v = -v
    return v


def _dense_fiedler(lsub: np.ndarray):
    vals, vecs = np.linalg.eigh(lsub)
    v = vecs[:, 1]
    v = v - v.mean()
    return vals[1], v


def _lanczos_fiedler(lsub: sp.csr_matrix, max_iter: int, tol: float):
    """Smallest eigenpair of ``lsub`` on the complement of the constant vector.

    Lanczos with full reorthogonalization.  Stops once the Ritz residual is
    below ``tol`` and the sign pattern of the Ritz vector has not changed for
    three consecutive steps.  Returns ``None`` if that never happens.
    """
    n = lsub.shape[0]
    ones = np.full(n, 1.0 / np.sqrt(n))
    q = np.random.default_rng(20181).standard_normal(n)
    q -= ones * (ones @ q)
    q /= np.linalg.norm(q)
    kmax = min(max_iter, n - 1)
    basis = np.empty((kmax, n))
    alphas = np.empty(kmax)
    betas = np.empty(kmax)
    prev_sign = None
    stable = 0
    beta = 0.0
    for k in range(kmax):
        basis[k] = q
        w = lsub @ q
        alphas[k] = q @ w
        w -= alphas[k] * q
        if k:
            w -= beta * basis[k - 1]
        for _ in range(2):
            w -= basis[: k + 1].T @ (basis[: k + 1] @ w)
            w -= ones * (ones @ w)
        beta = np.linalg.norm(w)
        betas[k] = beta
        if k == 0:
            theta, s = alphas[:1], np.ones((1, 1))
        else:
            theta, s = eigh_tridiagonal(alphas[: k + 1], betas[:k], select="i", select_range=(0, 0))
        resid = abs(beta * s[-1, 0])
        v = basis[: k + 1].T @ s[:, 0]
        sign = _fix_sign(v) >= 0
        if prev_sign is not None and np.array_equal(sign, prev_sign):
            stable += 1
        else:
            stable = 0
        prev_sign = sign
        breakdown = beta < 1e-14 * max(1.0, abs(alphas[k]))
        if (resid < tol and stable >= 3) or breakdown:
            return float(theta[0]), v, k + 1
        q = w / beta
    return None


def fiedler_vector(l: LaplacianMatrix, subset=None) -> FiedlerResult:
    """Fiedler vector of the subgraph induced by ``subset``.

    The result is unit-norm, orthogonal to the constant vector, and its first
    nonzero entry is positive.  When the induced subgraph is disconnected the
    returned direction separates the largest component from the rest, the
    eigenvalue is reported as 0 and ``connected`` is False.
    """
    idx = np.arange(l.n_nodes) if subset is None else np.asarray(subset, dtype=np.intp)
    n = idx.size
    if n < 2:
        raise InvalidInputError("Fiedler vector needs at least 2 vertices")
    lsub = induced_laplacian(l, idx)
    n_comp, labels = connected_components(-(lsub - sp.diags(lsub.diagonal())), directed=False)
    if n_comp > 1:
        counts = np.bincount(labels)
        big = labels == np.argmax(counts)
        v = np.where(big, 1.0 / big.sum(), -1.0 / (~big).sum())
        return FiedlerResult(_fix_sign(v), 0.0, False, 0, "components")

    if n <= DENSE_FIEDLER_MAX:
        val, v = _dense_fiedler(lsub.toarray())
        return FiedlerResult(_fix_sign(v), float(val), True, 0, "dense")

    # Tolerance is scaled by the Gershgorin bound on the spectrum.
    scale = max(1.0, 2.0 * lsub.diagonal().max())
    out = _lanczos_fiedler(lsub, LANCZOS_MAX_ITER, LANCZOS_TOL * scale)
    if out is None:
        log.debug("Lanczos did not converge on %d vertices, using dense solver", n)
        val, v = _dense_fiedler(lsub.toarray())
        return FiedlerResult(_fix_sign(v), float(val), True, 0, "dense")
    val, v, iters = out
    return FiedlerResult(_fix_sign(v), val, True, iters, "lanczos")


# ----------------------------------------------------------------------------
# File formats


def write_edge_list(path, g: WeightedGraph) -> None:
    """Write ``i j w`` lines (0-based, ``i < j``, one line per undirected edge)."""
    coo = sp.triu(g.weights, k=1).tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        fh.write(f"# nodes {g.n_nodes}\n")
        for k in order:
            fh.write(f"{coo.row[k]} {coo.col[k]} {coo.data[k]:.17g}\n")


def read_edge_list(path, n_nodes: int | None = None) -> WeightedGraph:
    rows, cols, vals = [], [], []
    declared = None
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "nodes":
                declared = int(parts[1])
            continue
        parts = line.split()
        if len(parts) != 3:
            raise InvalidInputError(f"malformed edge line: {line!r}")
        i, j, w = int(parts[0]), int(parts[1]), float(parts[2])
        if i == j:
            raise InvalidInputError(f"self-loop in edge list: {line!r}")
        rows.append(i)
        cols.append(j)
        vals.append(w)
    n = n_nodes or declared or (max(max(rows), max(cols)) + 1 if rows else 0)
    r, c, v = np.array(rows, dtype=np.intp), np.array(cols, dtype=np.intp), np.array(vals)
    return _graph_from_pairs(n, r, c, v)


def write_coords(path, coords) -> None:
    x = np.asarray(coords, dtype=float)
    with open(path, "w") as fh:
        for row in x:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_coords(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError:
            if rows:
                raise InvalidInputError(f"malformed coordinate line: {line!r}") from None
            continue  # header line
    x = np.array(rows, dtype=float)
    if x.ndim != 2 or x.shape[1] not in (2, 3):
        raise InvalidInputError("coordinate file must have 2 or 3 columns")
    return x
