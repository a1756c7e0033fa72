"""Recursive spectral bisection and the orthonormal graph-Haar basis.

The tree is grown breadth-first: every internal node is split by the sign
pattern of the Fiedler vector of its induced subgraph, and the ``l``-th split
(in breadth-first order) defines column ``l`` of the basis.  Column 0 is the
constant function.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DisconnectedGraphError, InvalidInputError
from .graph_core import LaplacianMatrix, fiedler_vector


class DegenerateSplitError(InvalidInputError):
    """The Fiedler vector had constant polarity on the subset."""


@dataclass(frozen=True)
class TreeNode:
    vertices: np.ndarray
    depth: int
    children: tuple[int, int] | None = None
    ordinal: int | None = None  # split index l >= 1 for internal nodes
    how: str = ""  # "fiedler", "median" or "components" for internal nodes

    @property
    def is_leaf(self) -> bool:
        return self.children is None


@dataclass(frozen=True)
class PartitionTree:
    nodes: tuple[TreeNode, ...]
    n_vertices: int

    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    @property
    def splits(self) -> list[TreeNode]:
        """Internal nodes sorted by split ordinal."""
        internal = [nd for nd in self.nodes if not nd.is_leaf]
        return sorted(internal, key=lambda nd: nd.ordinal)

    @property
    def leaves(self) -> list[TreeNode]:
        return [nd for nd in self.nodes if nd.is_leaf]

    @property
    def max_depth(self) -> int:
        return max(nd.depth for nd in self.nodes)

    def serialize(self) -> str:
        """Parenthesized vertex sets, e.g. ``((0)((1)(2)))`` for three vertices."""
        out: list[str] = []
        stack: list[object] = [0]
        while stack:
            item = stack.pop()
            if isinstance(item, str):
                out.append(item)
                continue
            nd = self.nodes[item]
            if nd.is_leaf:
                out.append("(" + " ".join(str(v) for v in nd.vertices) + ")")
            else:
                out.append("(")
                stack.extend([")", nd.children[1], nd.children[0]])
        return "".join(out)

    @classmethod
    def parse(cls, text: str) -> "PartitionTree":
        """Inverse of :meth:`serialize`; ordinals are reassigned breadth-first."""
        # nested python lists, built with an explicit stack
        root: list = []
        stack = [root]
        token = ""
        for ch in text.strip():
            if ch == "(":
                new: list = []
                stack[-1].append(new)
                stack.append(new)
            elif ch == ")":
                if token:
                    stack[-1].extend(int(t) for t in token.split())
                    token = ""
                stack.pop()
            else:
                token += ch
        if len(stack) != 1 or len(root) != 1:
            raise InvalidInputError("unbalanced tree serialization")

        def verts(node):
            acc, todo = [], [node]
            while todo:
                cur = todo.pop()
                for it in cur:
                    (todo.append(it) if isinstance(it, list) else acc.append(it))
            return np.array(sorted(acc), dtype=np.intp)

        nodes: list[dict] = []
        queue = deque([(root[0], 0)])
        ordinal = 0
        while queue:
            node, depth = queue.popleft()
            rec = {"vertices": verts(node), "depth": depth, "children": None, "ordinal": None}
            nodes.append(rec)
            subs = [it for it in node if isinstance(it, list)]
            if subs:
                if len(subs) != 2:
                    raise InvalidInputError("tree nodes must have exactly two children")
                ordinal += 1
                rec["ordinal"] = ordinal
                base = len(nodes) + len(queue)
                rec["children"] = (base, base + 1)
                queue.extend([(subs[0], depth + 1), (subs[1], depth + 1)])
        frozen = tuple(TreeNode(**r) for r in nodes)
        return cls(frozen, int(frozen[0].vertices.size))


def _median_split(values: np.ndarray, subset: np.ndarray):
    # larger values first; ties broken by vertex index
    order = np.lexsort((subset, -values))
    half = (subset.size + 1) // 2
    first = np.sort(subset[order[:half]])
    second = np.sort(subset[order[half:]])
    return first, second


def _bisect(l: LaplacianMatrix, subset: np.ndarray, policy: str):
    res = fiedler_vector(l, subset)
    v = res.vector
    pos = v >= 0
    how = "fiedler" if res.connected else "components"
    if pos.all() or not pos.any():
        if policy == "raise":
            raise DegenerateSplitError(f"constant-polarity Fiedler vector on {subset.size} vertices")
        first, second = _median_split(v, subset)
        return first, second, "median"
    return subset[pos], subset[~pos], how


def bisect(l: LaplacianMatrix, subset=None, policy: str = "median"):
    """Split ``subset`` into ``(first, second)`` by the Fiedler sign pattern.

    ``first`` collects the vertices with nonnegative Fiedler entries.  A
    constant-polarity vector either raises :class:`DegenerateSplitError`
    (``policy="raise"``) or falls back to a median threshold.
    """
    idx = np.arange(l.n_nodes) if subset is None else np.sort(np.asarray(subset, dtype=np.intp))
    if idx.size < 2:
        raise InvalidInputError("cannot bisect fewer than 2 vertices")
    if policy not in ("median", "raise"):
        raise InvalidInputError(f"unknown degenerate-split policy {policy!r}")
    first, second, _ = _bisect(l, idx, policy)
    return first, second


def build_partition_tree(l: LaplacianMatrix, allow_disconnected: bool = False) -> PartitionTree:
    """Bisect recursively, coarse to fine, down to singleton leaves.

    A disconnected graph is rejected unless ``allow_disconnected`` is set, in
    which case disconnected subsets are split into their largest component
    and the remainder.
    """
    n = l.n_nodes
    if n < 1:
        raise InvalidInputError("empty graph")
    if not allow_disconnected and n > 1 and not l.graph().is_connected():
        raise DisconnectedGraphError(
            "graph is disconnected; build one tree per connected component "
            "or pass allow_disconnected=True"
        )
    records: list[dict] = [{"vertices": np.arange(n), "depth": 0}]
    queue = deque([0])
    ordinal = 0
    while queue:
        k = queue.popleft()
        rec = records[k]
        verts = rec["vertices"]
        if verts.size == 1:
            continue
        first, second, how = _bisect(l, verts, "median")
        ordinal += 1
        rec["ordinal"] = ordinal
        rec["how"] = how
        rec["children"] = (len(records), len(records) + 1)
        for part in (first, second):
            records.append({"vertices": part, "depth": rec["depth"] + 1})
            queue.append(len(records) - 1)
    for rec in records:
        rec["vertices"].flags.writeable = False
    return PartitionTree(tuple(TreeNode(**r) for r in records), n)


@dataclass(frozen=True)
class HaarBasis:
    """Orthogonal ``N x N`` matrix; column 0 constant, then one column per split."""

    matrix: np.ndarray
    tree: PartitionTree | None = field(default=None, compare=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidInputError("basis must be a square matrix")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def sparse(self) -> sp.csc_matrix:
        cached = self.__dict__.get("_sparse")
        if cached is None:
            cached = sp.csc_matrix(self.matrix)
            object.__setattr__(self, "_sparse", cached)
        return cached

    def orthogonality_error(self) -> float:
        return float(np.abs(self.matrix.T @ self.matrix - np.eye(self.n)).max())


def build_haar_basis(tree: PartitionTree) -> HaarBasis:
    n = tree.n_vertices
    leaves = tree.leaves
    if any(leaf.vertices.size != 1 for leaf in leaves):
        raise InvalidInputError("partition tree has non-singleton leaves")
    phi = np.zeros((n, n))
    phi[:, 0] = 1.0 / np.sqrt(n)
    for nd in tree.splits:
        one = tree.nodes[nd.children[0]].vertices
        two = tree.nodes[nd.children[1]].vertices
        n1, n2 = one.size, two.size
        tot = np.sqrt(n1 + n2)
        phi[one, nd.ordinal] = np.sqrt(n2) / (np.sqrt(n1) * tot)
        phi[two, nd.ordinal] = -np.sqrt(n1) / (np.sqrt(n2) * tot)
    return HaarBasis(phi, tree)


def haar_basis_from_laplacian(l: LaplacianMatrix, allow_disconnected: bool = False) -> HaarBasis:
    return build_haar_basis(build_partition_tree(l, allow_disconnected=allow_disconnected))


# ----------------------------------------------------------------------------
# Container: raw float64 little-endian column-major data + text header


def write_matrix_container(prefix, matrix: np.ndarray, header: dict) -> tuple[Path, Path]:
    prefix = Path(prefix)
    data_path = prefix.with_suffix(".bin")
    hdr_path = prefix.with_suffix(".hdr")
    m = np.asarray(matrix, dtype="<f8")
    data_path.write_bytes(m.tobytes(order="F"))
    lines = [
        "dtype=float64-le",
        "order=column-major",
        f"rows={m.shape[0]}",
        f"cols={m.shape[1]}",
    ]
    lines += [f"{k}={v}" for k, v in header.items()]
    hdr_path.write_text("\n".join(lines) + "\n")
    return data_path, hdr_path


def read_matrix_container(prefix) -> tuple[np.ndarray, dict]:
    prefix = Path(prefix)
    hdr: dict[str, str] = {}
    for line in prefix.with_suffix(".hdr").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            hdr[k.strip()] = v.strip()
    rows, cols = int(hdr["rows"]), int(hdr["cols"])
    raw = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f8")
    if raw.size != rows * cols:
        raise InvalidInputError(f"container holds {raw.size} values, header says {rows}x{cols}")
    return raw.reshape((rows, cols), order="F").astype(float), hdr


def write_basis(prefix, basis: HaarBasis):
    header = {"kind": "graph-haar-basis", "n": basis.n, "column_order": "constant,breadth-first-splits"}
    if basis.tree is not None:
        header["tree"] = basis.tree.serialize()
    return write_matrix_container(prefix, basis.matrix, header)


def read_basis(prefix) -> HaarBasis:
    m, hdr = read_matrix_container(prefix)
    tree = PartitionTree.parse(hdr["tree"]) if "tree" in hdr else None
    return HaarBasis(m, tree)
