"""Signal generation, geo-event ingestion, noise, metrics and benchmark tables."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidInputError
from .graph_core import (
    LaplacianMatrix,
    WeightedGraph,
    build_inverse_distance_graph,
    build_rbf_graph,
    median_neighbor_distance,
)
from .sparse_coding import omp_batch
from .wavelet import read_matrix_container, write_matrix_container

log = logging.getLogger(__name__)

NORMALIZATIONS = ("none", "unit-norm", "max-energy")
_SPLIT_CODES = {"train": "R", "test": "T", "none": "-"}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}


@dataclass(frozen=True)
class SignalSet:
    """Signals as columns of ``matrix`` plus per-signal split labels."""

    matrix: np.ndarray
    split: np.ndarray
    normalization: str = "none"
    scale: float = 1.0  # divisor applied by max-energy normalization

    def __post_init__(self):
        y = np.array(self.matrix, dtype=float)
        if y.ndim != 2:
            raise InvalidInputError("signal matrix must be 2-D (N x M)")
        split = np.asarray(self.split, dtype="<U5")
        if split.shape != (y.shape[1],):
            raise InvalidInputError("need one split label per signal")
        if not set(np.unique(split)) <= set(_SPLIT_CODES):
            raise InvalidInputError(f"split labels must be among {sorted(_SPLIT_CODES)}")
        if self.normalization not in NORMALIZATIONS:
            raise InvalidInputError(f"unknown normalization {self.normalization!r}")
        y.flags.writeable = False
        split.flags.writeable = False
        object.__setattr__(self, "matrix", y)
        object.__setattr__(self, "split", split)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def m(self) -> int:
        return self.matrix.shape[1]

    def train(self) -> np.ndarray:
        return self.matrix[:, self.split == "train"]

    def test(self) -> np.ndarray:
        return self.matrix[:, self.split == "test"]

    def with_split(self, split) -> "SignalSet":
        return SignalSet(self.matrix, split, self.normalization, self.scale)


def random_split(m: int, train_fraction: float, rng) -> np.ndarray:
    n_train = int(round(train_fraction * m))
    labels = np.full(m, "test", dtype="<U5")
    labels[rng.permutation(m)[:n_train]] = "train"
    return labels


def normalize_unit(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    nrm = np.linalg.norm(y, axis=0)
    nrm[nrm == 0] = 1.0
    return y / nrm


def normalize_max_energy(y) -> tuple[np.ndarray, float]:
    """Divide every signal by the norm of the most energetic one."""
    y = np.asarray(y, dtype=float)
    top = float(np.linalg.norm(y, axis=0).max()) if y.size else 0.0
    top = top or 1.0
    return y / top, top


def random_coords(n: int, seed: int, side: float = 1.0, dim: int = 2) -> np.ndarray:
    """``n`` points uniform in ``[0, side]^dim``."""
    return np.random.default_rng(seed).uniform(0.0, side, size=(n, dim))


def _smooth(l: LaplacianMatrix, y0: np.ndarray, lam: float) -> np.ndarray:
    n = l.n_nodes
    sys = (sp.identity(n, format="csc") + lam * l.matrix).tocsc()
    return spla.splu(sys).solve(y0)


def gen_smooth_signals(l: LaplacianMatrix, m_count: int, lam: float, seed: int) -> SignalSet:
    """``Y = (I + lam L)^{-1} Y0`` with i.i.d. standard normal ``Y0``."""
    if not lam > 0:
        raise InvalidInputError(f"lambda must be positive, got {lam}")
    y0 = np.random.default_rng(seed).standard_normal((l.n_nodes, m_count))
    return SignalSet(_smooth(l, y0, lam), np.full(m_count, "none"), "none")


def bfs_region(g: WeightedGraph, seed_node: int, size: int, coords=None) -> np.ndarray:
    """The ``size`` vertices closest to ``seed_node`` in hop count.

    Within a hop layer, vertices nearer to the seed in ``coords`` (or with the
    lower index when no coordinates are given) come first.
    """
    n = g.n_nodes
    size = min(max(size, 0), n)
    if size == 0:
        return np.zeros(0, dtype=np.intp)
    w = g.weights
    hops = np.full(n, -1)
    hops[seed_node] = 0
    queue = deque([seed_node])
    while queue:
        u = queue.popleft()
        for v in w.indices[w.indptr[u] : w.indptr[u + 1]]:
            if hops[v] < 0:
                hops[v] = hops[u] + 1
                queue.append(v)
    hops = np.where(hops < 0, n + 1, hops)
    if coords is not None:
        c = np.asarray(coords, dtype=float)
        dist = np.linalg.norm(c - c[seed_node], axis=1)
    else:
        dist = np.zeros(n)
    order = np.lexsort((np.arange(n), dist, hops))
    return np.sort(order[:size])


def gen_piecewise_smooth(
    l: LaplacianMatrix,
    coords=None,
    m_count: int | None = None,
    lam: float = 10.0,
    region_size: float = 0.25,
    seed: int = 0,
    train_fraction: float = 0.4,
) -> SignalSet:
    """Piecewise-smooth signals from two independent smooth sets.

    For every signal a BFS ball of ``ceil(region_size * N)`` vertices around a
    uniformly drawn seed vertex takes its values from the second smooth set
    and the rest of the graph from the first.  Signals are scaled to unit norm
    and a random ``train_fraction`` of them is labelled for training.
    """
    if not 0.0 <= region_size <= 1.0:
        raise InvalidInputError(f"region_size must lie in [0, 1], got {region_size}")
    n = l.n_nodes
    m_count = m_count if m_count is not None else 10 * n
    s1, s2, s_nodes, s_split = np.random.SeedSequence(seed).spawn(4)
    y1 = gen_smooth_signals(l, m_count, lam, np.random.default_rng(s1)).matrix
    y2 = gen_smooth_signals(l, m_count, lam, np.random.default_rng(s2)).matrix
    g = l.graph()
    size = int(math.ceil(region_size * n - 1e-12))
    centers = np.random.default_rng(s_nodes).integers(0, n, size=m_count)
    y = y1.copy()
    for i, c in enumerate(centers):
        region = bfs_region(g, int(c), size, coords)
        y[region, i] = y2[region, i]
    y = normalize_unit(y)
    split = random_split(m_count, train_fraction, np.random.default_rng(s_split))
    return SignalSet(y, split, "unit-norm")


def add_noise(y, sigma_n: float, seed: int) -> np.ndarray:
    """Add i.i.d. ``N(0, sigma_n^2)`` noise to every entry."""
    y = y.matrix if isinstance(y, SignalSet) else np.asarray(y, dtype=float)
    if sigma_n < 0:
        raise InvalidInputError("noise level must be nonnegative")
    if sigma_n == 0:
        return np.array(y, dtype=float)
    return y + sigma_n * np.random.default_rng(seed).standard_normal(y.shape)


def normalized_rmse(y, y_hat) -> float:
    """``||Y - Y_hat||_F / sqrt(N M)``."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise InvalidInputError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    return float(np.linalg.norm(y - y_hat) / np.sqrt(y.size))


def reconstruct(d, y, t: int) -> tuple[np.ndarray, object]:
    codes = omp_batch(d, y, t)
    y_hat = np.asarray((codes.matrix.T @ np.asarray(d).T).T)
    return y_hat, codes


def mterm_benchmark(dictionaries: dict, y_test, sparsity_levels) -> dict:
    """RMSE of plain-OMP ``T``-term approximations, ``{name: {T: rmse}}``."""
    if not dictionaries:
        raise InvalidInputError("no dictionaries to benchmark")
    y_test = np.asarray(y_test, dtype=float)
    table: dict = {}
    for name, d in dictionaries.items():
        row = {}
        for t in sparsity_levels:
            y_hat, _ = reconstruct(d, y_test, int(t))
            row[int(t)] = normalized_rmse(y_test, y_hat)
        table[name] = row
    return table


def denoise_benchmark(dictionaries: dict, y_test, noise_levels, t: int, seed: int = 0, relative: bool = True) -> dict:
    """Denoising RMSE against the clean signals, ``{name: {level: rmse}}``.

    Noise levels are multiples of the data standard deviation when
    ``relative`` is true.  Every dictionary sees the same noise realization;
    the extra row ``"noisy"`` reports the error of the unprocessed input.
    """
    if not dictionaries:
        raise InvalidInputError("no dictionaries to benchmark")
    y_test = np.asarray(y_test, dtype=float)
    sigma_d = float(np.std(y_test)) if relative else 1.0
    table: dict = {name: {} for name in dictionaries}
    table["noisy"] = {}
    for k, level in enumerate(noise_levels):
        noisy = add_noise(y_test, float(level) * sigma_d, seed + k)
        table["noisy"][float(level)] = normalized_rmse(y_test, noisy)
        for name, d in dictionaries.items():
            y_hat, _ = reconstruct(d, noisy, t)
            table[name][float(level)] = normalized_rmse(y_test, y_hat)
    return table


def atom_usage(d, y, t: int) -> np.ndarray:
    """How many signals of ``y`` select each atom when coded with ``t`` atoms."""
    return omp_batch(d, y, t).usage()


def write_table(path_csv, table: dict, param_name: str = "param") -> None:
    """CSV ``dictionary,param,value`` plus a JSON mirror next to it."""
    path_csv = Path(path_csv)
    with open(path_csv, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["dictionary", param_name, "value"])
        for name, row in table.items():
            for param, val in row.items():
                wr.writerow([name, param, repr(float(val))])
    mirror = {name: {str(k): float(v) for k, v in row.items()} for name, row in table.items()}
    path_csv.with_suffix(".json").write_text(json.dumps(mirror, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# Geo events


_FRACTION = re.compile(r"(T\d{2}:\d{2}:\d{2})\.(\d+)")


def _parse_time(text: str) -> float:
    """Seconds since the epoch from an ISO-8601 string or a plain number."""
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    # fromisoformat before 3.11 wants exactly 3 or 6 fractional digits
    text = _FRACTION.sub(lambda m: f"{m.group(1)}.{m.group(2)[:6].ljust(6, '0')}", text)
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.timestamp()


@dataclass(frozen=True)
class IngestReport:
    rows_read: int
    rows_skipped: int
    nodes_kept: int
    bins: int
    grid_index: np.ndarray = field(repr=False)  # flat row-major grid index of each kept node


def ingest_geo_events(
    events,
    grid: tuple[int, int],
    bin_seconds: float = 3600.0,
    min_count: int = 1,
    bounds: tuple[float, float, float, float] | None = None,
    train_fraction: float | None = None,
    seed: int = 0,
):
    """Aggregate ``(timestamp, lat, lon)`` events into grid-node count signals.

    Parameters
    ----------
    events : path or iterable of rows
        CSV with header ``timestamp,lat,lon`` (ISO-8601 timestamps), or an
        iterable of ``(timestamp, lat, lon)`` tuples.
    grid : (rows, cols)
        Number of grid points along latitude and longitude.
    bin_seconds : float
        Width of the time bins; bins are aligned to the Unix epoch.
    min_count : int
        Grid points with fewer events overall are dropped.
    bounds : (lat_min, lat_max, lon_min, lon_max), optional
        Grid extent; defaults to the bounding box of the events.
    train_fraction : float, optional
        If given, label a random subset of the signals for training.

    Returns
    -------
    coords : ndarray of shape (N, 2)
        ``(lat, lon)`` of the kept grid points.
    signals : SignalSet
        One signal per time bin between the first and last event, scaled by
        the norm of the most energetic signal.
    report : IngestReport
    """
    rows_g, cols_g = grid
    if rows_g < 2 or cols_g < 2:
        raise InvalidInputError("grid must be at least 2 x 2")
    if isinstance(events, (str, Path)):
        with open(events, newline="") as fh:
            raw = list(csv.reader(fh))
        if raw and [c.strip().lower() for c in raw[0]] == ["timestamp", "lat", "lon"]:
            raw = raw[1:]
    else:
        raw = list(events)
    times, lats, lons = [], [], []
    skipped = 0
    for row in raw:
        try:
            ts, la, lo = row
            t_val = ts if isinstance(ts, (int, float)) else _parse_time(str(ts))
            la, lo = float(la), float(lo)
            if not (math.isfinite(la) and math.isfinite(lo)):
                raise ValueError
        except (ValueError, TypeError):
            skipped += 1
            continue
        times.append(float(t_val))
        lats.append(la)
        lons.append(lo)
    if skipped:
        log.warning("skipped %d unparseable event rows", skipped)
    if not times:
        raise InvalidInputError("no parseable events")
    times_a, lats_a, lons_a = np.array(times), np.array(lats), np.array(lons)
    if bounds is None:
        bounds = (lats_a.min(), lats_a.max(), lons_a.min(), lons_a.max())
    lat0, lat1, lon0, lon1 = map(float, bounds)
    inside = (lats_a >= lat0) & (lats_a <= lat1) & (lons_a >= lon0) & (lons_a <= lon1)
    times_a, lats_a, lons_a = times_a[inside], lats_a[inside], lons_a[inside]
    if times_a.size == 0:
        raise InvalidInputError("no events inside the grid bounds")

    def snap(v, lo, hi, count):
        if hi == lo:
            return np.zeros(v.size, dtype=np.intp)
        return np.clip(np.rint((v - lo) / (hi - lo) * (count - 1)), 0, count - 1).astype(np.intp)

    gi = snap(lats_a, lat0, lat1, rows_g) * cols_g + snap(lons_a, lon0, lon1, cols_g)
    bins = np.floor(times_a / bin_seconds).astype(np.int64)
    b0 = bins.min()
    n_bins = int(bins.max() - b0 + 1)
    totals = np.bincount(gi, minlength=rows_g * cols_g)
    kept = np.flatnonzero(totals >= min_count)
    if kept.size == 0:
        raise InvalidInputError("no grid point reaches min_count events")
    node_of = np.full(rows_g * cols_g, -1)
    node_of[kept] = np.arange(kept.size)
    sel = node_of[gi] >= 0
    counts = np.zeros((kept.size, n_bins))
    np.add.at(counts, (node_of[gi[sel]], bins[sel] - b0), 1.0)
    lat_axis = np.linspace(lat0, lat1, rows_g)
    lon_axis = np.linspace(lon0, lon1, cols_g)
    coords = np.column_stack([lat_axis[kept // cols_g], lon_axis[kept % cols_g]])
    y, top = normalize_max_energy(counts)
    if train_fraction is None:
        split = np.full(n_bins, "none")
    else:
        split = random_split(n_bins, train_fraction, np.random.default_rng(seed))
    report = IngestReport(len(raw), skipped, int(kept.size), n_bins, kept)
    return coords, SignalSet(y, split, "max-energy", top), report


def grid_graph(coords, knn: int = 8, kernel: str = "rbf", sigma: float | None = None) -> WeightedGraph:
    """kNN graph over grid nodes; RBF width defaults to the median nearest-neighbour distance."""
    knn = min(knn, len(coords) - 1)
    if kernel == "inverse":
        return build_inverse_distance_graph(coords, knn=knn)
    if kernel != "rbf":
        raise InvalidInputError(f"unknown kernel {kernel!r}")
    sigma = sigma or median_neighbor_distance(coords, 1) or 1.0
    return build_rbf_graph(coords, sigma, knn=knn)


# ----------------------------------------------------------------------------
# Signal container


def write_signals(prefix, s: SignalSet):
    header = {
        "kind": "signals",
        "n": s.n,
        "m": s.m,
        "normalization": s.normalization,
        "scale": repr(float(s.scale)),
        "split": "".join(_SPLIT_CODES[v] for v in s.split),
    }
    return write_matrix_container(prefix, s.matrix, header)


def read_signals(prefix) -> SignalSet:
    y, hdr = read_matrix_container(prefix)
    split = np.array([_SPLIT_NAMES[c] for c in hdr.get("split", "-" * y.shape[1])])
    return SignalSet(y, split, hdr.get("normalization", "none"), float(hdr.get("scale", 1.0)))
