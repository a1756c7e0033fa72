import math

import numpy as np
import pytest

from conftest import path_laplacian, random_orthogonal, random_rbf_graph
from gems.data import (
    SignalSet,
    add_noise,
    atom_usage,
    bfs_region,
    denoise_benchmark,
    gen_piecewise_smooth,
    gen_smooth_signals,
    grid_graph,
    ingest_geo_events,
    mterm_benchmark,
    normalize_max_energy,
    normalize_unit,
    normalized_rmse,
    random_split,
    read_signals,
    reconstruct,
    write_signals,
    write_table,
)
from gems.errors import InvalidInputError
from gems.graph_core import laplacian


@pytest.fixture(scope="module")
def graph32():
    coords, g = random_rbf_graph(32, 4, knn=6)
    return coords, g, laplacian(g)


def dirichlet(lm, y):
    return np.einsum("ij,ij->j", y, lm @ y)


# ---------------------------------------------------------------- generators


def test_smooth_small_lambda_is_identity(graph32):
    _, _, lap = graph32
    y = gen_smooth_signals(lap, 20, 1e-8, 3).matrix
    y0 = np.random.default_rng(3).standard_normal((32, 20))
    assert np.abs(y - y0).max() < 1e-6


def test_smoothing_lowers_dirichlet_energy(graph32):
    _, _, lap = graph32
    y = gen_smooth_signals(lap, 50, 10.0, 1).matrix
    y0 = np.random.default_rng(1).standard_normal((32, 50))
    lm = lap.toarray()
    assert np.all(dirichlet(lm, y) < dirichlet(lm, y0))


def test_smooth_solves_regularized_system(graph32):
    _, _, lap = graph32
    y = gen_smooth_signals(lap, 5, 2.0, 0).matrix
    y0 = np.random.default_rng(0).standard_normal((32, 5))
    np.testing.assert_allclose((np.eye(32) + 2.0 * lap.toarray()) @ y, y0, atol=1e-10)


def test_smooth_rejects_bad_lambda(graph32):
    with pytest.raises(InvalidInputError):
        gen_smooth_signals(graph32[2], 5, 0.0, 0)


def test_bfs_region_on_path():
    lap = path_laplacian(9)
    g = lap.graph()
    np.testing.assert_array_equal(np.sort(bfs_region(g, 4, 3)), [3, 4, 5])
    assert bfs_region(g, 0, 1).tolist() == [0]
    assert sorted(bfs_region(g, 0, 9).tolist()) == list(range(9))


def _components(lap, seed, m):
    s1, s2, _, _ = np.random.SeedSequence(seed).spawn(4)
    y1 = gen_smooth_signals(lap, m, 10.0, np.random.default_rng(s1)).matrix
    y2 = gen_smooth_signals(lap, m, 10.0, np.random.default_rng(s2)).matrix
    return normalize_unit(y1), normalize_unit(y2)


def test_region_size_limits(graph32):
    coords, _, lap = graph32
    y1, y2 = _components(lap, 7, 40)
    lo = gen_piecewise_smooth(lap, coords, 40, region_size=0.0, seed=7)
    hi = gen_piecewise_smooth(lap, coords, 40, region_size=1.0, seed=7)
    np.testing.assert_allclose(lo.matrix, y1, atol=1e-14)
    np.testing.assert_allclose(hi.matrix, y2, atol=1e-14)
    with pytest.raises(InvalidInputError):
        gen_piecewise_smooth(lap, coords, 40, region_size=1.5)


def test_piecewise_signals_are_rougher(graph32):
    coords, _, lap = graph32
    s = gen_piecewise_smooth(lap, coords, 100, seed=3)
    y1, _ = _components(lap, 3, 100)
    lm = lap.toarray()
    assert dirichlet(lm, s.matrix).mean() > dirichlet(lm, y1).mean()


def test_piecewise_defaults_and_invariants(graph32):
    coords, _, lap = graph32
    s = gen_piecewise_smooth(lap, coords, seed=0)
    assert s.m == 320 and s.normalization == "unit-norm"
    np.testing.assert_allclose(np.linalg.norm(s.matrix, axis=0), 1.0)
    assert (s.split == "train").sum() == 128
    assert s.train().shape[1] + s.test().shape[1] == 320


def test_generators_are_deterministic(graph32):
    coords, _, lap = graph32
    a = gen_piecewise_smooth(lap, coords, 50, seed=11)
    b = gen_piecewise_smooth(lap, coords, 50, seed=11)
    assert a.matrix.tobytes() == b.matrix.tobytes()
    assert np.array_equal(a.split, b.split)
    c = gen_piecewise_smooth(lap, coords, 50, seed=12)
    assert not np.array_equal(a.matrix, c.matrix)


def test_signal_set_validation():
    with pytest.raises(InvalidInputError):
        SignalSet(np.zeros(3), ["none"] * 3)
    with pytest.raises(InvalidInputError):
        SignalSet(np.zeros((2, 3)), ["none"] * 2)
    with pytest.raises(InvalidInputError):
        SignalSet(np.zeros((2, 2)), ["none", "dev"])
    s = SignalSet(np.ones((2, 2)), ["train", "test"])
    with pytest.raises(ValueError):
        s.matrix[0, 0] = 3.0


def test_random_split_sizes(rng):
    lab = random_split(10, 0.4, rng)
    assert (lab == "train").sum() == 4 and (lab == "test").sum() == 6


def test_normalizers(rng):
    y = rng.standard_normal((4, 6))
    y[:, 2] = 0
    u = normalize_unit(y)
    np.testing.assert_allclose(np.linalg.norm(u[:, [0, 1, 3, 4, 5]], axis=0), 1.0)
    assert not np.any(u[:, 2])
    m, top = normalize_max_energy(y)
    assert top == pytest.approx(np.linalg.norm(y, axis=0).max())
    assert np.linalg.norm(m, axis=0).max() == pytest.approx(1.0)


# ---------------------------------------------------------------- ingestion


def test_ingest_single_event():
    events = [("2014-04-01T00:10:00Z", 40.7, -74.0)]
    coords, s, rep = ingest_geo_events(events, (3, 3), min_count=1)
    assert s.n == 1 and s.m == 1 and rep.nodes_kept == 1
    assert s.scale == 1.0 and s.matrix[0, 0] == 1.0
    with pytest.raises(InvalidInputError):
        ingest_geo_events(events, (3, 3), min_count=2)


def test_ingest_recovers_known_counts(tmp_path):
    rng = np.random.default_rng(0)
    # 4 x 5 grid over [0, 3] x [0, 4], three hourly bins
    true = rng.integers(0, 6, size=(20, 3))
    rows = []
    for cell in range(20):
        la, lo = divmod(cell, 5)
        for b in range(3):
            for _ in range(true[cell, b]):
                t = 3600 * (100 + b) + float(rng.uniform(0, 3599))
                jitter = rng.uniform(-0.4, 0.4, 2)
                rows.append((t, min(max(la + jitter[0], 0), 3), min(max(lo + jitter[1], 0), 4)))
    rows.append((3600 * 100.0, 0.0, 0.0))  # pins the bounds
    rows.append((3600 * 102.0 + 1, 3.0, 4.0))
    true[0, 0] += 1
    true[19, 2] += 1
    rng.shuffle(rows)
    path = tmp_path / "events.csv"
    with open(path, "w") as fh:
        fh.write("timestamp,lat,lon\n")
        for t, la, lo in rows:
            fh.write(f"{float(t)!r},{float(la)!r},{float(lo)!r}\n")
        fh.write("not-a-time,1,2\n")
        fh.write("2014-04-01T00:00:00,abc,2\n")
    _, s, rep = ingest_geo_events(path, (4, 5), min_count=1, bounds=(0, 3, 0, 4))
    assert rep.rows_skipped == 2 and rep.bins == 3
    kept = rep.grid_index
    np.testing.assert_array_equal(kept, np.flatnonzero(true.sum(axis=1) >= 1))
    np.testing.assert_allclose(s.matrix * s.scale, true[kept], atol=1e-12)


def test_ingest_threshold_and_timestamps():
    events = [
        ("2014-04-01T00:05:00Z", 0.0, 0.0),
        ("2014-04-01T00:20:00+00:00", 0.0, 0.0),
        ("2014-04-01T01:30:00", 1.0, 1.0),
        ("2014-04-01T02:59:59.5", 0.0, 0.0),
    ]
    _, s, rep = ingest_geo_events(events, (2, 2), min_count=2)
    assert rep.nodes_kept == 1 and rep.bins == 3
    np.testing.assert_allclose(s.matrix * s.scale, [[2.0, 0.0, 1.0]])


def test_ingest_errors(tmp_path):
    with pytest.raises(InvalidInputError):
        ingest_geo_events([("junk", "x", "y")], (3, 3))
    with pytest.raises(InvalidInputError):
        ingest_geo_events([(0.0, 1.0, 1.0)], (1, 3))


def test_grid_graph_default_width(rng):
    coords = rng.uniform(size=(30, 2))
    g = grid_graph(coords, knn=4)
    assert g.n_nodes == 30
    gi = grid_graph(coords, knn=4, kernel="inverse")
    assert gi.n_nodes == 30
    with pytest.raises(InvalidInputError):
        grid_graph(coords, kernel="cosine")


# ---------------------------------------------------------------- noise, metrics


def test_noise_zero_is_identity(rng):
    y = rng.standard_normal((5, 7))
    np.testing.assert_array_equal(add_noise(y, 0.0, 1), y)
    with pytest.raises(InvalidInputError):
        add_noise(y, -1.0, 1)


def test_noise_std(rng):
    y = rng.standard_normal((100, 1000))
    e = add_noise(y, 0.3, 2) - y
    assert abs(e.std() - 0.3) < 0.02 * 0.3
    np.testing.assert_array_equal(add_noise(y, 0.3, 2), add_noise(y, 0.3, 2))


def test_rmse_examples(rng):
    y = rng.standard_normal((4, 6))
    assert normalized_rmse(y, y) == 0.0
    assert normalized_rmse(y, y - 1.0) == pytest.approx(1.0, abs=1e-15)
    z = rng.standard_normal((4, 6))
    naive = math.sqrt(sum((y[i, j] - z[i, j]) ** 2 for i in range(4) for j in range(6)) / 24)
    assert abs(normalized_rmse(y, z) - naive) < 1e-12
    with pytest.raises(InvalidInputError):
        normalized_rmse(y, z[:, :3])


# ---------------------------------------------------------------- benchmarks


def test_mterm_full_basis_is_exact(rng):
    phi = random_orthogonal(16, rng)
    y = rng.standard_normal((16, 30))
    tab = mterm_benchmark({"phi": phi}, y, [16])
    assert tab["phi"][16] < 1e-10


def test_mterm_non_increasing_in_t(graph32, rng):
    coords, _, lap = graph32
    y = gen_piecewise_smooth(lap, coords, 60, seed=2).matrix
    ok = total = 0
    for trial in range(5):
        d = rng.standard_normal((32, 64))
        d /= np.linalg.norm(d, axis=0)
        row = mterm_benchmark({"d": d}, y, range(1, 13))["d"]
        for t in range(1, 12):
            total += 1
            ok += row[t + 1] <= row[t] + 1e-12
    assert ok >= 0.95 * total


def test_mterm_rejects_empty():
    with pytest.raises(InvalidInputError):
        mterm_benchmark({}, np.zeros((3, 3)), [1])
    with pytest.raises(InvalidInputError):
        denoise_benchmark({}, np.zeros((3, 3)), [0.1], 1)


def test_denoise_zero_noise_is_mterm(rng):
    phi = random_orthogonal(12, rng)
    y = rng.standard_normal((12, 20))
    tab = denoise_benchmark({"phi": phi}, y, [0.0, 0.2], t=4)
    ref = mterm_benchmark({"phi": phi}, y, [4])
    assert tab["phi"][0.0] == ref["phi"][4]
    assert tab["noisy"][0.0] == 0.0
    assert tab["noisy"][0.2] == pytest.approx(0.2 * np.std(y), rel=0.15)
    again = denoise_benchmark({"phi": phi}, y, [0.0, 0.2], t=4)
    assert again == tab


def test_reconstruct_and_usage(rng):
    d = np.eye(5)
    y = rng.standard_normal((5, 8))
    y_hat, codes = reconstruct(d, y, 5)
    np.testing.assert_allclose(y_hat, y, atol=1e-14)
    use = atom_usage(d, y, 2)
    assert use.sum() == 16 and use.shape == (5,)


# ---------------------------------------------------------------- files


def test_signal_container_roundtrip(tmp_path, graph32):
    coords, _, lap = graph32
    s = gen_piecewise_smooth(lap, coords, 30, seed=1)
    write_signals(tmp_path / "sig", s)
    r = read_signals(tmp_path / "sig")
    assert r.matrix.tobytes() == s.matrix.tobytes()
    assert np.array_equal(r.split, s.split) and r.normalization == "unit-norm"
    m, top = normalize_max_energy(s.matrix * 7.5)
    write_signals(tmp_path / "sig2", SignalSet(m, np.full(30, "none"), "max-energy", top))
    assert read_signals(tmp_path / "sig2").scale == top


def test_write_table(tmp_path):
    import json

    write_table(tmp_path / "t.csv", {"a": {6: 0.5, 12: 0.25}}, "T")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines == ["dictionary,T,value", "a,6,0.5", "a,12,0.25"]
    assert json.loads((tmp_path / "t.json").read_text()) == {"a": {"6": 0.5, "12": 0.25}}
