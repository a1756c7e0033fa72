"""Command-line front end: ``gems <command> [options]``.

Every command resolves a single JSON configuration (defaults, then the file
given by ``--config``, then explicit flags), runs, and writes a
``manifest.json`` next to its outputs.  Passing that manifest back through
``--config`` reruns the command with the identical configuration.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import hashlib
import json
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import data as gdata
from .dict_learning import (
    DeadAtomError,
    SparseDict,
    TrainConfig,
    gems_train,
    init_sparse_dict,
    ksvd_train,
    read_sparse_matrix,
    write_sparse_matrix,
    write_trace,
)
from .errors import GemsError, InvalidInputError, NumericalError
from .graph_core import (
    build_rbf_graph,
    laplacian,
    read_edge_list,
    write_coords,
    write_edge_list,
)
from .laplacian_learning import LaplacianLearnConfig, adaptive_train, learn_laplacian
from .sparse_coding import manifold_laplacian, omp_batch, write_codes
from .wavelet import haar_basis_from_laplacian, read_basis, read_matrix_container, write_basis, write_matrix_container

log = logging.getLogger("gems")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
MODES = ("gems", "gems-hd", "ksvd")
DICTIONARY_NAMES = ("gems", "gems-hd", "gems-adaptive", "gems-hd-adaptive", "ksvd", "phi")
SYNTH_SIGMA = 0.5  # RBF width for unit-square synthetic graphs


class ConfigError(InvalidInputError):
    """The resolved configuration is invalid."""


DEFAULTS: dict = {
    "seed": None,
    "threads": 1,
    "data": {
        "source": "synth",  # synth | events
        "n": 256,
        "lambda": 10.0,
        "region_size": 0.25,
        "m_count": None,  # defaults to 10 N
        "train_fraction": 0.4,
        "events": None,
        "grid": [150, 150],
        "bin_seconds": 3600.0,
        "min_count": 1000,
        "bounds": None,
    },
    # sigma null: 0.5 for synthetic unit-square graphs, median neighbour distance for grids
    "graph": {"kernel": "rbf", "sigma": None, "knn": 8, "allow_disconnected": False},
    "inputs": {"signals": None, "graph": None, "basis": None, "model": None},
    "mode": "gems",
    "adaptive": False,
    # the training seed is the top-level seed
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
    "learn": LaplacianLearnConfig().to_dict(),
    "encode": {"t": 12, "split": "test"},
    "denoise": {"noise_levels": [0.1, 0.2, 0.4], "t": 12, "split": "test", "relative": True},
    "benchmark": {
        "dictionaries": ["gems", "gems-hd", "ksvd", "phi"],
        "sparsity_levels": [6, 12, 20],
        "noise_levels": [0.1, 0.2, 0.4],
        "t_denoise": 12,
    },
}

# commands whose results depend on the seed
SEEDED = {"synth", "train", "denoise", "benchmark"}


# ----------------------------------------------------------------------------
# Configuration


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown configuration key {where}{key!r}")
        if isinstance(base[key], dict) and base[key] and key != "train" and key != "learn":
            if not isinstance(val, dict):
                raise ConfigError(f"configuration section {where}{key!r} must be an object")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        elif key in ("train", "learn"):
            if not isinstance(val, dict):
                raise ConfigError(f"configuration section {key!r} must be an object")
            sect = dict(base[key])
            sect.update(val)
            out[key] = sect
        else:
            out[key] = val
    return out


def load_config(path, command: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"configuration file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"configuration file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    if "command" in doc and "config" in doc:
        # a manifest from an earlier run
        if doc["command"] != command:
            raise ConfigError(f"manifest was written by {doc['command']!r}, not {command!r}")
        doc = doc["config"]
    return doc


def resolve_config(command: str, config_path, overrides: dict) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if config_path:
        cfg = _merge(cfg, load_config(config_path, command))
    for dotted, val in overrides.items():
        if val is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = val
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    try:
        sect = dict(cfg["train"])
        if "seed" in sect:
            raise ConfigError("set the training seed through the top-level \"seed\"")
        return TrainConfig.from_dict({**sect, "seed": cfg["seed"] or 0})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def learn_config(cfg: dict) -> LaplacianLearnConfig:
    try:
        return LaplacianLearnConfig.from_dict(cfg["learn"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _need(cfg: dict, key: str, what: str, suffixes=("",)) -> Path:
    val = cfg["inputs"].get(key)
    if not val:
        raise ConfigError(f"{what} is required (--{key} or inputs.{key})")
    p = Path(val)
    if not any((p.with_suffix(s) if s else p).exists() for s in suffixes):
        raise ConfigError(f"{what} not found: {val}")
    return p


def validate(command: str, cfg: dict) -> None:
    if command in SEEDED and cfg["seed"] is None:
        raise ConfigError("a seed is required (--seed or \"seed\" in the config)")
    if cfg["seed"] is not None and (not isinstance(cfg["seed"], int) or cfg["seed"] < 0):
        raise ConfigError("seed must be a nonnegative integer")
    if cfg["threads"] is not None and (not isinstance(cfg["threads"], int) or cfg["threads"] < 1):
        raise ConfigError("threads must be a positive integer")
    if cfg["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if cfg["data"]["source"] not in ("synth", "events"):
        raise ConfigError("data.source must be 'synth' or 'events'")
    if cfg["graph"]["kernel"] not in ("rbf", "inverse"):
        raise ConfigError("graph.kernel must be 'rbf' or 'inverse'")
    train_config(cfg)
    learn_config(cfg)
    if command == "synth" and cfg["data"]["source"] == "events":
        if not cfg["data"]["events"] or not Path(cfg["data"]["events"]).exists():
            raise ConfigError(f"events file not found: {cfg['data']['events']}")
    if command == "build-basis":
        _need(cfg, "graph", "graph edge list")
    if command == "train":
        _need(cfg, "signals", "signal container", (".hdr",))
        _need(cfg, "graph", "graph edge list")
        if cfg["inputs"]["basis"]:
            _need(cfg, "basis", "basis container", (".hdr",))
    if command in ("encode", "denoise", "learn-graph"):
        _need(cfg, "model", "model bundle")
    if command in ("encode", "denoise"):
        _need(cfg, "signals", "signal container", (".hdr",))
        split = cfg[command]["split"]
        if split not in ("train", "test", "all"):
            raise ConfigError(f"{command}.split must be 'train', 'test' or 'all'")
    if command == "benchmark":
        names = cfg["benchmark"]["dictionaries"]
        if not names:
            raise ConfigError("benchmark.dictionaries is empty")
        bad = [n for n in names if n not in DICTIONARY_NAMES]
        if bad:
            raise ConfigError(f"unknown dictionaries {bad}; choose from {DICTIONARY_NAMES}")
        if bool(cfg["inputs"]["signals"]) != bool(cfg["inputs"]["graph"]):
            raise ConfigError("benchmark needs both --signals and --graph, or neither (synthesize)")
        if cfg["inputs"]["signals"]:
            _need(cfg, "signals", "signal container", (".hdr",))
            _need(cfg, "graph", "graph edge list")


# ----------------------------------------------------------------------------
# Shared pipeline pieces


def _child_seeds(seed: int, k: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k)]


def synthesize(cfg: dict):
    """Coordinates, graph and signals for the configured data source."""
    d, g = cfg["data"], cfg["graph"]
    if d["source"] == "events":
        coords, signals, report = gdata.ingest_geo_events(
            d["events"],
            tuple(d["grid"]),
            d["bin_seconds"],
            d["min_count"],
            tuple(d["bounds"]) if d["bounds"] else None,
            d["train_fraction"],
            cfg["seed"] or 0,
        )
        graph = gdata.grid_graph(coords, g["knn"], g["kernel"], g["sigma"])
        return coords, graph, signals, report
    n = int(d["n"])
    if n < 2:
        raise ConfigError("data.n must be at least 2")
    s_coords, s_sig = _child_seeds(cfg["seed"], 2)
    coords = gdata.random_coords(n, s_coords)
    if g["kernel"] == "inverse":
        graph = gdata.grid_graph(coords, g["knn"], "inverse")
    else:
        graph = build_rbf_graph(coords, g["sigma"] or SYNTH_SIGMA, knn=min(g["knn"], n - 1) if g["knn"] else None)
    if not graph.is_connected():
        raise InvalidInputError("synthetic graph is disconnected; increase graph.knn")
    signals = gdata.gen_piecewise_smooth(
        laplacian(graph), coords, d["m_count"], d["lambda"], d["region_size"], s_sig, d["train_fraction"]
    )
    return coords, graph, signals, None


def train_split(signals: gdata.SignalSet) -> np.ndarray:
    y = signals.train()
    return y if y.shape[1] else signals.matrix


def test_split(signals: gdata.SignalSet, which: str = "test") -> np.ndarray:
    if which == "all":
        return signals.matrix
    y = signals.test() if which == "test" else signals.train()
    return y if y.shape[1] else signals.matrix


def _check_trained(sd: SparseDict) -> None:
    err = sd.atom_norm_error()
    if not np.isfinite(err) or err > 1e-8:
        raise NumericalError(f"trained atoms violate the unit-norm invariant (error {err:.2e})")


def train_model(name: str, y, lap, basis, tcfg: TrainConfig, lcfg: LaplacianLearnConfig) -> dict:
    """Train one dictionary family; returns effective dictionary and bundle parts."""
    n = y.shape[0]
    k = tcfg.n_atoms or 2 * n
    if name == "ksvd":
        trace: list = []
        res = ksvd_train(y, tcfg.t_sparsity, k, tcfg.iterations, seed=tcfg.seed, trace=trace)
        return {"effective": res.dictionary, "trace": trace}
    hd = name.startswith("gems-hd")
    adaptive = name.endswith("adaptive")
    if hd:
        tcfg = TrainConfig.from_dict({**tcfg.to_dict(), "alpha": 0.0, "beta": 0.0})
    l_c = manifold_laplacian(y, tcfg.manifold_knn) if tcfg.beta else None
    if adaptive:
        res = adaptive_train(y, lap, tcfg, lcfg, l_c=l_c, phi0=basis)
        _check_trained(res.dictionary)
        return {
            "effective": res.dictionary.effective(),
            "dictionary": res.dictionary,
            "basis": res.basis,
            "laplacian": res.laplacian,
            "trace": res.trace,
        }
    a0 = init_sparse_dict(y, basis, k, tcfg.p_sparsity, tcfg.seed)
    res = gems_train(y, basis, a0, lap if tcfg.alpha else None, l_c, tcfg)
    _check_trained(res.dictionary)
    return {
        "effective": res.dictionary.effective(),
        "dictionary": res.dictionary,
        "basis": basis,
        "laplacian": lap,
        "trace": res.trace,
    }


def load_model(model_dir) -> tuple[np.ndarray, dict]:
    model_dir = Path(model_dir)
    try:
        meta = json.loads((model_dir / "config.json").read_text())
    except FileNotFoundError:
        raise ConfigError(f"{model_dir} is not a model bundle (config.json missing)") from None
    if meta["mode"] == "ksvd":
        d, _ = read_matrix_container(model_dir / "dictionary")
        return d, meta
    basis = read_basis(model_dir / "basis")
    a = read_sparse_matrix(model_dir / "A.txt")
    return basis.matrix @ a.toarray(), meta


# ----------------------------------------------------------------------------
# Commands; each returns the list of files it wrote


def cmd_synth(cfg: dict, out: Path) -> list[Path]:
    coords, graph, signals, report = synthesize(cfg)
    files = [out / "graph.edges", out / "coords.csv"]
    write_edge_list(files[0], graph)
    write_coords(files[1], coords)
    files += list(gdata.write_signals(out / "signals", signals))
    summary = {"n": signals.n, "m": signals.m, "edges": graph.n_edges, "normalization": signals.normalization}
    if report is not None:
        summary.update(rows_read=report.rows_read, rows_skipped=report.rows_skipped, bins=report.bins)
    files.append(_write_json(out / "summary.json", summary))
    return files


def cmd_build_basis(cfg: dict, out: Path) -> list[Path]:
    graph = read_edge_list(cfg["inputs"]["graph"])
    basis = haar_basis_from_laplacian(laplacian(graph), allow_disconnected=bool(cfg["graph"]["allow_disconnected"]))
    files = list(write_basis(out / "basis", basis))
    files.append(_write_json(out / "summary.json", {"n": basis.n, "orthogonality_error": basis.orthogonality_error()}))
    return files


def _write_bundle(out: Path, mode: str, adaptive: bool, parts: dict, cfg: dict) -> list[Path]:
    files: list[Path] = []
    meta = {
        "mode": mode,
        "adaptive": adaptive,
        "train": cfg["train"],
        "learn": cfg["learn"] if adaptive else None,
    }
    if mode == "ksvd":
        files += list(write_matrix_container(out / "dictionary", parts["effective"], {"kind": "dictionary"}))
    else:
        files += list(write_basis(out / "basis", parts["basis"]))
        write_sparse_matrix(out / "A.txt", parts["dictionary"].matrix)
        files.append(out / "A.txt")
        write_edge_list(out / "graph.edges", parts["laplacian"].graph())
        files.append(out / "graph.edges")
    write_trace(out / "trace.csv", parts["trace"])
    files.append(out / "trace.csv")
    files.append(_write_json(out / "config.json", meta))
    return files


def cmd_train(cfg: dict, out: Path) -> list[Path]:
    signals = gdata.read_signals(cfg["inputs"]["signals"])
    graph = read_edge_list(cfg["inputs"]["graph"], signals.n)
    lap = laplacian(graph)
    tcfg = train_config(cfg)
    mode, adaptive = cfg["mode"], bool(cfg["adaptive"])
    if mode == "ksvd" and adaptive:
        raise ConfigError("the adaptive loop applies to gems and gems-hd only")
    basis = None
    if mode != "ksvd":
        if cfg["inputs"]["basis"]:
            basis = read_basis(cfg["inputs"]["basis"])
            if basis.n != signals.n:
                raise ConfigError(f"basis has size {basis.n}, signals have {signals.n} rows")
        else:
            basis = haar_basis_from_laplacian(lap)
    name = mode + ("-adaptive" if adaptive else "")
    parts = train_model(name, train_split(signals), lap, basis, tcfg, learn_config(cfg))
    return _write_bundle(out, mode, adaptive, parts, cfg)


def cmd_encode(cfg: dict, out: Path) -> list[Path]:
    d, _ = load_model(cfg["inputs"]["model"])
    signals = gdata.read_signals(cfg["inputs"]["signals"])
    y = test_split(signals, cfg["encode"]["split"])
    t = int(cfg["encode"]["t"])
    codes = omp_batch(d, y, t)
    y_hat = d @ codes.toarray()
    write_codes(out / "codes.txt", codes)
    rmse = _write_json(out / "rmse.json", {"t": t, "signals": y.shape[1], "rmse": gdata.normalized_rmse(y, y_hat)})
    return [out / "codes.txt", rmse]


def cmd_denoise(cfg: dict, out: Path) -> list[Path]:
    d, meta = load_model(cfg["inputs"]["model"])
    signals = gdata.read_signals(cfg["inputs"]["signals"])
    dn = cfg["denoise"]
    y = test_split(signals, dn["split"])
    table = gdata.denoise_benchmark({meta["mode"]: d}, y, dn["noise_levels"], int(dn["t"]), cfg["seed"], dn["relative"])
    gdata.write_table(out / "denoise.csv", table, "noise")
    return [out / "denoise.csv", out / "denoise.json"]


def cmd_benchmark(cfg: dict, out: Path) -> list[Path]:
    if cfg["inputs"]["signals"]:
        signals = gdata.read_signals(cfg["inputs"]["signals"])
        graph = read_edge_list(cfg["inputs"]["graph"], signals.n)
    else:
        _, graph, signals, _ = synthesize(cfg)
    lap = laplacian(graph)
    basis = haar_basis_from_laplacian(lap)
    tcfg, lcfg = train_config(cfg), learn_config(cfg)
    y_train, y_test = train_split(signals), test_split(signals)
    bench = cfg["benchmark"]
    dictionaries: dict = {}
    files: list[Path] = []
    for name in bench["dictionaries"]:
        if name == "phi":
            dictionaries[name] = basis.matrix
            continue
        log.info("training %s", name)
        parts = train_model(name, y_train, lap, basis, tcfg, lcfg)
        dictionaries[name] = parts["effective"]
        write_trace(out / f"trace_{name}.csv", parts["trace"])
        files.append(out / f"trace_{name}.csv")
    mterm = gdata.mterm_benchmark(dictionaries, y_test, bench["sparsity_levels"])
    gdata.write_table(out / "mterm.csv", mterm, "T")
    seed_noise = _child_seeds(cfg["seed"], 3)[2]
    den = gdata.denoise_benchmark(dictionaries, y_test, bench["noise_levels"], int(bench["t_denoise"]), seed_noise)
    gdata.write_table(out / "denoise.csv", den, "noise")
    files += [out / "mterm.csv", out / "mterm.json", out / "denoise.csv", out / "denoise.json"]
    with open(out / "usage.csv", "w") as fh:
        fh.write("dictionary,group,atom,count\n")
        for name, d in dictionaries.items():
            for group in ("train", "test"):
                y = signals.matrix[:, signals.split == group]
                if not y.shape[1]:
                    continue
                counts = gdata.atom_usage(d, y, int(bench["t_denoise"]))
                for atom, c in enumerate(counts):
                    fh.write(f"{name},{group},{atom},{int(c)}\n")
    files.append(out / "usage.csv")
    return files


def cmd_learn_graph(cfg: dict, out: Path) -> list[Path]:
    model = Path(cfg["inputs"]["model"])
    _, meta = load_model(model)
    if meta["mode"] == "ksvd":
        raise ConfigError("graph learning needs a sparse (gems or gems-hd) model")
    basis = read_basis(model / "basis")
    a = read_sparse_matrix(model / "A.txt")
    lcfg = learn_config(cfg)
    lap, info = learn_laplacian(basis, a, lcfg.alpha, lcfg.mu, lcfg.solver_tol, lcfg.max_iters, return_info=True)
    write_edge_list(out / "learned_graph.edges", lap.graph())
    summ = _write_json(
        out / "summary.json",
        {
            "iterations": info.iterations,
            "objective": info.objective,
            "kkt_residual": info.kkt_residual,
            "converged": info.converged,
            "edges": lap.graph().n_edges,
        },
    )
    return [out / "learned_graph.edges", summ]


COMMANDS = {
    "synth": cmd_synth,
    "build-basis": cmd_build_basis,
    "train": cmd_train,
    "encode": cmd_encode,
    "denoise": cmd_denoise,
    "benchmark": cmd_benchmark,
    "learn-graph": cmd_learn_graph,
}


# ----------------------------------------------------------------------------
# Manifest and entry point


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    import scipy

    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"gems": own, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def write_manifest(out: Path, command: str, cfg: dict, files: list[Path]) -> Path:
    outputs = {str(p.relative_to(out)): _sha256(p) for p in sorted(set(files))}
    doc = {"command": command, "config": cfg, "seed": cfg["seed"], "versions": _versions(), "outputs": outputs}
    return _write_json(out / "manifest.json", doc)


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


# (flag, config key, type, help) per command
_FLAGS = {
    "synth": [
        ("--n", "data.n", int, "number of graph nodes"),
        ("--lambda", "data.lambda", float, "smoothing strength"),
        ("--region-size", "data.region_size", float, "fraction of nodes replaced per signal"),
        ("--m-count", "data.m_count", int, "signals per smooth set (default 10 N)"),
        ("--train-fraction", "data.train_fraction", float, "fraction labelled for training"),
        ("--source", "data.source", str, "synth or events"),
        ("--events", "data.events", str, "events CSV (timestamp,lat,lon)"),
        ("--bin-seconds", "data.bin_seconds", float, "time-bin width"),
        ("--min-count", "data.min_count", int, "minimum events per kept grid point"),
        ("--knn", "graph.knn", int, "nearest neighbours per node"),
        ("--sigma", "graph.sigma", float, "RBF width"),
        ("--kernel", "graph.kernel", str, "rbf or inverse"),
    ],
    "build-basis": [("--graph", "inputs.graph", str, "edge list")],
    "train": [
        ("--signals", "inputs.signals", str, "signal container prefix"),
        ("--graph", "inputs.graph", str, "edge list"),
        ("--basis", "inputs.basis", str, "basis container prefix (built from the graph if omitted)"),
        ("--mode", "mode", str, "gems, gems-hd or ksvd"),
        ("--t", "train.t_sparsity", int, "code sparsity T"),
        ("--p", "train.p_sparsity", int, "atom sparsity P"),
        ("--alpha", "train.alpha", float, "atom smoothness weight"),
        ("--beta", "train.beta", float, "manifold weight"),
        ("--iterations", "train.iterations", int, "maximum training iterations"),
        ("--atom-solver", "train.atom_solver", str, "greedy or admm"),
        ("--n-atoms", "train.n_atoms", int, "dictionary size (default 2 N)"),
        ("--outer-rounds", "learn.outer_rounds", int, "adaptive rounds"),
    ],
    "encode": [
        ("--model", "inputs.model", str, "model bundle directory"),
        ("--signals", "inputs.signals", str, "signal container prefix"),
        ("--t", "encode.t", int, "code sparsity"),
        ("--split", "encode.split", str, "train, test or all"),
    ],
    "denoise": [
        ("--model", "inputs.model", str, "model bundle directory"),
        ("--signals", "inputs.signals", str, "signal container prefix"),
        ("--noise", "denoise.noise_levels", _float_list, "noise levels relative to the data std"),
        ("--t", "denoise.t", int, "code sparsity"),
        ("--split", "denoise.split", str, "train, test or all"),
    ],
    "benchmark": [
        ("--signals", "inputs.signals", str, "signal container prefix (synthesized if omitted)"),
        ("--graph", "inputs.graph", str, "edge list"),
        ("--dictionaries", "benchmark.dictionaries", _str_list, f"comma-separated subset of {','.join(DICTIONARY_NAMES)}"),
        ("--sparsity-levels", "benchmark.sparsity_levels", _int_list, "comma-separated T values"),
        ("--noise", "benchmark.noise_levels", _float_list, "noise levels relative to the data std"),
        ("--n", "data.n", int, "number of graph nodes when synthesizing"),
    ],
    "learn-graph": [
        ("--model", "inputs.model", str, "model bundle directory"),
        ("--alpha", "learn.alpha", float, "smoothness weight"),
        ("--mu", "learn.mu", float, "Frobenius weight"),
    ],
}


_HELP = {
    "synth": "generate (or ingest) signals and their graph",
    "build-basis": "build the graph-Haar basis of a graph",
    "train": "train a dictionary and write a model bundle",
    "encode": "sparse-code signals with a trained model",
    "denoise": "denoising RMSE of a trained model",
    "benchmark": "train several dictionaries and tabulate m-term and denoising RMSE",
    "learn-graph": "learn a Laplacian from a trained sparse model",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration or a manifest.json from an earlier run")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads (default 1)")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="gems", description="Graph-Haar sparse dictionary learning pipelines.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, flags in _FLAGS.items():
        p = sub.add_parser(name, parents=[common], help=_HELP[name])
        for flag, key, typ, hlp in flags:
            p.add_argument(flag, dest=key, type=typ, default=None, help=hlp)
        if name == "train":
            p.add_argument(
                "--adaptive",
                dest="adaptive",
                action="store_const",
                const=True,
                default=None,
                help="learn the graph and rebuild the basis between training rounds",
            )
        if name == "build-basis":
            p.add_argument(
                "--allow-disconnected",
                dest="graph.allow_disconnected",
                action="store_const",
                const=True,
                default=None,
                help="split disconnected graphs into components instead of failing",
            )
    return parser


def _error(exc: BaseException, code: int) -> int:
    env = {"error": type(exc).__name__, "module": type(exc).__module__, "message": str(exc), "exit_code": code}
    print(json.dumps(env), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    command = args.command
    overrides = {k: v for k, v in vars(args).items() if "." in k or k in ("mode", "adaptive")}
    overrides["seed"] = args.seed
    overrides["threads"] = args.threads
    try:
        cfg = resolve_config(command, args.config, overrides)
        validate(command, cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        limiter = contextlib.nullcontext()
        if cfg["threads"]:
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(limits=cfg["threads"])
        with limiter:
            files = COMMANDS[command](cfg, out)
        write_manifest(out, command, cfg, files)
    except (NumericalError, DeadAtomError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return _error(exc, EXIT_NUMERIC)
    except (InvalidInputError, ValueError, OSError, KeyError) as exc:
        return _error(exc, EXIT_USAGE)
    except GemsError as exc:
        return _error(exc, EXIT_NUMERIC)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
