"""Multi-seed experiment orchestration and diagnostics export."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as dio
from .graph import adjacency_density, symmetric_normalize
from .model import GannConfig, evaluate_accuracy, prepare_data, run_gann
from .nn import NumericError

log = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).parent / "presets"


@dataclass
class ExperimentConfig:
    dataset: str | dict                 # directory path or {"sbm": {...}}
    model: GannConfig = field(default_factory=GannConfig)
    per_class: int = 20
    val_size: int = 500
    seeds: list = field(default_factory=lambda: list(range(10)))
    out: str = "runs/default"
    jobs: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "model": self.model.to_dict(),
            "per_class": self.per_class,
            "val_size": self.val_size,
            "seeds": list(self.seeds),
            "out": self.out,
            "jobs": self.jobs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {"dataset", "model", "per_class", "val_size", "seeds", "out", "jobs"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        if "dataset" not in d:
            raise ValueError("experiment config needs a 'dataset'")
        d["model"] = GannConfig.from_dict(d.get("model", {}))
        return cls(**d)


def load_config(path_or_preset) -> dict:
    """Read a JSON config file; a bare name falls back to the bundled presets."""
    p = Path(path_or_preset)
    if not p.exists():
        preset = PRESET_DIR / f"{path_or_preset}.json"
        if not preset.exists():
            raise FileNotFoundError(f"no config file or preset named {path_or_preset!r}")
        p = preset
    return json.loads(p.read_text())


def config_digest(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    for volatile in ("out", "jobs", "seeds"):
        d.pop(volatile)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def record_digest(record: dict) -> str:
    """Hash of a run record minus wall-clock timing and where/how it was run."""
    stable = {k: v for k, v in record.items() if k not in ("timing", "digest")}
    if isinstance(stable.get("config"), dict):
        stable["config"] = {k: v for k, v in stable["config"].items() if k not in ("out", "jobs")}
    return hashlib.sha256(json.dumps(stable, sort_keys=True).encode()).hexdigest()


def load_bundle(spec, seed: int = 0) -> dio.DatasetBundle:
    if isinstance(spec, dict):
        if "sbm" not in spec:
            raise dio.DataError("dataset must be a directory path or {'sbm': {...}}")
        sbm = dict(spec["sbm"])
        rng = np.random.default_rng(sbm.pop("seed", seed))
        return dio.generate_sbm(
            sbm.pop("block_sizes"), sbm.pop("p_in"), sbm.pop("p_out"),
            sbm.pop("feature_dim", 16), sbm.pop("feature_noise", 1.0), rng, **sbm,
        )
    return dio.load_dataset(spec)


def _limit_threads():
    """Apply GANN_THREADS as a cap on BLAS threads; never above the usable cores."""
    n = os.environ.get("GANN_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    cores = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1
    # oversubscribed BLAS threads spin against each other and can run 20x slower
    return threadpool_limits(max(1, min(int(n), cores)))


def run_seed(cfg: ExperimentConfig, seed: int, bundle: dio.DatasetBundle | None = None) -> dict:
    """One split + one GANN run. Returns a JSON-friendly dict plus arrays."""
    limiter = _limit_threads()
    try:
        t0 = time.perf_counter()
        if bundle is None:
            bundle = load_bundle(cfg.dataset, seed)
        split = dio.make_splits(bundle, cfg.per_class, cfg.val_size, np.random.default_rng(seed))
        model_cfg = replace(cfg.model, seed=seed)
        data = prepare_data(bundle, split, model_cfg)
        res = run_gann(data, model_cfg)
        return {
            "seed": seed,
            "test_acc": evaluate_accuracy(res.z, data.labels, data.test_idx),
            "val_acc": evaluate_accuracy(res.z, data.labels, data.val_idx),
            "layers": res.layers,
            "curve": [list(r) for r in res.trace],
            "seconds": time.perf_counter() - t0,
            "embeddings": res.final_output.e,
            "log_probs": res.z,
        }
    finally:
        if limiter is not None:
            limiter.unregister()


def _run_seed_safe(cfg, seed, bundle):
    try:
        return run_seed(cfg, seed, bundle)
    except (NumericError, dio.DataError, ValueError, FloatingPointError) as exc:
        return {"seed": seed, "error": f"{type(exc).__name__}: {exc}",
                "data_error": isinstance(exc, dio.DataError)}


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run every seed, aggregate mean and sample std of test accuracy, persist."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    shared = None if isinstance(cfg.dataset, dict) else load_bundle(cfg.dataset)
    t0 = time.perf_counter()
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_seed_safe, [cfg] * len(cfg.seeds), cfg.seeds,
                                    [shared] * len(cfg.seeds)))
    else:
        results = [_run_seed_safe(cfg, s, shared) for s in cfg.seeds]

    record = {
        "config_digest": config_digest(cfg),
        "config": cfg.to_dict(),
        "seeds": [],
        "accuracies": [],
        "val_accuracies": [],
        "curves": {},
        "layers": {},
        "failures": {},
        "timing": {"total_seconds": time.perf_counter() - t0, "per_seed": {}},
    }
    for r in results:
        key = str(r["seed"])
        if "error" in r:
            log.error("seed %s failed: %s", key, r["error"])
            record["failures"][key] = r["error"]
            continue
        record["seeds"].append(r["seed"])
        record["accuracies"].append(r["test_acc"])
        record["val_accuracies"].append(r["val_acc"])
        record["curves"][key] = r["curve"]
        record["layers"][key] = r["layers"]
        record["timing"]["per_seed"][key] = r["seconds"]
        seed_dir = out / f"seed_{key}"
        seed_dir.mkdir(exist_ok=True)
        np.save(seed_dir / "embeddings.npy", r["embeddings"])
        np.save(seed_dir / "log_probs.npy", r["log_probs"])
        dio.save_curves(r["curve"], seed_dir / "curves.csv")
    record["mean"], record["std"] = dio.summarize(record["accuracies"])
    record["digest"] = record_digest(record)
    dio.save_results(record, out / "results.json")
    if not record["accuracies"]:
        msg = f"all {len(cfg.seeds)} seeds failed: {record['failures']}"
        raise dio.DataError(msg) if all(r.get("data_error") for r in results) else NumericError(msg)
    return record


# ---------------------------------------------------------------- CSV helpers

def write_matrix_csv(m: np.ndarray, path) -> None:
    buf = io.StringIO()
    np.savetxt(buf, m, delimiter=",", fmt="%.17g")
    dio._atomic_write(Path(path), buf.getvalue())


def read_matrix_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def read_table_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        cols = reader.fieldnames
    return {c: np.array([float(r[c]) for r in rows]) for c in cols}


def _write_table_csv(columns: dict, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(columns)
    w.writerow(names)
    for row in zip(*(columns[n] for n in names)):
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    dio._atomic_write(Path(path), buf.getvalue())


# ---------------------------------------------------------------- diagnostics

def prediction_entropy(z: np.ndarray) -> np.ndarray:
    """Entropy of the row-renormalized distribution behind log-scores `z`."""
    s = z - z.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


def export_diagnostics(bundle: dio.DatasetBundle, run_dir, out_dir, seed=None, max_hop: int = 5,
                       max_gram_nodes: int | None = None) -> dict[str, Path]:
    """Write hop densities, a class-sorted embedding Gram matrix and prediction entropies."""
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    record = dio.load_results(run_dir / "results.json")
    if seed is None:
        if not record["seeds"]:
            raise dio.DataError("run has no successful seeds")
        seed = record["seeds"][0]
    seed_dir = run_dir / f"seed_{seed}"
    emb_file = seed_dir / "embeddings.npy"
    if not emb_file.exists():
        raise dio.DataError(f"missing embeddings: {emb_file}")
    e = np.load(emb_file)
    z = np.load(seed_dir / "log_probs.npy")
    if e.shape[0] != bundle.num_nodes:
        raise dio.DataError(f"embeddings cover {e.shape[0]} nodes, dataset has {bundle.num_nodes}")
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}

    dens = adjacency_density(symmetric_normalize(bundle.graph), max_hop)
    files["density"] = out_dir / "hop_density.csv"
    _write_table_csv({"hop": list(range(1, max_hop + 1)), "density": dens}, files["density"])

    # stable sort keeps node order within a class; unknown labels (-1) come first
    order = np.argsort(bundle.labels, kind="stable")
    if max_gram_nodes is not None and order.size > max_gram_nodes:
        keep = np.linspace(0, order.size - 1, max_gram_nodes).round().astype(int)
        order = order[keep]
    files["gram"] = out_dir / "gram_sorted.csv"
    write_matrix_csv(e[order] @ e[order].T, files["gram"])
    files["gram_order"] = out_dir / "gram_order.csv"
    _write_table_csv({"node": order.tolist(), "label": bundle.labels[order].tolist()}, files["gram_order"])

    files["entropy"] = out_dir / "entropy.csv"
    _write_table_csv({
        "node": list(range(bundle.num_nodes)),
        "label": bundle.labels.tolist(),
        "entropy": prediction_entropy(z).tolist(),
    }, files["entropy"])
    return files
