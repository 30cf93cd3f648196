"""Dataset directories, label-rate splits, SBM generation and run records.

A dataset directory holds::

    meta.json           {"name", "num_nodes", "num_features", "num_classes"}
    edges.tsv           "i<TAB>j" per undirected edge, 0-indexed, i != j
    features.tsv        N rows of d whitespace-separated reals
      or features_sparse.tsv   "row<TAB>col<TAB>value" triplets
    labels.tsv          one integer per node, -1 when unknown
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import SparseGraph


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetBundle:
    graph: SparseGraph
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        n = self.graph.num_nodes
        if self.features.shape[0] != n or self.labels.shape[0] != n:
            raise DataError(
                f"inconsistent node counts: graph {n}, features {self.features.shape[0]}, "
                f"labels {self.labels.shape[0]}"
            )
        bad = (self.labels < -1) | (self.labels >= self.num_classes)
        if bad.any():
            raise DataError(f"label out of range at node {int(np.flatnonzero(bad)[0])}")
        present = np.bincount(self.labels[self.labels >= 0], minlength=self.num_classes)
        if (present == 0).any():
            raise DataError(f"classes without labeled nodes: {np.flatnonzero(present == 0).tolist()}")

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes


@dataclass(frozen=True)
class SplitMasks:
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    per_class: int


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path) -> DatasetBundle:
    path = Path(path)
    meta_file = path / "meta.json"
    if not meta_file.exists():
        raise DataError(f"missing file: {meta_file}")
    meta = json.loads(meta_file.read_text())
    for key in ("name", "num_nodes", "num_features", "num_classes"):
        if key not in meta:
            raise DataError(f"meta.json lacks field {key!r}")
    n, d, c = int(meta["num_nodes"]), int(meta["num_features"]), int(meta["num_classes"])

    edges_file = path / "edges.tsv"
    if not edges_file.exists():
        raise DataError(f"missing file: {edges_file}")
    edges = np.loadtxt(edges_file, dtype=np.int64, ndmin=2, delimiter="\t")
    edges = edges.reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise DataError(f"edge index out of range [0, {n}) in {edges_file}")
    if (edges[:, 0] == edges[:, 1]).any():
        raise DataError(f"self-loop in {edges_file}")
    graph = SparseGraph.from_edges(n, edges)

    dense_file, sparse_file = path / "features.tsv", path / "features_sparse.tsv"
    if dense_file.exists():
        x = np.loadtxt(dense_file, dtype=np.float64, ndmin=2)
        if x.shape != (n, d):
            raise DataError(f"features.tsv has shape {x.shape}, expected {(n, d)}")
    elif sparse_file.exists():
        trip = np.loadtxt(sparse_file, dtype=np.float64, ndmin=2, delimiter="\t").reshape(-1, 3)
        r, col = trip[:, 0].astype(np.int64), trip[:, 1].astype(np.int64)
        if trip.size and (r.min() < 0 or r.max() >= n or col.min() < 0 or col.max() >= d):
            raise DataError(f"feature index out of range in {sparse_file}")
        x = sp.coo_matrix((trip[:, 2], (r, col)), shape=(n, d)).toarray()
    else:
        raise DataError(f"missing file: {dense_file} (or {sparse_file.name})")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite feature value")

    labels_file = path / "labels.tsv"
    if not labels_file.exists():
        raise DataError(f"missing file: {labels_file}")
    labels = np.loadtxt(labels_file, dtype=np.int64, ndmin=1)
    if labels.shape != (n,):
        raise DataError(f"labels.tsv has {labels.size} entries, expected {n}")
    bad = (labels < -1) | (labels >= c)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataError(f"label out of range at node {i}: {labels[i]} not in [-1, {c})")
    return DatasetBundle(graph, x, labels, c, str(meta["name"]))


def save_dataset(bundle: DatasetBundle, path, sparse_threshold: float = 0.1) -> None:
    """Write `bundle` in the directory format; features go sparse below 10% density."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    x = bundle.features
    n, d = x.shape
    meta = {"name": bundle.name, "num_nodes": n, "num_features": d, "num_classes": bundle.num_classes}
    _atomic_write(path / "meta.json", json.dumps(meta, indent=2) + "\n")
    edges = bundle.graph.edge_list()
    _atomic_write(path / "edges.tsv", "".join(f"{i}\t{j}\n" for i, j in edges))
    density = np.count_nonzero(x) / max(x.size, 1)
    for stale in ("features.tsv", "features_sparse.tsv"):
        if (path / stale).exists():
            (path / stale).unlink()
    if density < sparse_threshold:
        r, c = np.nonzero(x)
        _atomic_write(path / "features_sparse.tsv",
                      "".join(f"{i}\t{j}\t{float(x[i, j])!r}\n" for i, j in zip(r, c)))
    else:
        buf = io.StringIO()
        for row in x:
            buf.write(" ".join(repr(float(v)) for v in row) + "\n")
        _atomic_write(path / "features.tsv", buf.getvalue())
    _atomic_write(path / "labels.tsv", "".join(f"{int(v)}\n" for v in bundle.labels))


def make_splits(bundle: DatasetBundle, per_class: int, val_size: int,
                rng: np.random.Generator) -> SplitMasks:
    """Sample `per_class` training nodes per class, then `val_size` validation
    nodes uniformly from the remaining labeled nodes; the rest is test."""
    labels = bundle.labels
    train = []
    for c in range(bundle.num_classes):
        members = np.flatnonzero(labels == c)
        if members.size < per_class:
            raise DataError(f"class {c} has {members.size} labeled nodes, need {per_class}")
        train.append(rng.choice(members, size=per_class, replace=False))
    train_idx = np.sort(np.concatenate(train))
    rest = np.setdiff1d(np.flatnonzero(labels >= 0), train_idx)
    if rest.size < val_size:
        raise DataError(f"only {rest.size} labeled nodes left for a validation set of {val_size}")
    perm = rng.permutation(rest)
    val_idx = np.sort(perm[:val_size])
    test_idx = np.sort(perm[val_size:])
    return SplitMasks(train_idx, val_idx, test_idx, per_class)


def generate_sbm(block_sizes, p_in: float, p_out: float, feature_dim: int,
                 feature_noise: float, rng: np.random.Generator, name: str = "sbm") -> DatasetBundle:
    """Undirected stochastic block model with one-hot class features plus Gaussian noise."""
    for p in (p_in, p_out):
        if not 0.0 <= p <= 1.0:
            raise ValueError("edge probabilities must lie in [0, 1]")
    sizes = [int(b) for b in block_sizes]
    labels = np.repeat(np.arange(len(sizes)), sizes)
    n = labels.size
    if feature_dim < len(sizes):
        raise ValueError("feature_dim must be at least the number of blocks")
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    graph = SparseGraph.from_edges(n, np.column_stack([iu[keep], ju[keep]]))
    x = np.zeros((n, feature_dim))
    x[np.arange(n), labels] = 1.0
    x += feature_noise * rng.standard_normal(x.shape)
    return DatasetBundle(graph, x, labels, len(sizes), name)


def largest_component(bundle: DatasetBundle) -> DatasetBundle:
    from scipy.sparse.csgraph import connected_components

    _, comp = connected_components(bundle.graph.matrix, directed=False)
    keep = np.flatnonzero(comp == np.bincount(comp).argmax())
    sub = bundle.graph.matrix[keep][:, keep].tocsr()
    labels = bundle.labels[keep]
    # classes may vanish outside the component; relabel densely
    present = np.unique(labels[labels >= 0])
    remap = np.full(bundle.num_classes, -1)
    remap[present] = np.arange(present.size)
    labels = np.where(labels >= 0, remap[np.clip(labels, 0, None)], -1)
    return DatasetBundle(SparseGraph(sub), bundle.features[keep], labels, present.size, bundle.name)


def convert_npz(src, name: str | None = None, lcc: bool = True) -> DatasetBundle:
    """Read a benchmark ``.npz`` with CSR arrays ``adj_*``, ``attr_*`` and ``labels``.

    This is the layout used by the common Cora-ML / CiteSeer / PubMed
    citation-graph archives. Directed citations are symmetrized.
    """
    src = Path(src)
    if not src.exists():
        raise DataError(f"missing file: {src}")
    with np.load(src, allow_pickle=True) as f:
        try:
            adj = sp.csr_matrix((f["adj_data"], f["adj_indices"], f["adj_indptr"]), shape=f["adj_shape"])
            if "attr_data" in f:
                x = sp.csr_matrix((f["attr_data"], f["attr_indices"], f["attr_indptr"]),
                                  shape=f["attr_shape"]).toarray()
            else:
                x = np.asarray(f["attr_matrix"], dtype=float)
            labels = np.asarray(f["labels"], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"{src} lacks array {exc}") from None
    adj = adj.tocoo()
    off = adj.row != adj.col
    graph = SparseGraph.from_edges(adj.shape[0], np.column_stack([adj.row[off], adj.col[off]]))
    bundle = DatasetBundle(graph, x.astype(float), labels, int(labels.max()) + 1, name or src.stem)
    return largest_component(bundle) if lcc else bundle


# ---------------------------------------------------------------- run records

RECORD_FIELDS = ("config_digest", "config", "seeds", "accuracies", "mean", "std", "curves",
                 "layers", "failures", "timing")
CURVE_HEADER = ["layer", "iteration", "train_loss", "val_acc", "test_acc"]


def summarize(accuracies) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single seed)."""
    a = np.asarray(accuracies, dtype=float)
    if a.size == 0:
        return float("nan"), float("nan")
    std = float(a.std(ddof=1)) if a.size > 1 else 0.0
    return float(a.mean()), std


def save_results(record: dict, path) -> None:
    missing = [k for k in RECORD_FIELDS if k not in record]
    if missing:
        raise DataError(f"run record lacks field {missing[0]!r}")
    _atomic_write(Path(path), json.dumps(record, indent=2, sort_keys=True, allow_nan=True) + "\n")


def load_results(path) -> dict:
    path = Path(path)
    try:
        record = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed results file {path}: {exc}") from None
    if not isinstance(record, dict):
        raise DataError(f"malformed results file {path}: not a JSON object")
    for key in RECORD_FIELDS:
        if key not in record:
            raise DataError(f"results file {path} lacks field {key!r}")
    mean, std = summarize(record["accuracies"])
    if record["accuracies"] and (not math.isclose(mean, record["mean"], abs_tol=1e-12)
                                 or not math.isclose(std, record["std"], abs_tol=1e-12)):
        raise DataError(f"results file {path}: mean/std disagree with per-seed accuracies")
    return record


def save_curves(rows, path) -> None:
    """Write one seed's training curve as ``layer,iteration,train_loss,val_acc,test_acc``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_HEADER)
    w.writerows(rows)
    _atomic_write(Path(path), buf.getvalue())


def load_curves(path) -> list[tuple]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CURVE_HEADER:
            raise DataError(f"unexpected curve header {header}")
        return [(int(a), int(b), float(c), float(d), float(e)) for a, b, c, d, e in reader]
