"""The three alignment losses: feature, cluster-center and minimum-entropy.

Every loss returns ``(value, gradient)``. Targets (the thresholded similarity
matrix and the sharpened predictions) are treated as constants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .nn import sigmoid

BCE_CLAMP = 1e-7
# upper bound on entries of a dense N-wide row block
_BLOCK_ENTRIES = 4_000_000


def _block_rows(n: int) -> int:
    return max(1, _BLOCK_ENTRIES // max(n, 1))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.where(norms > 0, norms, 1.0)


def cosine_similarity_matrix(x_hat: np.ndarray) -> np.ndarray:
    """Dense cosine similarity. Zero rows are similar only to themselves."""
    u = _unit_rows(np.asarray(x_hat, dtype=float))
    s = u @ u.T
    np.fill_diagonal(s, 1.0)
    return s


@dataclass(frozen=True)
class FeatureTarget:
    """Thresholded, row-wise top-k similarity target, stored sparse (N x N)."""

    f_prime: sp.csr_matrix
    eta: float
    k: int

    def toarray(self) -> np.ndarray:
        return self.f_prime.toarray()


def _topk_rows(vals: np.ndarray, row_offset: int, eta: float, k: int):
    """Indices and values kept for a block of similarity rows."""
    b, n = vals.shape
    ranked = np.where(vals >= eta, vals, -np.inf)
    diag_cols = np.arange(row_offset, row_offset + b)
    ranked[np.arange(b), diag_cols] = np.inf  # self-similarity always survives
    # stable sort on the negated values: equal values keep ascending column order
    order = np.argsort(-ranked, axis=1, kind="stable")[:, : min(k, n)]
    picked = np.take_along_axis(ranked, order, axis=1)
    rows, cols, data = [], [], []
    for r in range(b):
        ok = np.isfinite(picked[r]) | (order[r] == row_offset + r)
        c = order[r][ok]
        v = vals[r, c]
        nz = v != 0
        rows.append(np.full(nz.sum(), row_offset + r))
        cols.append(c[nz])
        data.append(v[nz])
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(data)


def build_feature_target(s: np.ndarray, eta: float = 0.5, k: int = 10,
                         binarize: bool = False) -> FeatureTarget:
    """Zero similarities below `eta`, then keep the k largest per row.

    Ties go to the smaller column index; the diagonal is always retained.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    s = np.asarray(s, dtype=float)
    n = s.shape[0]
    s = s.copy()
    np.fill_diagonal(s, 1.0)
    r, c, v = _topk_rows(s, 0, eta, k)
    return _make_target(r, c, v, n, eta, k, binarize)


def feature_target_from_features(x_hat: np.ndarray, eta: float = 0.5, k: int = 10,
                                 binarize: bool = False) -> FeatureTarget:
    """Same result as build_feature_target(cosine_similarity_matrix(x)) without the N x N matrix."""
    if k < 1:
        raise ValueError("k must be >= 1")
    u = _unit_rows(np.asarray(x_hat, dtype=float))
    n = u.shape[0]
    step = _block_rows(n)
    parts = []
    for r0 in range(0, n, step):
        block = u[r0:r0 + step] @ u.T
        block[np.arange(block.shape[0]), np.arange(r0, r0 + block.shape[0])] = 1.0
        parts.append(_topk_rows(block, r0, eta, k))
    r, c, v = (np.concatenate(p) for p in zip(*parts))
    return _make_target(r, c, v, n, eta, k, binarize)


def _make_target(r, c, v, n, eta, k, binarize):
    v = np.clip(v, 0.0, 1.0)
    if binarize:
        v = np.ones_like(v)
    f = sp.csr_matrix((v, (r, c)), shape=(n, n))
    f.sort_indices()
    return FeatureTarget(f, float(eta), int(k))


def embedding_correlation(e: np.ndarray) -> np.ndarray:
    return sigmoid(e @ e.T)


def binary_cross_entropy(f_hat: np.ndarray, f_prime: np.ndarray) -> float:
    """Mean soft-target BCE over all entries, with f_hat clamped away from 0 and 1."""
    f = np.clip(f_hat, BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = np.asarray(f_prime, dtype=float)
    return float(-(t * np.log(f) + (1.0 - t) * np.log(1.0 - f)).mean())


def feature_alignment_loss(e: np.ndarray, target: FeatureTarget):
    """BCE between sigmoid(E E^T) and the target, averaged over N^2 entries.

    Returns ``(loss, dloss/dE)``. Evaluated in row blocks so the N x N
    correlation matrix is never held at once.
    """
    n = e.shape[0]
    if target.f_prime.shape != (n, n):
        raise ValueError(f"target shape {target.f_prime.shape} does not match {n} embeddings")
    total = 0.0
    grad = np.zeros_like(e)
    scale = 1.0 / (n * n)
    step = _block_rows(n)
    for r0 in range(0, n, step):
        eb = e[r0:r0 + step]
        f_hat = sigmoid(eb @ e.T)
        t = target.f_prime[r0:r0 + step].toarray().astype(e.dtype, copy=False)
        fc = np.clip(f_hat, BCE_CLAMP, 1.0 - BCE_CLAMP)
        total += float(-(t * np.log(fc) + (1.0 - t) * np.log(1.0 - fc)).sum())
        # d BCE(sigmoid(g)) / dg = sigmoid(g) - t, zero where the clamp is active
        r = (f_hat - t) * (fc == f_hat) * scale
        grad[r0:r0 + step] += r @ e
        grad += r.T @ eb
    return total * scale, grad


@dataclass(frozen=True)
class ClusterCenters:
    e_bar: np.ndarray          # C x h'
    counts: np.ndarray         # labeled training nodes per class
    train_idx: np.ndarray
    train_labels: np.ndarray


def cluster_centers(e: np.ndarray, labels: np.ndarray, train_idx, num_classes: int | None = None) -> ClusterCenters:
    """Per-class mean embedding of the labeled training nodes."""
    train_idx = np.asarray(train_idx, dtype=np.int64)
    y = np.asarray(labels)[train_idx]
    c = int(y.max()) + 1 if num_classes is None else num_classes
    counts = np.bincount(y, minlength=c)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"classes without training samples: {missing}")
    sums = np.zeros((c, e.shape[1]), dtype=e.dtype)
    np.add.at(sums, y, e[train_idx])
    return ClusterCenters(sums / counts[:, None], counts, train_idx, y)


def center_alignment_loss(centers: ClusterCenters, lam: float = 1.0):
    """Pull the C x C Gram matrix of the centers toward C times the identity.

    loss = mean_i (1 - G_ii / C)^2 + lam * mean_{i != j} (G_ij / C)^2
    Returns ``(loss, dloss/dE_bar)``.
    """
    eb = centers.e_bar
    c = eb.shape[0]
    if c < 2:
        raise ValueError("center alignment needs at least two classes")
    g = eb @ eb.T
    diag = np.diag(g)
    off = g - np.diag(diag)
    loss = ((1.0 - diag / c) ** 2).sum() / c + lam * ((off / c) ** 2).sum() / (c * (c - 1))
    dg = 2.0 * lam * off / (c * c * c * (c - 1))
    dg[np.diag_indices(c)] = -2.0 * (1.0 - diag / c) / (c * c)
    # g is symmetric in e_bar: d/dE_bar = (dG + dG^T) E_bar
    return float(loss), (dg + dg.T) @ eb


def centers_backward(grad_e_bar: np.ndarray, centers: ClusterCenters, num_nodes: int) -> np.ndarray:
    """Spread a center gradient back to the node embeddings that were averaged."""
    grad = np.zeros((num_nodes, grad_e_bar.shape[1]), dtype=grad_e_bar.dtype)
    share = grad_e_bar[centers.train_labels] / centers.counts[centers.train_labels, None]
    np.add.at(grad, centers.train_idx, share)
    return grad


def sharpen(z: np.ndarray, tem: float, mixmatch: bool = False) -> np.ndarray:
    """Row-wise sharpening of a probability matrix.

    Default form: exp(p ** (1/tem)) normalized over classes. With
    ``mixmatch=True``: p ** (1/tem) normalized over classes.
    """
    if tem <= 0:
        raise ValueError("temperature must be positive")
    powered = np.power(np.clip(z, 0.0, None), 1.0 / tem)
    if mixmatch:
        return powered / powered.sum(axis=1, keepdims=True)
    ex = np.exp(powered - powered.max(axis=1, keepdims=True))
    return ex / ex.sum(axis=1, keepdims=True)


def softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Map a gradient on softmax outputs to the pre-softmax logits."""
    return p * (grad_p - (grad_p * p).sum(axis=1, keepdims=True))


def min_entropy_loss(z: np.ndarray, z_sharp: np.ndarray):
    """Mean squared row distance to the sharpened target.

    Returns ``(loss, dloss/dlogits)`` where `z` holds softmax probabilities of
    those logits; `z_sharp` is constant.
    """
    if z.shape != z_sharp.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {z_sharp.shape}")
    n = z.shape[0]
    diff = z - z_sharp
    loss = float((diff * diff).sum() / n)
    return loss, softmax_backward(z, 2.0 * diff / n)
