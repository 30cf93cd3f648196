"""Sparse graph container, normalization and multi-hop propagation.

Sparse-dense products go through scipy's CSR kernel, which accumulates each
output row sequentially in column order, so results do not depend on the
number of BLAS threads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class SparseGraph:
    """Symmetric adjacency held as a canonical CSR matrix."""

    matrix: sp.csr_matrix
    is_normalized: bool = False

    def __post_init__(self):
        m = self.matrix
        if m.shape[0] != m.shape[1]:
            raise GraphError(f"adjacency must be square, got {m.shape}")
        if not m.has_canonical_format:
            m = m.copy()
            m.sum_duplicates()
            object.__setattr__(self, "matrix", m)

    @classmethod
    def from_edges(cls, num_nodes: int, edges) -> "SparseGraph":
        """Build a 0/1 undirected adjacency; duplicates and reversed pairs collapse."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise GraphError("edge endpoint out of range")
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        a = sp.csr_matrix(
            (np.ones(rows.size), (rows, cols)), shape=(num_nodes, num_nodes)
        )
        a.sum_duplicates()
        a.data[:] = 1.0
        return cls(a)

    @property
    def num_nodes(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def edge_list(self) -> np.ndarray:
        """Each undirected off-diagonal edge once, as (i, j) with i < j."""
        coo = sp.triu(self.matrix, k=1).tocoo()
        return np.column_stack([coo.row, coo.col]).astype(np.int64)

    def is_symmetric(self) -> bool:
        diff = self.matrix - self.matrix.T
        return diff.nnz == 0 or np.abs(diff.data).max() == 0.0

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def symmetric_normalize(g: SparseGraph) -> SparseGraph:
    """Return D~^{-1/2} (A + I) D~^{-1/2}."""
    if g.is_normalized:
        raise GraphError("graph is already normalized")
    a = g.matrix
    if a.nnz and a.data.min() < 0:
        raise GraphError("negative edge values")
    if not g.is_symmetric():
        raise GraphError("adjacency is not symmetric")
    n = g.num_nodes
    a_tilde = (a + sp.identity(n, format="csr")).tocsr()
    a_tilde.sum_duplicates()
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    scale = sp.diags(inv_sqrt)
    a_hat = (scale @ a_tilde @ scale).tocsr()
    a_hat.sort_indices()
    return SparseGraph(a_hat, is_normalized=True)


def row_normalize_features(x: np.ndarray, norm: str = "l1") -> np.ndarray:
    """Scale each nonzero row to unit L1 (or L2) norm; zero rows pass through."""
    x = np.asarray(x, dtype=float)
    if norm == "none":
        return x.copy()
    if norm == "l1":
        n = np.abs(x).sum(axis=1)
    elif norm == "l2":
        n = np.sqrt((x * x).sum(axis=1))
    else:
        raise ValueError(f"unknown feature normalization {norm!r}")
    n = np.where(n > 0, n, 1.0)
    return x / n[:, None]


def propagate(x_hat: np.ndarray, a_hat: SparseGraph, hop: int) -> np.ndarray:
    """Layer-`hop` input: A_hat applied hop-1 times to the feature matrix."""
    if hop < 1:
        raise ValueError("hop must be >= 1")
    if x_hat.shape[0] != a_hat.num_nodes:
        raise GraphError(
            f"feature rows {x_hat.shape[0]} != graph nodes {a_hat.num_nodes}"
        )
    out = x_hat
    for _ in range(hop - 1):
        out = a_hat.matrix @ out
    return np.array(out)


def propagate_all(x_hat: np.ndarray, a_hat: SparseGraph, layers: int):
    """Yield propagated inputs for hops 1..layers, one sparse product per hop."""
    if x_hat.shape[0] != a_hat.num_nodes:
        raise GraphError(
            f"feature rows {x_hat.shape[0]} != graph nodes {a_hat.num_nodes}"
        )
    out = x_hat
    for hop in range(1, layers + 1):
        if hop > 1:
            out = a_hat.matrix @ out
        yield np.asarray(out)


def adjacency_density(a_hat: SparseGraph, max_hop: int) -> list[float]:
    """Fraction of structurally nonzero entries of A_hat^h for h = 1..max_hop."""
    if max_hop < 1:
        raise ValueError("max_hop must be >= 1")
    n = a_hat.num_nodes
    base = a_hat.matrix.copy()
    base.data = np.ones_like(base.data, dtype=np.float64)
    cur = base
    out = [cur.nnz / n**2]
    for _ in range(max_hop - 1):
        cur = (cur @ base).tocsr()
        # structure only: keep counts from overflowing into meaningless values
        cur.data[:] = 1.0
        out.append(cur.nnz / n**2)
    return out
