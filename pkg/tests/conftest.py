from pathlib import Path

import numpy as np
import pytest

from gann.data import generate_sbm, make_splits
from gann.graph import SparseGraph
from gann.model import GannConfig, prepare_data

FIXTURES = Path(__file__).parent / "fixtures"


def dense_normalize(a: np.ndarray) -> np.ndarray:
    """Independent dense evaluation of D~^{-1/2} (A + I) D~^{-1/2}."""
    at = a + np.eye(a.shape[0])
    d = at.sum(axis=1)
    out = np.empty_like(at)
    for i in range(at.shape[0]):
        for j in range(at.shape[0]):
            out[i, j] = at[i, j] / np.sqrt(d[i] * d[j])
    return out


def random_graph(n: int, p: float, rng) -> SparseGraph:
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    return SparseGraph.from_edges(n, np.column_stack([iu[keep], ju[keep]]))


def path_graph(n: int) -> SparseGraph:
    return SparseGraph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


@pytest.fixture
def tiny6_dir():
    return FIXTURES / "tiny6"


@pytest.fixture
def sbm12():
    """12-node, 3-class SBM instance used for gradient checks."""
    rng = np.random.default_rng(7)
    bundle = generate_sbm([4, 4, 4], 0.8, 0.1, 6, 0.3, rng)
    split = make_splits(bundle, 2, 3, rng)
    cfg = GannConfig(layers=2, hidden=5, topk=3, eta=0.2, seed=3)
    return bundle, split, cfg, prepare_data(bundle, split, cfg)
