"""GANN: layer-wise MLP ensembles over multi-hop propagated features with alignment losses."""
from .alignment import (
    center_alignment_loss,
    cluster_centers,
    cosine_similarity_matrix,
    embedding_correlation,
    feature_alignment_loss,
    build_feature_target,
    min_entropy_loss,
    sharpen,
)
from .data import DatasetBundle, SplitMasks, generate_sbm, load_dataset, make_splits, save_dataset
from .graph import SparseGraph, adjacency_density, propagate, row_normalize_features, symmetric_normalize
from .model import GannConfig, evaluate_accuracy, prepare_data, run_gann

__version__ = "0.1.0"
