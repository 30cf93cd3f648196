"""Layer-wise GANN training: forward pass, combined loss, patience loop and ensembling."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import alignment as al
from .graph import SparseGraph, propagate_all
from .nn import (
    LayerParams,
    NumericError,
    OptimizerState,
    adam_step,
    dropout,
    linear,
    log_softmax_rows,
    relu,
    row_unit_normalize,
    row_unit_normalize_backward,
)

log = logging.getLogger(__name__)


@dataclass
class GannConfig:
    layers: int = 5
    hidden: int = 5000
    lr: float = 0.01
    weight_decay: float = 1e-4
    dropout: float = 0.0
    topk: int = 10
    eta: float = 0.5
    lam: float = 1.0
    beta: float = 0.5
    gamma: float = 0.5
    tem: float = 0.5
    patience: int = 30
    epsilon: float = 1e-12
    max_iters_per_layer: int = 500
    seed: int = 0
    reset_patience: bool = False
    binarize_targets: bool = False
    mixmatch_sharpen: bool = False
    center_loss: bool = True
    feature_norm: str = "l1"
    precision: str = "double"

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.tem <= 0:
            raise ValueError("tem must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GannConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# Weighted supervised learning only: the ADAGCN-style ablation.
ADAGCN_PRESET = dict(beta=0.0, gamma=0.0, center_loss=False)


@dataclass
class SampleWeights:
    w: np.ndarray

    @classmethod
    def uniform(cls, n: int) -> "SampleWeights":
        return cls(np.full(n, 1.0 / n))


@dataclass
class LayerOutput:
    x_in: np.ndarray   # layer input after dropout
    h1: np.ndarray
    e: np.ndarray
    h2: np.ndarray
    z: np.ndarray      # log-probabilities, N x C


@dataclass
class GannData:
    """Everything a run needs that does not change across layers or iterations."""

    a_hat: SparseGraph
    x_hat: np.ndarray
    labels: np.ndarray
    num_classes: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    target: al.FeatureTarget


def forward_layer(p_l: np.ndarray, params: LayerParams, cfg: GannConfig,
                  rng: np.random.Generator | None = None, training: bool = False) -> LayerOutput:
    x_in, _ = dropout(p_l, cfg.dropout, rng, training=training)
    h1 = relu(linear(x_in, params.w1))
    e = row_unit_normalize(h1, cfg.epsilon)
    h2 = relu(linear(h1, params.w2))
    z = log_softmax_rows(h2)
    return LayerOutput(x_in, h1, e, h2, z)


def total_loss(out: LayerOutput, params: LayerParams, data: GannData, weights: SampleWeights,
               cfg: GannConfig, sharp: np.ndarray | None = None):
    """L_semi + L_e + beta * L_f + gamma * L_me and its gradient.

    The sharpened target of L_me is a constant (no gradient flows through it);
    pass `sharp` to pin it, otherwise it is computed from the current output.
    Returns ``(loss, grads, parts)`` with `parts` holding each component.
    """
    n = out.z.shape[0]
    idx = data.train_idx
    y = data.labels[idx]
    p = np.exp(out.z)

    # weighted NLL: d/dlogits of -w_i log p_{i,y_i} is w_i (p_i - onehot(y_i))
    w = weights.w.astype(p.dtype)
    semi = float(-(w * out.z[idx, y]).sum())
    d_h2 = np.zeros_like(p)
    d_h2[idx] = w[:, None] * p[idx]
    d_h2[idx, y] -= w

    me = 0.0
    if cfg.gamma:
        if sharp is None:
            sharp = al.sharpen(p, cfg.tem, mixmatch=cfg.mixmatch_sharpen)
        me, g = al.min_entropy_loss(p, sharp)
        d_h2 += cfg.gamma * g

    d_e = np.zeros_like(out.e)
    feat = 0.0
    if cfg.beta:
        feat, g = al.feature_alignment_loss(out.e, data.target)
        d_e += cfg.beta * g

    center = 0.0
    if cfg.center_loss:
        centers = al.cluster_centers(out.e, data.labels, idx, data.num_classes)
        center, g_bar = al.center_alignment_loss(centers, cfg.lam)
        d_e += al.centers_backward(g_bar, centers, n)

    d_a2 = d_h2 * (out.h2 > 0)
    g_w2 = out.h1.T @ d_a2
    d_h1 = d_a2 @ params.w2.T
    d_h1 += row_unit_normalize_backward(out.h1, d_e, cfg.epsilon)
    d_a1 = d_h1 * (out.h1 > 0)
    g_w1 = out.x_in.T @ d_a1

    loss = semi + center + cfg.beta * feat + cfg.gamma * me
    parts = {"semi": semi, "center": center, "feature": feat, "min_entropy": me}
    return loss, LayerParams(g_w1, g_w2), parts


def evaluate_accuracy(z: np.ndarray, labels: np.ndarray, mask) -> float:
    """Share of masked nodes whose row argmax (first index on ties) matches the label."""
    mask = np.asarray(mask)
    if mask.dtype == bool:
        mask = np.flatnonzero(mask)
    if mask.size == 0:
        raise ValueError("empty evaluation mask")
    pred = np.argmax(z[mask], axis=1)
    return float(np.mean(pred == np.asarray(labels)[mask]))


def update_sample_weights(weights: SampleWeights, z: np.ndarray, labels: np.ndarray, train_idx,
                          num_classes: int) -> SampleWeights:
    """SAMME.R-style reweighting: w_i *= exp(-(C-1)/C * log p_i[y_i]), then renormalize."""
    idx = np.asarray(train_idx)
    logp = z[idx, np.asarray(labels)[idx]].astype(np.float64)
    expo = -((num_classes - 1) / num_classes) * logp
    # shift before exponentiating; the constant cancels in the renormalization
    w = weights.w * np.exp(expo - expo.max())
    return SampleWeights(w / w.sum())


@dataclass
class LayerResult:
    params: LayerParams
    output: LayerOutput
    iterations: int
    best_iteration: int
    init_digest: str
    best_digest: str
    trace: list = field(default_factory=list)


def train_layer(params: LayerParams, p_l: np.ndarray, layer_index: int, data: GannData,
                weights: SampleWeights, cfg: GannConfig, rng: np.random.Generator,
                prev_z_sum: np.ndarray | None = None, prev_count: int = 0) -> LayerResult:
    """Optimize one layer from `params` and keep the checkpoint with the best
    validation accuracy of the running ensemble (previous layers + this one).

    Patience: the counter grows every time the loss fails to drop below the
    previous step's loss and is not reset unless ``cfg.reset_patience`` is set (then it counts steps
    since the best loss, conventional early stopping).
    """
    params = params.copy()
    init_digest = params.digest()
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    best = None
    best_acc = -1.0
    prev_loss, best_loss, stall = np.inf, np.inf, 0
    trace = []
    it = 0
    for it in range(cfg.max_iters_per_layer):
        out = forward_layer(p_l, params, cfg, rng, training=True)
        loss, grads, _ = total_loss(out, params, data, weights, cfg)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at layer {layer_index}, iteration {it}")
        ev = out if cfg.dropout == 0 else forward_layer(p_l, params, cfg, training=False)
        ens = ev.z if prev_z_sum is None else (prev_z_sum + ev.z) / (prev_count + 1)
        val_acc = evaluate_accuracy(ens, data.labels, data.val_idx)
        test_acc = evaluate_accuracy(ens, data.labels, data.test_idx)
        trace.append((layer_index, it, float(loss), val_acc, test_acc))
        if val_acc > best_acc:
            best_acc = val_acc
            best = (params.copy(), ev, it)

        if cfg.reset_patience:
            if loss < best_loss:
                best_loss, stall = loss, 0
            else:
                stall += 1
        elif loss >= prev_loss:
            stall += 1
        prev_loss = loss
        if stall >= cfg.patience:
            break
        adam_step(params, grads, opt)

    best_params, best_out, best_it = best
    # drop the cached dropout input; only the eval-mode activations are kept
    best_out = LayerOutput(None, best_out.h1, best_out.e, best_out.h2, best_out.z)
    return LayerResult(best_params, best_out, it + 1, best_it, init_digest, best_params.digest(), trace)


@dataclass
class GannResult:
    z: np.ndarray                      # ensemble log-probabilities
    layer_z: list                      # per-layer eval-mode log-probabilities
    final_output: LayerOutput          # last layer's activations
    layers: list                       # per-layer metrics dicts
    trace: list                        # (layer, iteration, train_loss, val_acc, test_acc)
    sample_weights: list


def prepare_data(bundle, split, cfg: GannConfig) -> GannData:
    from .graph import row_normalize_features, symmetric_normalize

    x_hat = row_normalize_features(bundle.features, cfg.feature_norm)
    target = al.feature_target_from_features(x_hat, cfg.eta, cfg.topk, cfg.binarize_targets)
    return GannData(
        a_hat=symmetric_normalize(bundle.graph),
        x_hat=x_hat.astype(cfg.dtype),
        labels=np.asarray(bundle.labels),
        num_classes=bundle.num_classes,
        train_idx=np.asarray(split.train_idx),
        val_idx=np.asarray(split.val_idx),
        test_idx=np.asarray(split.test_idx),
        target=target,
    )


def run_gann(data: GannData, cfg: GannConfig) -> GannResult:
    rng = np.random.default_rng(cfg.seed)
    d = data.x_hat.shape[1]
    params = LayerParams.init(d, cfg.hidden, data.num_classes, rng, cfg.dtype)
    weights = SampleWeights.uniform(len(data.train_idx))
    weight_history = [weights.w.copy()]
    layer_z, layers, trace = [], [], []
    z_sum = None
    out = None
    for l, p_l in enumerate(propagate_all(data.x_hat, data.a_hat, cfg.layers), start=1):
        res = train_layer(params, p_l, l, data, weights, cfg, rng, z_sum, len(layer_z))
        params = res.params
        out = res.output
        layer_z.append(out.z)
        z_sum = out.z.astype(np.float64) if z_sum is None else z_sum + out.z
        ens = z_sum / len(layer_z)
        metrics = {
            "layer": l,
            "iterations": res.iterations,
            "best_iteration": res.best_iteration,
            "init_digest": res.init_digest,
            "best_digest": res.best_digest,
            "val_acc": evaluate_accuracy(out.z, data.labels, data.val_idx),
            "test_acc": evaluate_accuracy(out.z, data.labels, data.test_idx),
            "ensemble_val_acc": evaluate_accuracy(ens, data.labels, data.val_idx),
            "ensemble_test_acc": evaluate_accuracy(ens, data.labels, data.test_idx),
        }
        log.info("layer %d: %d iters, val %.4f, ensemble val %.4f", l, res.iterations,
                 metrics["val_acc"], metrics["ensemble_val_acc"])
        layers.append(metrics)
        trace.extend(res.trace)
        weights = update_sample_weights(weights, out.z, data.labels, data.train_idx, data.num_classes)
        weight_history.append(weights.w.copy())
    z = np.mean(np.stack(layer_z), axis=0)
    return GannResult(z, layer_z, out, layers, trace, weight_history)
