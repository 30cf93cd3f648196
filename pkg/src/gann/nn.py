"""Dense kernels, parameters, AdamW and a finite-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NumericError(FloatingPointError):
    pass


def linear(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"cannot multiply {x.shape} by {w.shape}")
    return x @ w


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool = True):
    """Inverted dropout. Returns (output, mask) where mask already carries the 1/(1-rate) scale."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not training or rate == 0.0:
        return x, np.ones_like(x)
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def row_unit_normalize(x: np.ndarray, epsilon: float = 1e-12) -> np.ndarray:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norms, epsilon)


def row_unit_normalize_backward(x: np.ndarray, grad_out: np.ndarray, epsilon: float = 1e-12) -> np.ndarray:
    """Gradient of h / max(||h||, eps) with respect to h."""
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    big = norms > epsilon
    safe = np.where(big, norms, epsilon)
    e = x / safe
    proj = (e * grad_out).sum(axis=1, keepdims=True)
    return np.where(big, (grad_out - e * proj) / safe, grad_out / epsilon)


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


@dataclass
class LayerParams:
    """Bias-free weights of the two MLP stages: w1 is d x h', w2 is h' x C."""

    w1: np.ndarray
    w2: np.ndarray

    @classmethod
    def init(cls, d: int, hidden: int, num_classes: int, rng: np.random.Generator, dtype=np.float64):
        return cls(glorot_uniform(d, hidden, rng, dtype), glorot_uniform(hidden, num_classes, rng, dtype))

    @classmethod
    def zeros_like(cls, other: "LayerParams") -> "LayerParams":
        return cls(np.zeros_like(other.w1), np.zeros_like(other.w2))

    def copy(self) -> "LayerParams":
        return LayerParams(self.w1.copy(), self.w2.copy())

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "w2": self.w2}

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for a in (self.w1, self.w2):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


# Gradients share the parameter layout.
GradientBuffer = LayerParams


@dataclass
class OptimizerState:
    lr: float = 0.01
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: LayerParams, grads: LayerParams, state: OptimizerState) -> None:
    """AdamW update in place: decoupled weight decay, then bias-corrected Adam."""
    p_dict, g_dict = params.as_dict(), grads.as_dict()
    for name, g in g_dict.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in p_dict.items():
        g = g_dict[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class GradCheckReport:
    max_rel_error: float
    num_checked: int
    worst: tuple | None
    passed: bool


def finite_difference_check(loss_and_grad, params: dict[str, np.ndarray], tolerance: float = 1e-4,
                            step: float = 1e-5, num_coords: int = 200, rng=None,
                            floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    `loss_and_grad(params)` must return ``(loss, grads)`` with grads keyed like
    `params`; the arrays in `params` are perturbed in place and restored.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``. When the parameters
    hold fewer than `num_coords` entries, every coordinate is checked.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    _, grads = loss_and_grad(params)
    grads = {k: np.array(v, dtype=float) for k, v in grads.items()}
    coords = [(name, idx) for name, arr in params.items() for idx in range(arr.size)]
    if len(coords) > num_coords:
        pick = rng.choice(len(coords), size=num_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst, max_err = None, 0.0
    for name, flat in coords:
        arr = params[name]
        idx = np.unravel_index(flat, arr.shape)
        orig = arr[idx]
        arr[idx] = orig + step
        lp, _ = loss_and_grad(params)
        arr[idx] = orig - step
        lm, _ = loss_and_grad(params)
        arr[idx] = orig
        numeric = (lp - lm) / (2 * step)
        analytic = grads[name][idx]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        if err > max_err or worst is None:
            max_err = max(max_err, err)
            worst = (name, idx, float(analytic), float(numeric))
    return GradCheckReport(max_err, len(coords), worst, max_err < tolerance)
