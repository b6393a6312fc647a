"""Optimizer, losses, gradient clamping, and task metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import Graph, Node
from .layers import Parameters
from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(theta: Parameters, grads: Parameters, state: AdamState) -> Parameters:
    """One bias-corrected Adam update; mutates ``state``, returns new Parameters."""
    state.step += 1
    t = state.step
    out = Parameters()
    for name, value in theta.items():
        g = grads[name].data
        if not np.all(np.isfinite(g)):
            raise T.NumericsError(f"non-finite gradient for parameter {name!r}")
        if g.shape != value.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {value.shape} "
                             f"for {name!r}")
        m = state.m.get(name, np.zeros(value.shape))
        v = state.v.get(name, np.zeros(value.shape))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        out[name] = Tensor(value.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def grad_clamp(grads: Parameters, max_norm: float) -> Parameters:
    """Scale all gradients together so their global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = math.sqrt(sum(float(np.sum(g.data ** 2)) for g in grads.values()))
    # relative slack keeps the clamp exactly idempotent under rounding
    if total <= max_norm * (1.0 + 1e-12):
        return grads.copy()
    factor = max_norm / total
    return Parameters({n: T.scale(g, factor) for n, g in grads.items()})


# ---------------------------------------------------------------------------
# losses: value-level for reporting, graph builders for training

_BCE_EPS = 1e-12


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    return T.reduce_mean(T.mul(T.sub(pred, target), T.sub(pred, target)))


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"bce shapes differ: {pred.shape} vs {target.shape}")
    p = np.clip(pred.data, _BCE_EPS, 1.0 - _BCE_EPS)
    t = target.data
    return Tensor(-np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)))


def build_mse(g: Graph, pred: Node, target: Node) -> Node:
    diff = g.sub(pred, target)
    return g.mean(g.mul(diff, diff))


def build_bce(g: Graph, pred: Node, target: Node) -> Node:
    p = g.clip(pred, _BCE_EPS, 1.0 - _BCE_EPS)
    pos = g.mul(target, g.log(p))
    neg = g.mul(g.offset(g.scale(target, -1.0), 1.0),
                g.log(g.offset(g.scale(p, -1.0), 1.0)))
    return g.scale(g.mean(g.add(pos, neg)), -1.0)


# ---------------------------------------------------------------------------
# metrics


def psnr(pred: Tensor, target: Tensor, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the images match exactly."""
    if pred.shape != target.shape:
        raise ShapeError(f"psnr shapes differ: {pred.shape} vs {target.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((pred.data - target.data) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / mse)


def f1_score(pred: Tensor, target: Tensor) -> float:
    """Example-based F1 for binary label matrices shaped (labels, samples).

    Per sample: 2|P & T| / (|P| + |T|), defined as 1 when both sets are empty
    and 0 when exactly one is; the score is the mean over samples.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"f1 shapes differ: {pred.shape} vs {target.shape}")
    p = pred.data.reshape(pred.shape[0], -1)
    t = target.data.reshape(target.shape[0], -1)
    if not (np.isin(p, (0.0, 1.0)).all() and np.isin(t, (0.0, 1.0)).all()):
        raise ValueError("f1_score needs binary entries")
    inter = np.sum((p == 1.0) & (t == 1.0), axis=0)
    sizes = p.sum(axis=0) + t.sum(axis=0)
    scores = np.where(sizes > 0, 2.0 * inter / np.maximum(sizes, 1.0), 1.0)
    return float(np.mean(scores))


def select_threshold(scores: Tensor, target: Tensor,
                     grid=tuple(round(0.05 * i, 2) for i in range(1, 20))) -> float:
    """Pick the binarization threshold maximizing example-based F1.

    Ties break toward the smaller threshold so the sweep is deterministic.
    """
    best_tau, best_f1 = grid[0], -1.0
    for tau in grid:
        f1 = f1_score(Tensor((scores.data >= tau).astype(np.float64)), target)
        if f1 > best_f1:
            best_tau, best_f1 = tau, f1
    return best_tau
