"""Building blocks of the emission network, written over numcore primitives.

All functions accept optional leading batch axes.
"""

from __future__ import annotations

import math

import numpy as np

from .. import numcore as nc
from ..numcore import ShapeError, Tensor

COSINE_EPS = 1e-12


class ModelError(ValueError):
    pass


def se_gates(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Channel gates in (0, 1): sigmoid(W2 relu(W1 z)) with z the per-channel spatial mean."""
    z = nc.global_avg_pool(x)
    return nc.sigmoid(nc.dense(nc.relu(nc.dense(z, w1)), w2))


def se_block(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Squeeze-and-excitation: rescale each channel of ``(..., H, W, C)`` by its gate."""
    c = x.shape[-1]
    if w1.shape[1] != c or w2.shape != (c, w1.shape[0]):
        raise ShapeError(f"se_block: W1 {w1.shape} / W2 {w2.shape} do not fit {c} channels")
    s = se_gates(x, w1, w2)
    return x * nc.reshape(s, s.shape[:-1] + (1, 1, c))


def attention_scores(x: Tensor, a: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Scalar score a . tanh(W x + b) per representation (last axis reduced)."""
    return nc.sum(a * nc.tanh(nc.dense(x, W, b)), axis=-1)


def aggregate_attention(xa: Tensor, xb: Tensor, a: Tensor, W: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax-weighted convex fusion of two representations.

    Returns ``(weights, fused)`` where ``weights[..., 0]`` belongs to ``xa``.
    """
    if xa.shape != xb.shape:
        raise ShapeError(f"aggregate_attention: {xa.shape} vs {xb.shape}")
    if W.shape[1] != xa.shape[-1]:
        raise ShapeError(f"aggregate_attention: W {W.shape} vs dim {xa.shape[-1]}")
    scores = nc.stack([attention_scores(xa, a, W, b), attention_scores(xb, a, W, b)], axis=-1)
    weights = nc.softmax(scores, axis=-1)
    wa = nc.reshape(weights[..., 0], weights.shape[:-1] + (1,))
    wb = nc.reshape(weights[..., 1], weights.shape[:-1] + (1,))
    return weights, wa * xa + wb * xb


def _unit_rows(x: Tensor, label: str) -> Tensor:
    norms = np.sqrt((x.data ** 2).sum(axis=-1))
    bad = np.flatnonzero(norms <= COSINE_EPS)
    if bad.size:
        raise ModelError(f"ntxent: {label} embedding of sample {int(bad[0])} has zero norm")
    n = nc.sqrt(nc.sum(x * x, axis=-1, keepdims=True))
    return x / n


def ntxent(xs: Tensor, xp: Tensor, tau: float, denominator: str = "paper") -> Tensor:
    """Two-direction cross-modal NT-Xent, averaged over the batch.

    With ``denominator="paper"`` each softmax denominator runs over k != i only;
    ``"standard"`` also includes the positive pair.
    """
    if xs.ndim != 2 or xs.shape != xp.shape:
        raise ShapeError(f"ntxent needs two (N, m) batches, got {xs.shape} and {xp.shape}")
    n = xs.shape[0]
    if n < 2:
        raise ModelError("ntxent needs a batch of at least 2")
    if tau <= 0:
        raise ModelError("temperature must be positive")
    if denominator not in ("paper", "standard"):
        raise ModelError(f"unknown ntxent denominator {denominator!r}")
    sim = nc.matmul(_unit_rows(xs, "image"), nc.transpose(_unit_rows(xp, "POI"))) / tau
    mask = ~np.eye(n, dtype=bool) if denominator == "paper" else None
    positive = nc.getitem(sim, (np.arange(n), np.arange(n)))
    row_term = nc.logsumexp(sim, axis=1, mask=mask)      # sum over k of sim(s_i, p_k)
    col_term = nc.logsumexp(sim, axis=0, mask=mask)      # sum over k of sim(s_k, p_i)
    per_sample = (row_term - positive) + (col_term - positive)
    return nc.mean(per_sample)


def cross_attention(query_src: Tensor, kv: Tensor, kv_mask: np.ndarray, residual: Tensor,
                    wq: Tensor, wk: Tensor, wv: Tensor) -> tuple[Tensor, Tensor]:
    """Single-head scaled dot-product attention plus residual.

    ``query_src`` is ``(B, m)``, ``kv`` is ``(B, K, m)`` with boolean ``kv_mask``
    ``(B, K)``. Returns ``(output, weights)``.
    """
    b, k, _ = kv.shape
    d = wq.shape[0]
    q = nc.dense(query_src, wq)
    keys = nc.dense(kv, wk)
    vals = nc.dense(kv, wv)
    scores = nc.reshape(nc.matmul(keys, nc.reshape(q, (b, d, 1))), (b, k)) / math.sqrt(d)
    weights = nc.masked_softmax(scores, kv_mask, axis=-1)
    attended = nc.reshape(nc.matmul(nc.reshape(weights, (b, 1, k)), vals), (b, vals.shape[-1]))
    return attended + residual, weights


def mae(pred: Tensor, target) -> Tensor:
    return nc.mean(nc.abs(pred - target))


def total_loss(pred: Tensor, target, xs: Tensor, xp: Tensor, alpha: float, epoch: int,
               gate_epoch: int = 100, tau: float = 0.5, denominator: str = "paper") -> Tensor:
    """Mean absolute error, plus ``alpha`` times NT-Xent from ``gate_epoch`` on."""
    if alpha < 0:
        raise ModelError("alpha must be nonnegative")
    loss = mae(pred, target)
    if alpha > 0 and epoch >= gate_epoch:
        if pred.shape[0] < 2:
            raise ModelError("contrastive term needs a batch of at least 2")
        loss = loss + alpha * ntxent(xs, xp, tau, denominator)
    return loss


def conv_stack(x: Tensor, layers: list, activation=nc.relu) -> Tensor:
    """Same-padded 3x3 (or kxk) conv + bias + activation for each ``(kernel, bias)``."""
    h = x
    for kernel, bias in layers:
        h = activation(nc.conv2d(h, kernel, stride=1, padding=kernel.shape[0] // 2) + bias)
    return h

