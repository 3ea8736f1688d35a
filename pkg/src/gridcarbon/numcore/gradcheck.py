"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Graph, Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute disagreement scaled by the larger of the two gradient magnitudes.

    Normalizing by the tensor-wide scale keeps near-zero entries from dominating;
    an all-zero pair counts as exact agreement.
    """
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def numeric_grad(fn: Callable[[], Tensor], target: Tensor, h: float = 1e-6,
                 coords: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``target.data`` (mutated in place and restored)."""
    base = target.data
    work = base.copy()
    target.data = work
    grad = np.zeros_like(base)
    index_iter = coords if coords is not None else list(np.ndindex(base.shape))
    try:
        for idx in index_iter:
            orig = work[idx]
            work[idx] = orig + h
            fp = fn().item()
            work[idx] = orig - h
            fm = fn().item()
            work[idx] = orig
            grad[idx] = (fp - fm) / (2.0 * h)
    finally:
        target.data = base
    return grad


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-6) -> float:
    """Worst :func:`relative_error` over ``inputs`` between backprop and finite differences."""
    for t in inputs:
        t.zero_grad()
    backward(fn())
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numeric_grad(fn, t, h)))
    return worst


def directional_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor],
                      rng: np.random.Generator, h: float = 1e-6, order: int = 2,
                      atol: float = 1e-10) -> float:
    """Compare grad . v with a central difference along a random unit direction v, per input.

    Cheap substitute for a full coordinate sweep when the inputs are large.
    ``order=4`` uses the five-point stencil, which tolerates a larger ``h`` and so
    loses less to roundoff when the loss is large relative to its slope.
    Disagreements below ``atol`` count as exact (e.g. a gradient that cancels to zero).
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    for t in inputs:
        t.zero_grad()
    backward(fn())
    analytic_grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    worst = 0.0
    for t, g in zip(inputs, analytic_grads):
        v = rng.standard_normal(t.shape)
        v /= np.linalg.norm(v)
        base = t.data

        def along(step):
            t.data = base + step * v
            return fn().item()

        try:
            if order == 2:
                numeric = (along(h) - along(-h)) / (2.0 * h)
            else:
                numeric = (8.0 * (along(h) - along(-h)) - (along(2 * h) - along(-2 * h))) / (12.0 * h)
        finally:
            t.data = base
        analytic = float(np.sum(g * v))
        scale = max(abs(analytic), abs(numeric), np.linalg.norm(g) * 1e-3)
        if scale > 0 and abs(analytic - numeric) > atol:
            worst = max(worst, abs(analytic - numeric) / scale)
    return worst


NONSMOOTH_OPS = ("relu", "abs")


def kink_margin(output: Tensor) -> float:
    """Smallest distance from zero of any relu/abs input in ``output``'s graph.

    Finite differences are only meaningful at points farther than the step from
    every kink; callers resample points whose margin is too small.
    """
    margins = [np.min(np.abs(n._parents[0].data), initial=np.inf)
               for n in Graph.from_output(output).nodes if n.op in NONSMOOTH_OPS and n._parents]
    return float(min(margins, default=np.inf))
