"""Alpha-entmax transforms: the sparse softmax that normalizes routing scores.

``entmax_forward``/``entmax_backward`` operate on plain arrays row-wise over
the last axis; ``entmax`` wires them into the autodiff graph. For alpha = 2
the transform is exactly the Euclidean projection onto the simplex
(sparsemax), for which ``sparsemax_reference`` provides an independent
sorted-threshold oracle used by the test suite. alpha -> 1 recovers softmax,
handled by a dedicated fast path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _make

# Routing default; sparsity between softmax (1) and sparsemax (2).
DEFAULT_ALPHA = 1.5

_BISECT_ITERS = 50


@dataclass
class EntmaxResult:
    """Forward outputs: probabilities, per-row threshold, support mask."""

    probs: np.ndarray
    tau: np.ndarray
    support_mask: np.ndarray


def entmax_forward(x: np.ndarray, alpha: float) -> EntmaxResult:
    """Normalize the last axis of ``x`` with alpha-entmax.

    p_i = max((alpha-1)*x_i - tau, 0) ** (1/(alpha-1)), with tau located by
    bisection so each row sums to one. alpha = 1 falls back to softmax
    (full support); alpha < 1 is rejected.
    """
    x = np.asarray(x, dtype=np.float64)
    if alpha < 1.0:
        raise ValueError(f"entmax requires alpha >= 1, got {alpha}")
    if alpha == 1.0:
        shift = x.max(axis=-1, keepdims=True)
        e = np.exp(x - shift)
        total = e.sum(axis=-1, keepdims=True)
        probs = e / total
        tau = (np.log(total) + shift).squeeze(-1)
        return EntmaxResult(probs, tau, np.ones_like(probs, dtype=bool))

    expo = 1.0 / (alpha - 1.0)
    z = (alpha - 1.0) * x
    lo = z.min(axis=-1) - 1.0
    hi = z.max(axis=-1)
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        mass = np.maximum(z - mid[..., None], 0.0) ** expo
        above = mass.sum(axis=-1) >= 1.0
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    tau = 0.5 * (lo + hi)
    probs = np.maximum(z - tau[..., None], 0.0) ** expo
    probs = probs / probs.sum(axis=-1, keepdims=True)
    return EntmaxResult(probs, tau, probs > 0.0)


def entmax_backward(result: EntmaxResult, upstream: np.ndarray,
                    alpha: float) -> np.ndarray:
    """Jacobian-vector product of entmax at a forward result.

    On the support, with s_i = p_i ** (2 - alpha):
        (J^T g)_i = s_i * (g_i - sum_j(s_j g_j) / sum_j(s_j))
    and zero off-support.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != result.probs.shape:
        raise ValueError(
            f"upstream shape {g.shape} does not match forward {result.probs.shape}")
    p = result.probs
    if alpha == 1.0:
        return p * (g - (g * p).sum(axis=-1, keepdims=True))
    s = np.where(result.support_mask, p ** (2.0 - alpha), 0.0)
    ssum = s.sum(axis=-1, keepdims=True)
    correction = (s * g).sum(axis=-1, keepdims=True) / ssum
    return s * (g - correction)


def entmax(x: Tensor, alpha: float = DEFAULT_ALPHA) -> Tensor:
    """Autodiff-integrated alpha-entmax over the last axis."""
    result = entmax_forward(x.value, alpha)
    return _make(result.probs, (x,),
                 (lambda g: entmax_backward(result, g, alpha),))


def sparsemax_reference(x: np.ndarray) -> np.ndarray:
    """Exact sparsemax by the sorted-threshold rule; oracle for alpha = 2.

    Independent of the bisection path: sorts each row, finds the support
    size rho = max{k : sorted_k > (cumsum_k - 1)/k}, and projects.
    """
    x = np.asarray(x, dtype=np.float64)
    srt = np.sort(x, axis=-1)[..., ::-1]
    cssv = np.cumsum(srt, axis=-1) - 1.0
    k = np.arange(1, x.shape[-1] + 1, dtype=np.float64)
    support = srt * k > cssv
    rho = support.sum(axis=-1)
    idx = (rho - 1).astype(int)
    tau = np.take_along_axis(cssv, idx[..., None], axis=-1) / rho[..., None]
    return np.maximum(x - tau, 0.0)
