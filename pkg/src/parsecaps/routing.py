"""Capsule routing: the sparse attention and axial attention branches, the
iterative dynamic-routing baseline, and an analytic FLOP model for comparing
routing algorithms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .entmax import DEFAULT_ALPHA, entmax
from .layers import CapsuleTensor, Linear, Module, squash
from .tensor import ShapeError, Tensor, softmax, tsum

ROUTING_KINDS = ("saa", "attention", "dynamic")


@dataclass
class RoutingSpec:
    """Configuration of one routing instance.

    ``alpha`` is the entmax exponent of both attention branches;
    ``iterations`` only applies to dynamic routing. The two branch outputs
    are always combined by elementwise sum.
    """

    alpha: float = DEFAULT_ALPHA
    iterations: int = 3

    def __post_init__(self):
        if not self.alpha > 1.0:
            raise ValueError(f"routing alpha must exceed 1, got {self.alpha}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


class SAARouter(Module):
    """Sparse axial attention routing between two capsule layers.

    The sparse branch couples child capsules to parents: predictions act as
    queries, keys/values are pointwise projections of the child capsules,
    and the coupling matrix is entmax-normalized per parent. The axial
    branch treats each instantiation parameter of a parent capsule as a
    scalar token and attends across the dimension axis, with keys/values
    projected from the spatially downsampled child source so the folded
    shapes agree. Setting ``uniform_couplings`` replaces both attention
    maps with constant uniform rows (a debug switch that isolates routing
    from layer bugs).
    """

    def __init__(self, rng, d_in: int, d_out: int, alpha: float = DEFAULT_ALPHA):
        self.key_proj = Linear(rng, d_in, d_out, bias=False)
        self.value_proj = Linear(rng, d_in, d_out, bias=False)
        self.axial_key_proj = Linear(rng, d_in, d_out, bias=False)
        self.axial_value_proj = Linear(rng, d_in, d_out, bias=False)
        self.alpha = alpha
        self.d_out = d_out
        self.uniform_couplings = False

    def _normalize(self, scores: Tensor) -> Tensor:
        if self.uniform_couplings:
            k = scores.shape[-1]
            return Tensor(np.full(scores.shape, 1.0 / k))
        return entmax(scores, self.alpha)

    def sparse_attention_route(self, u: CapsuleTensor,
                               u_hat: CapsuleTensor) -> CapsuleTensor:
        if u.batch != u_hat.batch:
            raise ShapeError(f"batch mismatch: {u.data.shape} vs {u_hat.data.shape}")
        if u_hat.dim != self.d_out:
            raise ShapeError(f"prediction dim {u_hat.dim} != router dim {self.d_out}")
        keys = self.key_proj(u.data)        # (B, n_in, d_out)
        values = self.value_proj(u.data)
        scale = 1.0 / math.sqrt(self.d_out)
        scores = (u_hat.data @ keys.transpose((0, 2, 1))) * scale  # (B, n_out, n_in)
        coupling = self._normalize(scores)
        return squash(CapsuleTensor(coupling @ values))

    def axial_attention_route(self, u_ds: CapsuleTensor,
                              u_hat: CapsuleTensor) -> CapsuleTensor:
        if u_ds.count != u_hat.count:
            raise ShapeError(
                f"axial source count {u_ds.count} != prediction count {u_hat.count}")
        b, n_out, d_out = u_hat.data.shape
        keys = self.axial_key_proj(u_ds.data)       # (B, n_out, d_out)
        values = self.axial_value_proj(u_ds.data)
        fold = (b * n_out, d_out, 1)
        q = u_hat.data.reshape(fold)
        k = keys.reshape((b * n_out, 1, d_out))
        scale = 1.0 / math.sqrt(n_out)
        scores = (q @ k) * scale                    # (B*n_out, d_out, d_out)
        coupling = self._normalize(scores)
        s = coupling @ values.reshape(fold)         # (B*n_out, d_out, 1)
        return squash(CapsuleTensor(s.reshape((b, n_out, d_out))))

    def route(self, u: CapsuleTensor, u_ds: CapsuleTensor,
              u_hat: CapsuleTensor) -> CapsuleTensor:
        """Elementwise sum of the two branch outputs (each already squashed)."""
        sparse = self.sparse_attention_route(u, u_hat)
        axial = self.axial_attention_route(u_ds, u_hat)
        return CapsuleTensor(sparse.data + axial.data)


def capsule_votes(u: CapsuleTensor, weight: Tensor, n_out: int,
                  d_out: int) -> Tensor:
    """Per-pair vote transform for iterative routing.

    ``weight`` has shape (n_in, d_in, n_out * d_out): each child applies its
    own linear map toward every parent. Returns (B, n_in, n_out, d_out).
    """
    b, n_in, _ = u.data.shape
    per_child = u.data.transpose((1, 0, 2)) @ weight   # (n_in, B, n_out*d_out)
    return per_child.reshape((n_in, b, n_out, d_out)).transpose((1, 0, 2, 3))


def dynamic_route(u_hat_votes: Tensor, iterations: int = 3) -> CapsuleTensor:
    """Routing-by-agreement over precomputed votes (B, n_in, n_out, d_out).

    Logits start at zero; each iteration softmax-normalizes them over the
    parent axis, forms parent capsules as squashed coupling-weighted vote
    sums, and reinforces logits by vote/parent agreement. Gradients flow
    through every iteration.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    b, n_in, n_out, d_out = u_hat_votes.shape
    logits = Tensor(np.zeros((b, n_in, n_out)))
    parents = None
    for it in range(iterations):
        coupling = softmax(logits, axis=2)
        weighted = u_hat_votes * coupling.reshape((b, n_in, n_out, 1))
        parents = squash(tsum(weighted, axis=1))            # (B, n_out, d_out)
        if it + 1 < iterations:
            agree = tsum(u_hat_votes * parents.reshape((b, 1, n_out, d_out)),
                         axis=3)
            logits = logits + agree
    return CapsuleTensor(parents)


@dataclass
class RoutingBenchShape:
    """Geometry of the three-layer benchmark model: a stride-2 conv stem,
    a primary capsule stage, and one routed class-capsule stage.

    ``n_in_override`` fixes the child capsule count directly (used by the
    scaling tests); otherwise attention-based kinds get one capsule per
    feature-map site, while dynamic routing uses the classic
    channel-partitioned layout with conv_channels/d_in capsules per site.
    """

    image_hw: int = 28
    in_channels: int = 1
    conv_channels: int = 256
    conv_kernel: int = 3
    conv_stride: int = 2
    d_in: int = 8
    n_out: int = 10
    d_out: int = 16
    iterations: int = 3
    n_in_override: int | None = None

    @property
    def feature_hw(self) -> int:
        return (self.image_hw + 2 - self.conv_kernel) // self.conv_stride + 1

    @property
    def n_sites(self) -> int:
        return self.feature_hw ** 2

    def children(self, routing_kind: str) -> int:
        if self.n_in_override is not None:
            return self.n_in_override
        if routing_kind == "dynamic":
            return self.n_sites * (self.conv_channels // self.d_in)
        return self.n_sites


def flop_breakdown(shape: RoutingBenchShape, routing_kind: str) -> dict:
    """Multiply-add counts for one forward routing call, by stage.

    Counts cover the routing machinery only (prediction, projections,
    coupling, vote application); the shared stem is excluded so the totals
    scale with the routing algorithm itself. Normalization and squash are
    omitted as lower-order terms.
    """
    if routing_kind not in ROUTING_KINDS:
        raise ValueError(f"unknown routing kind {routing_kind!r}; "
                         f"expected one of {ROUTING_KINDS}")
    s = shape
    n_in = s.children(routing_kind)
    if routing_kind == "dynamic":
        return {
            "votes": n_in * s.n_out * s.d_in * s.d_out,
            "routing_iterations": s.iterations * 2 * n_in * s.n_out * s.d_out,
        }
    if routing_kind == "attention":
        return {
            "votes": n_in * s.n_out * s.d_in * s.d_out,
            "attention_map": n_in ** 2 * s.d_out ** 2,
            "attention_apply": n_in ** 2 * s.d_out,
        }
    return {
        "prediction": 9 * n_in * s.d_in + s.n_out * s.d_in * s.d_out,
        "sparse_kv": 2 * n_in * s.d_in * s.d_out,
        "sparse_attention": 2 * n_in * s.n_out * s.d_out,
        "axial_kv": 2 * s.n_out * s.d_in * s.d_out,
        "axial_attention": 2 * s.n_out * s.d_out ** 2,
    }


def flop_model(shape: RoutingBenchShape, routing_kind: str) -> int:
    """Analytic FLOP count (two FLOPs per multiply-add) for one forward
    routing call of the given kind at the given geometry."""
    return 2 * sum(flop_breakdown(shape, routing_kind).values())
