"""Capsule-producing layers: stem, primary capsules, the parse convolutional
capsule layer, squash, per-capsule MLP cells, the concept layer, and the
reconstruction decoder.

Parameters are drawn from a caller-supplied ``numpy.random.Generator`` in
declaration order, so a fixed seed yields bit-identical models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    conv2d,
    conv2d_depthwise,
    conv2d_pointwise,
    conv_transpose2d,
    crop2d,
    layer_norm,
    relu,
    sigmoid,
    softmax,
    tsqrt,
    tsum,
)

_NORM_EPS = 1e-12
_SQUASH_EPS = 1e-9


class Module:
    """Minimal parameter container.

    Any attribute that is a grad-requiring Tensor is a parameter; Module
    attributes and lists of Modules are traversed recursively. Attribute
    declaration order fixes parameter order, which checkpointing relies on.
    """

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> list:
        out = []
        for name, obj in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(obj, Tensor) and obj.requires_grad:
                out.append((key, obj))
            elif isinstance(obj, Module):
                out.extend(obj.named_parameters(f"{key}."))
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{key}.{i}."))
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def uniform_param(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Weight initialized uniformly in +-sqrt(6/fan_in)."""
    bound = math.sqrt(6.0 / max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.weight = uniform_param(rng, (d_in, d_out), d_in)
        self.bias = zeros_param((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv(Module):
    """Cross-channel conv + bias, the building block of the stem."""

    def __init__(self, rng, c_in: int, c_out: int, kernel: int = 3,
                 stride: int = 1, padding: int = 1):
        self.weight = uniform_param(rng, (c_out, c_in, kernel, kernel),
                                    c_in * kernel * kernel)
        self.bias = zeros_param((c_out,))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return y + self.bias.reshape((1, -1, 1, 1))


class ConvTranspose(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int = 3,
                 stride: int = 1, padding: int = 1, output_padding: int = 0):
        self.weight = uniform_param(rng, (c_in, c_out, kernel, kernel),
                                    c_in * kernel * kernel)
        self.bias = zeros_param((c_out,))
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    def __call__(self, x: Tensor) -> Tensor:
        y = conv_transpose2d(x, self.weight, stride=self.stride,
                             padding=self.padding,
                             output_padding=self.output_padding)
        return y + self.bias.reshape((1, -1, 1, 1))


@dataclass
class CapsuleTensor:
    """A (batch, count, dim) view over a Tensor of capsule vectors."""

    data: Tensor

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"capsule tensors are 3-D, got {self.data.shape}")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def count(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


def capsule_norms(x: Tensor, eps: float = _NORM_EPS) -> Tensor:
    """Per-vector Euclidean norm along the last axis, safe at zero."""
    return tsqrt(tsum(x * x, axis=-1) + eps)


def squash(s):
    """Direction-preserving nonlinearity v = (|s|^2/(1+|s|^2)) * s/|s|.

    Maps zero to zero and bounds every output norm below one. Accepts a
    Tensor (last axis is the vector axis) or a CapsuleTensor.
    """
    if isinstance(s, CapsuleTensor):
        return CapsuleTensor(squash(s.data))
    n2 = tsum(s * s, axis=-1, keepdims=True)
    return s * (tsqrt(n2 + _SQUASH_EPS) / (n2 + 1.0))


class Stem(Module):
    """Four conv+ReLU stages lifting the image into feature maps."""

    def __init__(self, rng, in_channels: int, channels, strides):
        if len(channels) != 4 or len(strides) != 4:
            raise ValueError("stem takes exactly four channel/stride entries")
        self.convs = []
        c_prev = in_channels
        for c, s in zip(channels, strides):
            self.convs.append(Conv(rng, c_prev, c, kernel=3, stride=s, padding=1))
            c_prev = c
        self.out_channels = c_prev

    @staticmethod
    def out_size(size: int, strides) -> int:
        for s in strides:
            size = (size + 2 - 3) // s + 1
        return size

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] < 16 or x.shape[-2] < 16:
            raise ShapeError(f"stem needs inputs of at least 16x16, got {x.shape}")
        for conv in self.convs:
            x = relu(conv(x))
        return x


class PrimaryCaps(Module):
    """Turn feature maps into one capsule per spatial site.

    A bias-free pointwise projection maps channels to the capsule dimension
    so a zero input stays zero through the squash.
    """

    def __init__(self, rng, f0: int, d1: int):
        self.proj = uniform_param(rng, (d1, f0), f0)
        self.d1 = d1

    def __call__(self, phi0: Tensor) -> CapsuleTensor:
        b, _, h, w = phi0.shape
        y = conv2d_pointwise(phi0, self.proj)
        caps = y.reshape((b, self.d1, h * w)).transpose((0, 2, 1))
        return squash(CapsuleTensor(caps))


def grid_width(n: int) -> int:
    w = math.isqrt(n)
    if w * w != n:
        raise ShapeError(f"capsule count {n} is not a perfect square")
    return w


def pconv_out_count(n: int, stride: int = 2) -> int:
    """Shape law for the parse conv layer: 3x3 kernel, padding 1."""
    w = grid_width(n)
    return ((w + 2 - 3) // stride + 1) ** 2


class PConvCaps(Module):
    """Parse convolutional capsule layer.

    Reshapes (n, d) capsules onto a sqrt(n) x sqrt(n) grid with d as
    channels, applies a depthwise 3x3 convolution (stride 2 to narrow the
    tree, stride 1 inside a block), layer normalization across the capsule
    dimension, then a pointwise projection to the next dimension.
    ``downsample`` exposes the pre-projection tensor, which also serves as
    the key/value source of the axial attention branch.
    """

    def __init__(self, rng, d_in: int, d_out: int, stride: int = 2):
        self.kernel = uniform_param(rng, (d_in, 3, 3), 9)
        self.ln_gain = ones_param((d_in,))
        self.ln_bias = zeros_param((d_in,))
        self.proj = Linear(rng, d_in, d_out)
        self.stride = stride
        self.d_in = d_in
        self.d_out = d_out

    def downsample(self, u: CapsuleTensor) -> CapsuleTensor:
        b, n, d = u.data.shape
        if d != self.d_in:
            raise ShapeError(f"expected capsule dim {self.d_in}, got {d}")
        w = grid_width(n)
        if w < 2 and self.stride == 2:
            raise ShapeError(f"cannot narrow a {w}x{w} capsule grid")
        grid = u.data.transpose((0, 2, 1)).reshape((b, d, w, w))
        grid = conv2d_depthwise(grid, self.kernel, stride=self.stride, padding=1)
        wo = grid.shape[-1]
        flat = grid.reshape((b, d, wo * wo)).transpose((0, 2, 1))
        return CapsuleTensor(layer_norm(flat, self.ln_gain, self.ln_bias))

    def __call__(self, u: CapsuleTensor):
        """Return (downsampled source, capsule predictions)."""
        u_ds = self.downsample(u)
        return u_ds, CapsuleTensor(self.proj(u_ds.data))


class MLPCell(Module):
    """Per-capsule feed-forward (d -> 2d -> d) with residual + layer norm."""

    def __init__(self, rng, d: int):
        self.fc1 = Linear(rng, d, 2 * d)
        self.fc2 = Linear(rng, 2 * d, d)
        self.ln_gain = ones_param((d,))
        self.ln_bias = zeros_param((d,))

    def __call__(self, u: CapsuleTensor) -> CapsuleTensor:
        h = self.fc2(relu(self.fc1(u.data)))
        return CapsuleTensor(layer_norm(u.data + h, self.ln_gain, self.ln_bias))


@dataclass
class ConceptState:
    """Concept capsules plus the derived global capsule.

    Entry i of the global capsule is the norm of concept capsule i; the
    activations are a softmax over those norms. ``norms`` keeps the raw
    pre-softmax values for the presentation loss.
    """

    concept_caps: CapsuleTensor     # (B, m, d_c)
    global_capsule: Tensor          # (B, 1, m)
    activations: Tensor             # (B, m), rows sum to 1
    norms: Tensor                   # (B, m)


class ConceptLayer(Module):
    """Map the single top capsule into m concept capsules via two linear
    layers, then read each one out as a 1-D instantiation parameter."""

    def __init__(self, rng, d_top: int, m: int, d_c: int):
        hidden = m * d_c
        self.fc1 = Linear(rng, d_top, hidden)
        self.fc2 = Linear(rng, hidden, m * d_c)
        self.m = m
        self.d_c = d_c

    def __call__(self, u_top: CapsuleTensor) -> ConceptState:
        if u_top.count != 1:
            raise ShapeError(f"concept layer expects a single top capsule, "
                             f"got {u_top.count}")
        b = u_top.batch
        h = relu(self.fc1(u_top.data.reshape((b, -1))))
        caps = self.fc2(h).reshape((b, self.m, self.d_c))
        norms = capsule_norms(caps)
        return ConceptState(
            concept_caps=CapsuleTensor(caps),
            global_capsule=norms.reshape((b, 1, self.m)),
            activations=softmax(norms),
            norms=norms,
        )


def plan_deconvs(target: int, start: int = 4, layers: int = 4):
    """Choose per-layer (stride, output_padding) so four transposed convs
    grow ``start`` to at least ``target``, exactly when possible.

    Each stride-2 layer maps h -> 2h (output_padding 1) or 2h-1 (0);
    stride-1 layers keep h. Returns (plan, final_size).
    """
    best = None
    options = [(1, 0), (2, 0), (2, 1)]
    from itertools import product
    for combo in product(options, repeat=layers):
        h = start
        for stride, op in combo:
            h = h if stride == 1 else 2 * h - 1 + op
        if h < target:
            continue
        key = (h - target, sum(s for s, _ in combo))
        if best is None or key < best[0]:
            best = (key, combo, h)
    if best is None:
        raise ValueError(f"no four-layer deconv plan reaches {target} from {start}")
    return list(best[1]), best[2]


class Decoder(Module):
    """Reconstruct the input from the global capsule: a linear seed to a
    4x4 map, four transposed convolutions, sigmoid to [0, 1], and a center
    crop when the deconv plan overshoots the target size."""

    def __init__(self, rng, m: int, out_channels: int, target_hw: int,
                 channels=(32, 32, 16, 8)):
        self.seed_size = 4
        self.seed_channels = channels[0]
        self.fc = Linear(rng, m, channels[0] * self.seed_size ** 2)
        plan, final = plan_deconvs(target_hw, start=self.seed_size)
        self.plan = plan
        self.final_size = final
        self.target_hw = target_hw
        chain = list(channels[1:]) + [out_channels]
        self.deconvs = []
        c_prev = channels[0]
        for (stride, op), c in zip(plan, chain):
            self.deconvs.append(ConvTranspose(rng, c_prev, c, kernel=3,
                                              stride=stride, padding=1,
                                              output_padding=op))
            c_prev = c

    def __call__(self, u_g: Tensor) -> Tensor:
        b = u_g.shape[0]
        x = relu(self.fc(u_g.reshape((b, -1))))
        x = x.reshape((b, self.seed_channels, self.seed_size, self.seed_size))
        for i, deconv in enumerate(self.deconvs):
            x = deconv(x)
            if i < len(self.deconvs) - 1:
                x = relu(x)
        if self.final_size != self.target_hw:
            off = (self.final_size - self.target_hw) // 2
            x = crop2d(x, off, off, self.target_hw, self.target_hw)
        return sigmoid(x)
