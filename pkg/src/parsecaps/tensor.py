"""Dense float64 tensors with reverse-mode automatic differentiation.

Every layer, routing step, and loss in this package is expressed through the
primitives defined here. ``gradcheck`` is the finite-difference oracle used
throughout the test suite to validate analytic gradients.

Conventions:
  * values are 64-bit floats, row-major;
  * gradients accumulate additively, the caller resets them between steps;
  * value buffers are treated as immutable after the forward pass, only
    ``grad`` buffers mutate during ``backward``.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense n-dimensional float64 array, optionally linked into a
    backward graph.

    ``value`` is the flat-compatible numpy buffer, ``grad`` the accumulated
    gradient (same shape, lazily created), ``_parents``/``_vjps`` the
    backward record when this node was produced by an operation.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._vjps: tuple = ()

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward pass -------------------------------------------------------

    def _topo_order(self) -> list:
        """Post-order over the reachable grad-requiring graph: every node
        appears after all of its parents."""
        order: list = []
        seen: set = set()
        stack: list = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Propagate gradients from this node to every reachable leaf.

        Without an explicit ``seed`` the node must be scalar-valued.
        Replaying backward without resetting grads accumulates additively.
        """
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if seed is None:
            if self.value.size != 1:
                raise ValueError(
                    f"backward() needs a scalar output, got shape {self.shape}"
                )
            seed = np.ones_like(self.value)
        order = self._topo_order()
        flow: dict = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = flow.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                for parent, vjp in zip(node._parents, node._vjps):
                    if not parent.requires_grad:
                        continue
                    contrib = vjp(g)
                    prev = flow.get(id(parent))
                    flow[id(parent)] = contrib if prev is None else prev + contrib
            else:
                node.grad = g.copy() if node.grad is None else node.grad + g

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents: Sequence[Tensor],
          vjps: Sequence[Callable]) -> Tensor:
    out = Tensor(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise and reduction primitives ------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.value + b.value, (a, b),
                 (lambda g: _unbroadcast(g, a.shape),
                  lambda g: _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.value - b.value, (a, b),
                 (lambda g: _unbroadcast(g, a.shape),
                  lambda g: _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.value * b.value, (a, b),
                 (lambda g: _unbroadcast(g * b.value, a.shape),
                  lambda g: _unbroadcast(g * a.value, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.value / b.value, (a, b),
                 (lambda g: _unbroadcast(g / b.value, a.shape),
                  lambda g: _unbroadcast(-g * a.value / (b.value * b.value),
                                         b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.value, (a,), (lambda g: -g,))


def power(a: Tensor, p: float) -> Tensor:
    val = a.value ** p
    return _make(val, (a,), (lambda g: g * p * a.value ** (p - 1),))


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _make(out, (a,), (lambda g: g * out,))


def tlog(a: Tensor) -> Tensor:
    return _make(np.log(a.value), (a,), (lambda g: g / a.value,))


def tsqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)
    return _make(out, (a,), (lambda g: g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _make(a.value * mask, (a,), (lambda g: g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.value))
    return _make(out, (a,), (lambda g: g * out * (1.0 - out),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape)
        gx = g
        if not keepdims:
            gx = np.expand_dims(gx, axis)
        return np.broadcast_to(gx, a.shape)

    return _make(val, (a,), (vjp,))


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    val = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size if axis is None else a.value.size // val.size

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / count, a.shape)
        gx = g
        if not keepdims:
            gx = np.expand_dims(gx, axis)
        return np.broadcast_to(gx / count, a.shape)

    return _make(val, (a,), (vjp,))


# -- shape movement -----------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(a.value.reshape(shape), (a,),
                 (lambda g: g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.value.transpose(axes), (a,),
                 (lambda g: g.transpose(inverse),))


def crop2d(a: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Slice a (..., H, W) tensor spatially; backward zero-pads."""
    val = a.value[..., top:top + height, left:left + width]

    def vjp(g):
        gx = np.zeros(a.shape)
        gx[..., top:top + height, left:left + width] = g
        return gx

    return _make(val, (a,), (vjp,))


# -- contraction --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with optional leading batch axes.

    Accepts 2-D operands or 3-D operands with leading batch extents that
    agree or broadcast from 1.
    """
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {av.shape} x {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {av.shape} x {bv.shape}")
    if av.ndim > 2 and bv.ndim > 2:
        ba, bb = av.shape[:-2], bv.shape[:-2]
        if ba != bb and not all(x == y or x == 1 or y == 1 for x, y in zip(ba, bb)):
            raise ShapeError(f"matmul batch extents differ: {av.shape} x {bv.shape}")
    val = np.matmul(av, bv)

    def vjp_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), a.shape)

    def vjp_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), b.shape)

    return _make(val, (a, b), (vjp_a, vjp_b))


# -- convolutions --------------------------------------------------------------

def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Full cross-channel convolution: x (B,C,H,W) with w (O,C,kh,kw)."""
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(f"kernel {w.shape} larger than padded input {x.shape}")
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((B, O, Ho, Wo))
    wv = w.value
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
            out += np.tensordot(wv[:, :, i, j], xs, axes=([1], [1])).transpose(1, 0, 2, 3)

    def vjp_x(g):
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(wv[:, :, i, j], g, axes=([0], [1]))
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    contrib.transpose(1, 0, 2, 3)
        if padding:
            return gxp[:, :, padding:padding + H, padding:padding + W]
        return gxp

    def vjp_w(g):
        gw = np.zeros_like(wv)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
                gw[:, :, i, j] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
        return gw

    return _make(out, (x, w), (vjp_x, vjp_w))


def conv2d_depthwise(x: Tensor, kernel: Tensor, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Per-channel spatial convolution: x (B,C,H,W) with kernel (C,kh,kw)."""
    B, C, H, W = x.shape
    Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(
            f"depthwise channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(
            f"kernel {kernel.shape} larger than padded input {x.shape}")
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((B, C, Ho, Wo))
    kv = kernel.value
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
            out += xs * kv[None, :, i, j, None, None]

    def vjp_x(g):
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    g * kv[None, :, i, j, None, None]
        if padding:
            return gxp[:, :, padding:padding + H, padding:padding + W]
        return gxp

    def vjp_k(g):
        gk = np.zeros_like(kv)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
                gk[:, i, j] = (g * xs).sum(axis=(0, 2, 3))
        return gk

    return _make(out, (x, kernel), (vjp_x, vjp_k))


def conv2d_pointwise(x: Tensor, weight: Tensor) -> Tensor:
    """1x1 channel mixing: x (B,C,H,W) with weight (O,C)."""
    B, C, H, W = x.shape
    O, Cw = weight.shape
    if Cw != C:
        raise ShapeError(
            f"pointwise channel mismatch: input {x.shape}, weight {weight.shape}")
    wv = weight.value
    out = np.tensordot(wv, x.value, axes=([1], [1])).transpose(1, 0, 2, 3)

    def vjp_x(g):
        return np.tensordot(wv, g, axes=([0], [1])).transpose(1, 0, 2, 3)

    def vjp_w(g):
        return np.tensordot(g, x.value, axes=([0, 2, 3], [0, 2, 3]))

    return _make(out, (x, weight), (vjp_x, vjp_w))


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Transposed convolution: x (B,Cin,H,W) with w (Cin,Cout,kh,kw).

    Output spatial size is (H-1)*stride - 2*padding + kh + output_padding.
    """
    B, Ci, H, W = x.shape
    Ciw, Co, kh, kw = w.shape
    if Ciw != Ci:
        raise ShapeError(
            f"conv_transpose channel mismatch: input {x.shape}, kernel {w.shape}")
    Hf = (H - 1) * stride + kh + output_padding
    Wf = (W - 1) * stride + kw + output_padding
    Ho = Hf - 2 * padding
    Wo = Wf - 2 * padding
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv_transpose output collapses: {x.shape} with {w.shape}")
    wv = w.value
    full = np.zeros((B, Co, Hf, Wf))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(x.value, wv[:, :, i, j], axes=([1], [0]))
            full[:, :, i:i + stride * H:stride, j:j + stride * W:stride] += \
                contrib.transpose(0, 3, 1, 2)
    out = full[:, :, padding:padding + Ho, padding:padding + Wo]

    def _grad_full(g):
        gf = np.zeros((B, Co, Hf, Wf))
        gf[:, :, padding:padding + Ho, padding:padding + Wo] = g
        return gf

    def vjp_x(g):
        gf = _grad_full(g)
        gx = np.zeros_like(x.value)
        for i in range(kh):
            for j in range(kw):
                gs = gf[:, :, i:i + stride * H:stride, j:j + stride * W:stride]
                gx += np.tensordot(gs, wv[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
        return gx

    def vjp_w(g):
        gf = _grad_full(g)
        gw = np.zeros_like(wv)
        for i in range(kh):
            for j in range(kw):
                gs = gf[:, :, i:i + stride * H:stride, j:j + stride * W:stride]
                gw[:, :, i, j] = np.tensordot(x.value, gs, axes=([0, 2, 3], [0, 2, 3]))
        return gw

    return _make(out, (x, w), (vjp_x, vjp_w))


# -- normalization ------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis to zero mean / unit variance, then apply an
    affine transform. eps guards the zero-variance case."""
    D = x.shape[-1]
    if gain.shape != (D,) or bias.shape != (D,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last axis {D}")
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = xc * istd
    out = xhat * gain.value + bias.value

    def vjp_x(g):
        gw = g * gain.value
        m1 = gw.mean(axis=-1, keepdims=True)
        m2 = (gw * xhat).mean(axis=-1, keepdims=True)
        return istd * (gw - m1 - xhat * m2)

    def vjp_gain(g):
        return (g * xhat).reshape(-1, D).sum(axis=0)

    def vjp_bias(g):
        return g.reshape(-1, D).sum(axis=0)

    return _make(out, (x, gain, bias), (vjp_x, vjp_gain, vjp_bias))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return p * (g - (g * p).sum(axis=axis, keepdims=True))

    return _make(p, (x,), (vjp,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or rate is zero."""
    if not training or rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.value * mask, (x,), (lambda g: g * mask,))


# -- the finite-difference oracle ----------------------------------------------

def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
              max_coords: Optional[int] = None,
              rng: Optional[np.random.Generator] = None) -> float:
    """Compare the autodiff gradient of a scalar function against central
    finite differences and return the worst relative error.

    The relative error of coordinate i is |ad_i - fd_i| scaled by
    max(|ad_i|, |fd_i|, 1e-3), so exact zeros do not produce false alarms.
    ``max_coords`` restricts the finite-difference sweep to a random subset
    of coordinates, which keeps whole-model checks affordable.
    """
    if not (1e-6 <= h <= 1e-3):
        raise ValueError(f"finite-difference step {h} outside [1e-6, 1e-3]")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.value.size != 1:
        raise ValueError(f"gradcheck needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(x.value) if x.grad is None else x.grad.copy()

    coords = np.arange(x.value.size)
    if max_coords is not None and max_coords < coords.size:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(coords, size=max_coords, replace=False)

    flat = x.value.ravel()
    numeric = np.zeros(coords.size)
    with no_grad():
        for k, idx in enumerate(coords):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = float(f(x).value)
            flat[idx] = orig - h
            fm = float(f(x).value)
            flat[idx] = orig
            numeric[k] = (fp - fm) / (2.0 * h)
    picked = analytic.ravel()[coords]
    scale = np.maximum(np.maximum(np.abs(picked), np.abs(numeric)), 1e-3)
    return float((np.abs(picked - numeric) / scale).max())
