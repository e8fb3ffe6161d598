"""Minimal reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray and remembers how it was produced; calling
``backward()`` on a scalar result walks the tape and accumulates gradients
into every reachable tensor with ``requires_grad=True``. Ops are plain
module-level functions so model code stays functional. Arrays keep whatever
float dtype they were given (training runs float32, oracle paths float64);
mixed inputs follow numpy promotion rules.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _special

__all__ = [
    "Tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "concat",
    "crop2d",
    "exp",
    "log",
    "sqrt",
    "square",
    "tanh",
    "sigmoid",
    "erf",
    "softplus",
    "relu",
    "leaky_relu",
    "tabs",
    "clamp",
    "lower_bound",
    "round_ste",
    "conv2d",
    "upsample_nearest2x",
    "avg_pool2x",
    "spatial_replicate",
    "broadcast_to",
]


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad=False, parents=()):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad = None
        # parents: tuple of (Tensor, fn) where fn maps the upstream gradient
        # to this parent's gradient contribution.
        self._parents = tuple((p, fn) for p, fn in parents if p.requires_grad)
        self.requires_grad = bool(requires_grad) or bool(self._parents)

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- graph -------------------------------------------------------------
    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                for parent, fn in node._parents:
                    contrib = fn(g)
                    prev = grads.get(id(parent))
                    grads[id(parent)] = contrib if prev is None else prev + contrib
            else:
                node.grad = g if node.grad is None else node.grad + g

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic --------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return Tensor(out, parents=(
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return Tensor(out, parents=(
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return Tensor(out, parents=(
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor(out, parents=(
        (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
    ))


def neg(a):
    a = as_tensor(a)
    return Tensor(-a.data, parents=((a, lambda g: -g),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    out = a.data @ b.data
    return Tensor(out, parents=(
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ))


# -- reductions / shape -------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return np.broadcast_to(g, a.data.shape).copy()

    return Tensor(out, parents=((a, back),))


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[i] for i in ax]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return Tensor(out, parents=((a, lambda g: g.reshape(a.data.shape)),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return Tensor(a.data.transpose(axes), parents=((a, lambda g: g.transpose(inv)),))


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_back(i):
        lo, hi = offsets[i], offsets[i + 1]

        def back(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return back

    return Tensor(out, parents=tuple((t, make_back(i)) for i, t in enumerate(tensors)))


def crop2d(a, height, width):
    """Keep the top-left `height` x `width` window of the trailing two axes."""
    a = as_tensor(a)
    out = a.data[..., :height, :width]

    def back(g):
        full = np.zeros_like(a.data)
        full[..., :height, :width] = g
        return full

    return Tensor(out, parents=((a, back),))


# -- elementwise nonlinearities ----------------------------------------------


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, parents=((a, lambda g: g * out),))


def log(a):
    a = as_tensor(a)
    return Tensor(np.log(a.data), parents=((a, lambda g: g / a.data),))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor(out, parents=((a, lambda g: g * (0.5 / out)),))


def square(a):
    a = as_tensor(a)
    return Tensor(a.data * a.data, parents=((a, lambda g: g * (2.0 * a.data)),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor(out, parents=((a, lambda g: g * (1.0 - out * out)),))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor(out, parents=((a, lambda g: g * out * (1.0 - out)),))


_TWO_OVER_SQRT_PI = 2.0 / np.sqrt(np.pi)


def erf(a):
    a = as_tensor(a)
    out = _special.erf(a.data)
    return Tensor(
        out,
        parents=((a, lambda g: g * (_TWO_OVER_SQRT_PI * np.exp(-a.data * a.data))),),
    )


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def back(g):
        x = a.data
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return g * s

    return Tensor(out, parents=((a, back),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor(a.data * mask, parents=((a, lambda g: g * mask),))


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope).astype(a.data.dtype)
    return Tensor(a.data * scale, parents=((a, lambda g: g * scale),))


def tabs(a):
    a = as_tensor(a)
    sign = np.sign(a.data)
    return Tensor(np.abs(a.data), parents=((a, lambda g: g * sign),))


def clamp(a, lo, hi):
    """Hard clip; gradient is zero outside [lo, hi]."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor(out, parents=((a, lambda g: g * inside),))


def lower_bound(a, bound):
    """max(a, bound) that still passes gradients pushing a clamped value up.

    The gradient is forwarded where the input is above the bound, or where the
    upstream gradient would increase the input (g < 0 under minimization).
    Standard device for likelihood/scale floors in rate models.
    """
    a = as_tensor(a)
    out = np.maximum(a.data, bound)

    def back(g):
        passthrough = (a.data >= bound) | (g < 0)
        return g * passthrough

    return Tensor(out, parents=((a, back),))


def round_ste(a):
    """Round half away from zero; straight-through (identity) gradient."""
    a = as_tensor(a)
    out = np.copysign(np.floor(np.abs(a.data) + 0.5), a.data)
    return Tensor(out, parents=((a, lambda g: g),))


# -- structured ops ------------------------------------------------------------


_CONV_SMALL_POSITIONS = 4096


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D convolution (cross-correlation), NCHW input and KCkhkw kernel.

    Two internal strategies: small outputs go through an im2col buffer and a
    single GEMM (per-call overhead dominates there); large outputs use a
    channels-last accumulation with one GEMM per kernel tap, which keeps
    memory flat while feeding BLAS full-size operands.
    """
    x, w = as_tensor(x), as_tensor(w)
    N, C, H, W = x.data.shape
    K, Cw, kh, kw = w.data.shape
    if Cw != C:
        raise ValueError(f"conv2d channel mismatch: input has {C}, kernel expects {Cw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError("conv2d output would be empty")
    dtype = np.result_type(x.data, w.data)
    positions = N * Ho * Wo
    wflat = w.data.reshape(K, C * kh * kw)

    if positions <= _CONV_SMALL_POSITIONS:
        sv = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        cols = np.ascontiguousarray(
            sv[:, :, ::stride, ::stride].transpose(0, 2, 3, 1, 4, 5), dtype=dtype
        ).reshape(positions, C * kh * kw)
        out_fl = cols @ wflat.T
        out = np.ascontiguousarray(out_fl.reshape(N, Ho, Wo, K).transpose(0, 3, 1, 2))

        def back_x(g):
            gn = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(positions, K)
            dcols = (gn @ wflat).reshape(N, Ho, Wo, C, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            return dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp

        def back_w(g):
            gn = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(positions, K)
            return (gn.T @ cols).reshape(K, C, kh, kw)

    else:
        acc = np.zeros((N, Ho, Wo, K), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
                acc += np.tensordot(xs, w.data[:, :, i, j], axes=([1], [1]))
        out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))

        def back_x(g):
            gn = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
            dxp_cl = np.zeros(xp.shape[0:1] + xp.shape[2:] + xp.shape[1:2], dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    d = gn @ w.data[:, :, i, j]  # [N,Ho,Wo,C]
                    dxp_cl[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += d
            dxp = dxp_cl.transpose(0, 3, 1, 2)
            return dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp

        def back_w(g):
            gn = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
            dw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
                    dw[:, :, i, j] = np.tensordot(gn, xs, axes=([0, 1, 2], [0, 2, 3]))
            return dw

    parents = [(x, back_x), (w, back_w)]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return Tensor(out, parents=tuple(parents))


def upsample_nearest2x(x):
    x = as_tensor(x)
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    N, C, H, W = x.data.shape

    def back(g):
        return g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5))

    return Tensor(out, parents=((x, back),))


def avg_pool2x(x):
    x = as_tensor(x)
    N, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ValueError("avg_pool2x needs even trailing dims")
    out = x.data.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def back(g):
        g4 = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return g4 * 0.25

    return Tensor(out, parents=((x, back),))


def spatial_replicate(v, height, width):
    """Tile a [N, D] vector batch to a [N, D, height, width] feature grid."""
    v = as_tensor(v)
    N, D = v.data.shape
    out = np.broadcast_to(v.data[:, :, None, None], (N, D, height, width)).copy()
    return Tensor(out, parents=((v, lambda g: g.sum(axis=(2, 3))),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()
    return Tensor(out, parents=((a, lambda g: _unbroadcast(g, a.data.shape)),))
