"""Differentiable primitives over :class:`Tensor`.

Convolution is cross-correlation without a bias term.  All kernels are plain
numpy; the strided-window views below avoid explicit im2col copies where
numpy allows it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, _as_tensor


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.kernel_h, self.kernel_w, self.stride, self.dilation) < 1:
            raise ValueError(f"non-positive extent in {self}")
        if self.padding < 0:
            raise ValueError(f"negative padding in {self}")

    @classmethod
    def square(cls, c_in: int, c_out: int, kernel: int, stride: int = 1, dilation: int = 1, padding: Optional[int] = None):
        """'Same'-style spec: padding keeps the extent at stride 1."""
        if padding is None:
            padding = dilation * (kernel - 1) // 2
        return cls(c_in, c_out, kernel, kernel, stride, padding, dilation)

    def out_extent(self, h: int, w: int) -> tuple[int, int]:
        return (
            conv_out_extent(h, self.kernel_h, self.stride, self.padding, self.dilation),
            conv_out_extent(w, self.kernel_w, self.stride, self.padding, self.dilation),
        )


def conv_out_extent(size: int, kernel: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _checked_extent(size, kernel, stride, padding, dilation, what):
    out = conv_out_extent(size, kernel, stride, padding, dilation)
    if out < 1:
        raise ShapeError(f"{what}: output extent {out} < 1 for input extent {size}")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(out, (a, b), _backward, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), _backward, "mul")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the tensor method
    return Tensor.from_op(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def _backward(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return Tensor.from_op(np.asarray(a.data.mean()), (a,), _backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor.from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return Tensor.from_op(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """x[N, F] @ weight[K, F]^T, no bias."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-D operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[1]} != weight in_features {weight.shape[1]}")

    def _backward(g):
        return g @ weight.data, g.T @ x.data

    return Tensor.from_op(x.data @ weight.data.T, (x, weight), _backward, "linear")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape

    def _backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return Tensor.from_op(x.data.mean(axis=(2, 3)), (x,), _backward, "global_avg_pool")


def subsample(x: Tensor, stride: int) -> Tensor:
    """Keep every ``stride``-th row/column (output extent = ceil(in/stride))."""
    if stride == 1:
        return x

    def _backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, ::stride, ::stride] = g
        return (gx,)

    return Tensor.from_op(x.data[:, :, ::stride, ::stride].copy(), (x,), _backward, "subsample")


def adapt_channels(x: Tensor, channels: int) -> Tensor:
    """Zero-pad (growth) or keep the leading channels (shrink)."""
    c = x.shape[1]
    if c == channels:
        return x
    if c < channels:
        out = np.zeros((x.shape[0], channels) + x.shape[2:], dtype=x.dtype)
        out[:, :c] = x.data
        return Tensor.from_op(out, (x,), lambda g: (g[:, :c].copy(),), "pad_channels")

    def _backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :channels] = g
        return (gx,)

    return Tensor.from_op(x.data[:, :channels].copy(), (x,), _backward, "truncate_channels")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != batch ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()

    def _backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), _backward, "cross_entropy")


# ----------------------------------------------------------------------------
# convolution


def _window_view(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, kh, kw, Ho, Wo) read-only view of a padded NCHW array."""
    sn, sc, sh, sw = xp.strides
    n, c = xp.shape[:2]
    return as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


def _pad_hw(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _scatter_taps(dcols: np.ndarray, xshape, padding, stride, dilation) -> np.ndarray:
    """Adjoint of :func:`_window_view`: sum (N, C, kh, kw, Ho, Wo) back to NCHW."""
    n, c, kh, kw, ho, wo = dcols.shape
    h, w = xshape[2], xshape[3]
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            dxp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += dcols[:, :, i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def conv2d(
    x: Tensor,
    weight: Tensor,
    spec: Optional[ConvSpec] = None,
    *,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Biasless 2-D cross-correlation of x[N, C_in, H, W] with weight[C_out, C_in, h, w]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if spec is not None:
        stride, padding, dilation = spec.stride, spec.padding, spec.dilation
        if x.shape[1] != spec.c_in:
            raise ShapeError(f"conv2d: input C_in={x.shape[1]} but spec c_in={spec.c_in}")
        if weight.shape[0] != spec.c_out:
            raise ShapeError(f"conv2d: weight C_out={weight.shape[0]} but spec c_out={spec.c_out}")
        if weight.shape[2:] != (spec.kernel_h, spec.kernel_w):
            raise ShapeError(f"conv2d: weight kernel {weight.shape[2:]} but spec kernel {(spec.kernel_h, spec.kernel_w)}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input C_in={x.shape[1]} but weight C_in={weight.shape[1]}")
    n, _, h, w = x.shape
    c_out, _, kh, kw = weight.shape
    ho = _checked_extent(h, kh, stride, padding, dilation, "conv2d height")
    wo = _checked_extent(w, kw, stride, padding, dilation, "conv2d width")

    xp = _pad_hw(x.data, padding)
    cols = _window_view(xp, kh, kw, stride, dilation, ho, wo)
    out = np.tensordot(cols, weight.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)

    def _backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5])) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.tensordot(g, weight.data, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
            gx = _scatter_taps(dcols.transpose(0, 3, 4, 5, 1, 2), x.shape, padding, stride, dilation)
        return gx, gw

    return Tensor.from_op(np.ascontiguousarray(out), (x, weight), _backward, "conv2d")


# ----------------------------------------------------------------------------
# normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over every axis but 1.

    In training mode the batch statistics are used and the running
    statistics (updated in place) track them by exponential moving average,
    with the unbiased variance estimate.
    """
    if eps < 0:
        raise ValueError(f"batch_norm eps must be non-negative, got {eps}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match C={c}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if training:
        m = x.data.size // c
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    mu = np.asarray(mu, dtype=x.dtype)
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * invstd.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def _backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            mcount = x.data.size // c
            gx = (invstd.reshape(bshape) / mcount) * (
                mcount * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = dxhat * invstd.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), _backward, "batch_norm")


# ----------------------------------------------------------------------------
# pooling


def _pool_extents(x: Tensor, kernel, stride, padding):
    if padding > kernel // 2:
        raise ValueError(f"pool padding {padding} exceeds half the window {kernel}")
    h, w = x.shape[2:]
    ho = _checked_extent(h, kernel, stride, padding, 1, "pool height")
    wo = _checked_extent(w, kernel, stride, padding, 1, "pool width")
    return ho, wo


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Max over kernel x kernel windows; padded cells never win.

    The gradient goes to the first maximal cell in row-major window order.
    """
    ho, wo = _pool_extents(x, kernel, stride, padding)
    xp = _pad_hw(x.data, padding, -np.inf)
    win = _window_view(xp, kernel, kernel, stride, 1, ho, wo)
    n, c = x.shape[:2]
    flat = win.reshape(n, c, kernel * kernel, ho, wo)
    arg = flat.argmax(axis=2)
    out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]

    def _backward(g):
        dcols = np.zeros((n, c, kernel * kernel, ho, wo), dtype=g.dtype)
        np.put_along_axis(dcols, arg[:, :, None], g[:, :, None], axis=2)
        return (_scatter_taps(dcols.reshape(n, c, kernel, kernel, ho, wo), x.shape, padding, stride, 1),)

    return Tensor.from_op(out, (x,), _backward, "max_pool2d")


def avg_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Mean over the valid (non-padding) cells of each window."""
    ho, wo = _pool_extents(x, kernel, stride, padding)
    n, c, h, w = x.shape
    xp = _pad_hw(x.data, padding)
    total = _window_view(xp, kernel, kernel, stride, 1, ho, wo).sum(axis=(2, 3))
    ones = _pad_hw(np.ones((1, 1, h, w), dtype=x.dtype), padding)
    count = _window_view(ones, kernel, kernel, stride, 1, ho, wo).sum(axis=(2, 3))
    out = total / count

    def _backward(g):
        share = g / count
        dcols = np.broadcast_to(share[:, :, None, None], (n, c, kernel, kernel, ho, wo))
        gx = _scatter_taps(np.ascontiguousarray(dcols), x.shape, padding, stride, 1)
        return (gx,)

    return Tensor.from_op(out, (x,), _backward, "avg_pool2d")
