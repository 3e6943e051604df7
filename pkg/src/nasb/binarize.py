"""Weight/activation binarization with straight-through gradients.

Weights: forward ``s * sign(W)`` with ``s`` the mean absolute latent value
(per output filter by default); backward scales the incoming gradient by
``s`` and drops the dependence of ``s`` on ``W``.

Activations: forward ``sign(I)``; backward multiplies by the piecewise
polynomial derivative ``2 + 2I`` on [-1, 0), ``2 - 2I`` on [0, 1), else 0.

``sign(0)`` is +1 everywhere in this module.

The bit-packed path (``pack_*`` and :func:`xnor_conv2d`) evaluates a binary
convolution with XOR + popcount on 64-bit words; it is inference only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd.ops import ConvSpec, conv_out_extent
from .autograd.tensor import ShapeError, Tensor

WORD_BITS = 64


def sign(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    dtype = x.dtype if x.dtype.kind == "f" else np.float64
    return np.where(x >= 0, 1, -1).astype(dtype)


# ----------------------------------------------------------------------------
# activations


def activation_ste_factor(x: np.ndarray) -> np.ndarray:
    """d sign(I)/dI surrogate, half-open intervals exactly as written."""
    x = np.asarray(x)
    neg = (x >= -1) & (x < 0)
    pos = (x >= 0) & (x < 1)
    return np.where(neg, 2 + 2 * x, np.where(pos, 2 - 2 * x, 0)).astype(x.dtype if x.dtype.kind == "f" else np.float64)


def binarize_activations_backward(grad_out: np.ndarray, saved_input: np.ndarray) -> np.ndarray:
    return grad_out * activation_ste_factor(saved_input)


def binarize_activations(x: Tensor) -> Tensor:
    saved = x.data
    return Tensor.from_op(sign(saved), (x,), lambda g: (binarize_activations_backward(g, saved),), "binarize_act")


# ----------------------------------------------------------------------------
# weights


def scaling_coefficients(w: np.ndarray, per_filter: bool = True) -> np.ndarray:
    """Mean |W| per output filter (axis 0), or one shared value broadcast to every filter."""
    a = np.abs(np.asarray(w))
    if per_filter:
        return a.reshape(a.shape[0], -1).mean(axis=1)
    return np.full(a.shape[0], a.mean(), dtype=a.dtype)


def binarize_weights_backward(grad_effective: np.ndarray, s: np.ndarray) -> np.ndarray:
    if grad_effective.shape[0] != np.shape(s)[0]:
        raise ShapeError(f"gradient has {grad_effective.shape[0]} filters, s has {np.shape(s)[0]}")
    return grad_effective * np.reshape(s, (-1,) + (1,) * (grad_effective.ndim - 1))


@dataclass
class BinarizedWeight:
    """Latent weights with their scales and signs.

    ``effective`` is what the convolution consumes; it is recomputed from the
    latent weights on every forward pass.
    """

    latent: Tensor
    s: np.ndarray
    b: np.ndarray

    @classmethod
    def from_latent(cls, latent: Tensor, per_filter: bool = True) -> "BinarizedWeight":
        return cls(latent, scaling_coefficients(latent.data, per_filter), sign(latent.data))

    @property
    def effective(self) -> np.ndarray:
        return self.b * self.s.reshape((-1,) + (1,) * (self.b.ndim - 1))

    def tensor(self) -> Tensor:
        """Effective weights as a graph node whose gradient reaches ``latent``."""
        s = self.s
        return Tensor.from_op(
            self.effective.astype(self.latent.dtype, copy=False),
            (self.latent,),
            lambda g: (binarize_weights_backward(g, s),),
            "binarize_weight",
        )


def binarize_weights(w: Tensor, per_filter: bool = True) -> BinarizedWeight:
    return BinarizedWeight.from_latent(w, per_filter)


# ----------------------------------------------------------------------------
# bit packing


@dataclass(frozen=True)
class PackedBitTensor:
    """Signs of a tensor packed along its last axis, bit 1 <-> +1.

    ``words`` has shape ``shape[:-1] + (ceil(shape[-1] / 64),)``; unused
    bits of the tail word are zero.
    """

    shape: tuple[int, ...]
    words: np.ndarray

    @property
    def nbits(self) -> int:
        return self.shape[-1]

    @property
    def tail_bits(self) -> int:
        r = self.nbits % WORD_BITS
        return r if r else WORD_BITS


def pack_bits(x: np.ndarray) -> PackedBitTensor:
    x = np.asarray(x)
    if x.ndim == 0:
        x = x.reshape(1)
    n = x.shape[-1]
    n_words = -(-n // WORD_BITS)
    bits = np.zeros(x.shape[:-1] + (n_words * WORD_BITS,), dtype=np.uint8)
    bits[..., :n] = x >= 0
    packed = np.packbits(bits, axis=-1, bitorder="little")
    words = np.ascontiguousarray(packed).view("<u8").astype(np.uint64)
    return PackedBitTensor(tuple(x.shape), words)


def unpack_bits(p: PackedBitTensor, dtype=np.float64) -> np.ndarray:
    as_bytes = np.ascontiguousarray(p.words.astype("<u8")).view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=-1, bitorder="little")[..., : p.nbits]
    return (bits.astype(dtype) * 2 - 1).reshape(p.shape)


if hasattr(np, "bitwise_count"):
    def popcount(words: np.ndarray) -> np.ndarray:
        return np.bitwise_count(words)
else:  # numpy < 2.0
    _BYTE_COUNTS = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

    def popcount(words: np.ndarray) -> np.ndarray:
        b = np.ascontiguousarray(words).view(np.uint8).reshape(words.shape + (8,))
        return _BYTE_COUNTS[b].sum(axis=-1)


def pack_input(x: np.ndarray) -> PackedBitTensor:
    """Pack an NCHW tensor channel-wise (logical layout NHWC)."""
    return pack_bits(np.asarray(x).transpose(0, 2, 3, 1))


def pack_weight(w: np.ndarray) -> PackedBitTensor:
    """Pack a (C_out, C_in, h, w) kernel channel-wise (logical layout O h w C)."""
    return pack_bits(np.asarray(w).transpose(0, 2, 3, 1))


def xnor_conv2d(input_bits: PackedBitTensor, weight_bits: PackedBitTensor, s, spec: ConvSpec) -> np.ndarray:
    """Binary convolution on channel-packed signs.

    Each tap contributes ``n - 2 * popcount(a XOR b)``, the dot product of two
    length-n sign vectors (equivalently ``2 * popcount(XNOR) - n``).  Taps
    landing in the zero padding contribute nothing, matching a float
    convolution over the unpacked tensors.  Returns float64 NCHW output
    scaled per filter by ``s``.
    """
    n, h, w, c = input_bits.shape
    c_out, kh, kw, cw = weight_bits.shape
    if c != cw or input_bits.words.shape[-1] != weight_bits.words.shape[-1]:
        raise ShapeError(f"packing length mismatch: input packs {c} channels, weight packs {cw}")
    if (c, c_out, kh, kw) != (spec.c_in, spec.c_out, spec.kernel_h, spec.kernel_w):
        raise ShapeError(f"packed shapes {input_bits.shape}/{weight_bits.shape} disagree with {spec}")
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), (c_out,))
    ho = conv_out_extent(h, kh, spec.stride, spec.padding, spec.dilation)
    wo = conv_out_extent(w, kw, spec.stride, spec.padding, spec.dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"xnor_conv2d: empty output for input {h}x{w}")

    acc = np.zeros((n, ho, wo, c_out), dtype=np.int64)
    rows = np.arange(ho) * spec.stride - spec.padding
    cols = np.arange(wo) * spec.stride - spec.padding
    for p in range(kh):
        r = rows + p * spec.dilation
        rv = (r >= 0) & (r < h)
        for q in range(kw):
            cc = cols + q * spec.dilation
            cv = (cc >= 0) & (cc < w)
            if not rv.any() or not cv.any():
                continue
            a = input_bits.words[:, r[rv]][:, :, cc[cv]]  # N, ho', wo', words
            diff = popcount(a[:, :, :, None, :] ^ weight_bits.words[None, None, None, :, p, q]).sum(axis=-1)
            acc[:, np.flatnonzero(rv)[:, None], np.flatnonzero(cv)[None, :], :] += c - 2 * diff.astype(np.int64)
    return (acc * s).transpose(0, 3, 1, 2)
