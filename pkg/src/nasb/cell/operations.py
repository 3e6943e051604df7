"""The ten candidate operations and the conv unit they share with the backbone."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

import numpy as np

from ..autograd import ops
from ..autograd.layers import BatchNorm2d, Module, kaiming_normal
from ..autograd.ops import ConvSpec
from ..autograd.tensor import Tensor
from ..binarize import BinarizedWeight, binarize_activations


class OperationKind(IntEnum):
    ZERO = 0
    AVG_POOL3 = 1
    MAX_POOL3 = 2
    IDENTITY = 3
    CONV1 = 4
    CONV3 = 5
    CONV5 = 6
    DIL_CONV1 = 7
    DIL_CONV3 = 8
    DIL_CONV5 = 9

    @property
    def tag(self) -> str:
        return _TAGS[self]

    @classmethod
    def from_tag(cls, tag: str) -> "OperationKind":
        try:
            return _BY_TAG[tag]
        except KeyError:
            raise ValueError(f"unknown operation kind {tag!r}") from None

    @property
    def is_binary(self) -> bool:
        """Binary-precision (B) operations are the convolutions."""
        return self >= OperationKind.CONV1

    @property
    def is_conv(self) -> bool:
        return self.is_binary

    @property
    def is_pool(self) -> bool:
        return self in (OperationKind.AVG_POOL3, OperationKind.MAX_POOL3)

    @property
    def kernel(self) -> int:
        return {4: 1, 5: 3, 6: 5, 7: 1, 8: 3, 9: 5}.get(int(self), 3 if self.is_pool else 0)

    @property
    def dilation(self) -> int:
        return 2 if self >= OperationKind.DIL_CONV1 else 1


_TAGS = {
    OperationKind.ZERO: "Zero",
    OperationKind.AVG_POOL3: "AvgPool3",
    OperationKind.MAX_POOL3: "MaxPool3",
    OperationKind.IDENTITY: "Identity",
    OperationKind.CONV1: "Conv1",
    OperationKind.CONV3: "Conv3",
    OperationKind.CONV5: "Conv5",
    OperationKind.DIL_CONV1: "DilConv1",
    OperationKind.DIL_CONV3: "DilConv3",
    OperationKind.DIL_CONV5: "DilConv5",
}
_BY_TAG = {v: k for k, v in _TAGS.items()}
ALL_KINDS = tuple(OperationKind)


@dataclass(frozen=True)
class PrecisionPolicy:
    """Which layers stay full precision in a binary model.

    ``all_real`` turns the whole model real-valued (the reference network).
    """

    first_conv: bool = True
    classifier: bool = True
    downsample: bool = True
    conv1x1: bool = False
    all_real: bool = False

    NAMES = ("default", "full", "keep1x1", "none")

    @classmethod
    def named(cls, name: str) -> "PrecisionPolicy":
        if name == "default":
            return cls()
        if name == "full":
            return cls(all_real=True)
        if name == "keep1x1":
            return cls(conv1x1=True)
        if name == "none":
            return cls(first_conv=False, classifier=False, downsample=False)
        raise ValueError(f"unknown precision policy {name!r}; expected one of {cls.NAMES}")

    def keeps_real(self, role: str, kernel: int = 3) -> bool:
        """``role`` is one of first_conv, classifier, downsample, body."""
        if self.all_real:
            return True
        if role == "body":
            return self.conv1x1 and kernel == 1
        return bool(getattr(self, role))


# quantization of a conv unit: "none" = real weights/inputs, "tanh" = real
# weights with tanh on the input (pretraining), "binary" = sign inputs and
# s * sign(W) weights.
QUANT_FOR_MODE = {"search": "binary", "full": "tanh", "binary": "binary"}


class ConvUnit(Module):
    """input activation -> conv -> [relu] -> BN."""

    def __init__(
        self,
        spec: ConvSpec,
        rng: np.random.Generator,
        quant: str = "none",
        relu: bool = True,
        dtype=np.float32,
        per_filter: bool = True,
    ):
        if quant not in ("none", "tanh", "binary"):
            raise ValueError(f"unknown quantization {quant!r}")
        self.spec = spec
        self.quant = quant
        self.relu = relu
        self.per_filter = per_filter
        fan_in = spec.c_in * spec.kernel_h * spec.kernel_w
        shape = (spec.c_out, spec.c_in, spec.kernel_h, spec.kernel_w)
        self.weight = Tensor(kaiming_normal(rng, shape, fan_in, dtype), requires_grad=True)
        self.bn = BatchNorm2d(spec.c_out, dtype=dtype)

    @property
    def binary(self) -> bool:
        return self.quant == "binary"

    def binarized_weight(self) -> BinarizedWeight:
        return BinarizedWeight.from_latent(self.weight, self.per_filter)

    def effective_weight(self) -> Tensor:
        return self.binarized_weight().tensor() if self.binary else self.weight

    def forward(self, x: Tensor) -> Tensor:
        if self.quant == "binary":
            x = binarize_activations(x)
        elif self.quant == "tanh":
            x = ops.tanh(x)
        h = ops.conv2d(x, self.effective_weight(), self.spec)
        if self.relu:
            h = ops.relu(h)
        return self.bn(h)


class Operation(Module):
    kind: OperationKind

    def forward(self, x: Tensor) -> Optional[Tensor]:
        raise NotImplementedError


class ZeroOp(Operation):
    kind = OperationKind.ZERO

    def forward(self, x):
        return None


class IdentityOp(Operation):
    kind = OperationKind.IDENTITY

    def __init__(self, c_out: int, stride: int):
        self.c_out = c_out
        self.stride = stride

    def forward(self, x):
        return ops.adapt_channels(ops.subsample(x, self.stride), self.c_out)


class PoolOp(Operation):
    def __init__(self, kind: OperationKind, c_out: int, stride: int, dtype=np.float32):
        self.kind = kind
        self.c_out = c_out
        self.stride = stride
        self.bn = BatchNorm2d(c_out, dtype=dtype)

    def forward(self, x):
        pool = ops.max_pool2d if self.kind == OperationKind.MAX_POOL3 else ops.avg_pool2d
        return self.bn(ops.adapt_channels(pool(x, 3, self.stride, 1), self.c_out))


class ConvOp(Operation):
    def __init__(self, kind: OperationKind, unit: ConvUnit):
        self.kind = kind
        self.unit = unit

    def forward(self, x):
        return self.unit(x)


def build_operation(
    kind: OperationKind,
    c_in: int,
    c_out: int,
    stride: int,
    rng: np.random.Generator,
    quant: str,
    relu: bool,
    dtype=np.float32,
    per_filter: bool = True,
) -> Operation:
    kind = OperationKind(kind)
    if kind == OperationKind.ZERO:
        return ZeroOp()
    if kind == OperationKind.IDENTITY:
        return IdentityOp(c_out, stride)
    if kind.is_pool:
        return PoolOp(kind, c_out, stride, dtype)
    spec = ConvSpec.square(c_in, c_out, kind.kernel, stride, kind.dilation)
    return ConvOp(kind, ConvUnit(spec, rng, quant, relu, dtype, per_filter))
