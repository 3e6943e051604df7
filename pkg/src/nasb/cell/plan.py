"""Channel/stride plans for cells and whole networks, plus ResNet presets.

A cell with ``n`` nodes carries ``n - 1`` backbone layers; layer ``j``
maps node ``j - 1`` to node ``j``.  Every conv in the package uses same
padding, so a stride-``s`` op always yields ``ceil(H / s)`` rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from ..autograd.ops import ConvSpec

SHORTCUT_MODES = ("pad", "project")


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class LayerPlan:
    channels: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class CellPlan:
    """Backbone of one cell.

    ``shortcut="project"`` adds a real-valued 1x1 conv + BN that maps node 0
    to the cell-output shape; parameter-free ops on edges leaving node 0 read
    that projection instead of zero-padding/subsampling node 0.
    """

    c_in: int
    layers: tuple[LayerPlan, ...]
    shortcut: str = "pad"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self) -> None:
        if self.c_in < 1:
            raise PlanError(f"cell input channels must be positive, got {self.c_in}")
        if not self.layers:
            raise PlanError("a cell needs at least two nodes (one backbone layer)")
        if self.shortcut not in SHORTCUT_MODES:
            raise PlanError(f"unknown shortcut mode {self.shortcut!r}")
        for j, layer in enumerate(self.layers, start=1):
            if layer.channels < 1:
                raise PlanError(f"layer {j}: channels must be positive, got {layer.channels}")
            if layer.stride < 1:
                raise PlanError(f"layer {j}: stride must be positive, got {layer.stride}")
            if layer.kernel < 1 or layer.kernel % 2 == 0:
                raise PlanError(f"layer {j}: kernel must be odd and positive, got {layer.kernel}")

    @classmethod
    def from_lists(cls, channels, strides, kernels=None, shortcut: str = "pad") -> "CellPlan":
        """``channels`` lists every node including node 0."""
        channels, strides = list(channels), list(strides)
        kernels = [3] * len(strides) if kernels is None else list(kernels)
        if len(channels) < 2:
            raise PlanError("a cell needs at least two nodes")
        if len(strides) != len(channels) - 1 or len(kernels) != len(strides):
            raise PlanError(
                f"inconsistent plan: {len(channels)} node channels, {len(strides)} strides, {len(kernels)} kernels"
            )
        layers = tuple(LayerPlan(int(c), int(k), int(s)) for c, k, s in zip(channels[1:], kernels, strides))
        return cls(int(channels[0]), layers, shortcut)

    @property
    def n_nodes(self) -> int:
        return len(self.layers) + 1

    @property
    def channels(self) -> list[int]:
        return [self.c_in] + [layer.channels for layer in self.layers]

    @property
    def strides(self) -> list[int]:
        return [layer.stride for layer in self.layers]

    @property
    def kernels(self) -> list[int]:
        return [layer.kernel for layer in self.layers]

    @property
    def c_out(self) -> int:
        return self.layers[-1].channels

    def scale(self, j: int) -> int:
        """Cumulative stride from node 0 to node ``j``."""
        out = 1
        for layer in self.layers[:j]:
            out *= layer.stride
        return out

    def edge_stride(self, i: int, j: int) -> int:
        return self.scale(j) // self.scale(i)

    @property
    def crosses(self) -> bool:
        return self.c_in != self.c_out or self.scale(self.n_nodes - 1) != 1

    def has_projection(self) -> bool:
        return self.shortcut == "project" and self.crosses

    def uses_projection(self, i: int, j: int) -> bool:
        """Whether a parameter-free op on edge (i, j) reads the projected input."""
        return self.has_projection() and i == 0 and self.scale(j) == self.scale(self.n_nodes - 1)

    def projection_spec(self) -> ConvSpec:
        return ConvSpec.square(self.c_in, self.c_out, 1, self.scale(self.n_nodes - 1))

    def backbone_spec(self, j: int) -> ConvSpec:
        layer = self.layers[j - 1]
        return ConvSpec.square(self.channels[j - 1], layer.channels, layer.kernel, layer.stride)

    def node_extent(self, j: int, h: int) -> int:
        for layer in self.layers[:j]:
            h = -(-h // layer.stride)
        return h

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for j in range(1, self.n_nodes) for i in range(j)]


@dataclass(frozen=True)
class StemPlan:
    channels: int
    kernel: int = 3
    stride: int = 1
    pool: bool = False  # 3x3 stride-2 max pool after the first conv

    def spec(self, in_channels: int) -> ConvSpec:
        return ConvSpec.square(in_channels, self.channels, self.kernel, self.stride)

    def out_extent(self, h: int) -> int:
        h = -(-h // self.stride)
        return -(-h // 2) if self.pool else h


@dataclass(frozen=True)
class NetworkPlan:
    in_channels: int
    stem: StemPlan
    cells: tuple[CellPlan, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        if self.num_classes < 2:
            raise PlanError(f"need at least two classes, got {self.num_classes}")
        c = self.stem.channels
        for k, cell in enumerate(self.cells):
            if cell.c_in != c:
                raise PlanError(f"cell {k} expects {cell.c_in} input channels but receives {c}")
            c = cell.c_out

    @property
    def feature_channels(self) -> int:
        return self.cells[-1].c_out if self.cells else self.stem.channels


# ----------------------------------------------------------------------------
# presets


_IMAGENET_STEM = StemPlan(64, 7, 2, pool=True)
_RESNET_BLOCKS = {18: (2, 2, 2, 2), 34: (3, 4, 6, 3), 50: (3, 4, 6, 3)}


def resnet_plan(depth: int, num_classes: int = 1000, in_channels: int = 3) -> NetworkPlan:
    """One cell per residual group; node count = convs in the group + 1.

    Bottleneck groups put the stride on the first 1x1 conv of the group.
    """
    if depth not in _RESNET_BLOCKS:
        raise PlanError(f"unsupported ResNet depth {depth}")
    cells = []
    c_prev = _IMAGENET_STEM.channels
    for g, blocks in enumerate(_RESNET_BLOCKS[depth]):
        width = 64 * 2**g
        stride = 1 if g == 0 else 2
        layers = []
        for b in range(blocks):
            s = stride if b == 0 else 1
            if depth == 50:
                layers += [LayerPlan(width, 1, s), LayerPlan(width, 3, 1), LayerPlan(4 * width, 1, 1)]
            else:
                layers += [LayerPlan(width, 3, s), LayerPlan(width, 3, 1)]
        cells.append(CellPlan(c_prev, tuple(layers), "project"))
        c_prev = layers[-1].channels
    return NetworkPlan(in_channels, _IMAGENET_STEM, tuple(cells), num_classes)


def toy_plan(
    in_channels: int = 1,
    width: int = 8,
    n_nodes: int = 3,
    n_cells: int = 1,
    num_classes: int = 2,
    shortcut: str = "pad",
    stem: Optional[StemPlan] = None,
) -> NetworkPlan:
    """Small stride-1 network for desk-scale runs."""
    stem = stem or StemPlan(width, 3, 1)
    cells = [CellPlan(stem.channels if k == 0 else width, tuple(LayerPlan(width) for _ in range(n_nodes - 1)), shortcut)
             for k in range(n_cells)]
    return NetworkPlan(in_channels, stem, tuple(cells), num_classes)


def plan_to_dict(plan: NetworkPlan) -> dict:
    return {
        "in_channels": plan.in_channels,
        "stem": {"channels": plan.stem.channels, "kernel": plan.stem.kernel, "stride": plan.stem.stride, "pool": plan.stem.pool},
        "cells": [
            {"channels": c.channels, "strides": c.strides, "kernels": c.kernels, "shortcut": c.shortcut} for c in plan.cells
        ],
        "num_classes": plan.num_classes,
    }


def plan_from_dict(d: dict) -> NetworkPlan:
    try:
        st = d["stem"]
        stem = StemPlan(int(st["channels"]), int(st["kernel"]), int(st["stride"]), bool(st["pool"]))
        cells = tuple(CellPlan.from_lists(c["channels"], c["strides"], c.get("kernels"), c.get("shortcut", "pad")) for c in d["cells"])
        return NetworkPlan(int(d["in_channels"]), stem, cells, int(d["num_classes"]))
    except KeyError as e:
        raise PlanError(f"network plan is missing field {e.args[0]!r}") from None
