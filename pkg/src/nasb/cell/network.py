"""Whole networks: stem -> cells -> global average pool -> classifier."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..autograd import ops
from ..autograd.layers import Module
from ..autograd.tensor import ShapeError, Tensor
from ..binarize import BinarizedWeight, binarize_activations
from .genotype import CellGene, Genotype
from .operations import QUANT_FOR_MODE, ConvUnit, Operation, OperationKind, PrecisionPolicy, build_operation
from .plan import CellPlan, NetworkPlan, StemPlan

MODES = ("search", "full", "binary")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def quant_for(mode: str, policy: PrecisionPolicy, role: str, kernel: int = 3) -> str:
    return "none" if policy.keeps_real(role, kernel) else QUANT_FOR_MODE[mode]


class Stem(Module):
    def __init__(self, in_channels: int, plan: StemPlan, rng, mode: str, policy: PrecisionPolicy, dtype, per_filter=True):
        self.pool = plan.pool
        quant = quant_for(mode, policy, "first_conv")
        self.conv = ConvUnit(plan.spec(in_channels), rng, quant, mode != "search", dtype, per_filter)

    def forward(self, x):
        h = self.conv(x)
        return ops.max_pool2d(h, 3, 2, 1) if self.pool else h


class Classifier(Module):
    """Biasless affine head; binarized like a conv unit when the policy allows."""

    def __init__(self, in_features: int, num_classes: int, rng, mode: str, policy: PrecisionPolicy, dtype, per_filter=True):
        self.quant = quant_for(mode, policy, "classifier")
        self.per_filter = per_filter
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, (num_classes, in_features)).astype(dtype), requires_grad=True)

    def forward(self, feats):
        w = self.weight
        if self.quant == "binary":
            feats = binarize_activations(feats)
            w = BinarizedWeight.from_latent(w, self.per_filter).tensor()
        elif self.quant == "tanh":
            feats = ops.tanh(feats)
        return ops.linear(feats, w)


def make_backbone(plan: CellPlan, rng, mode, policy, dtype, per_filter) -> list[ConvUnit]:
    relu = mode != "search"
    return [
        ConvUnit(plan.backbone_spec(j), rng, quant_for(mode, policy, "body", plan.kernels[j - 1]), relu, dtype, per_filter)
        for j in range(1, plan.n_nodes)
    ]


def make_projection(plan: CellPlan, rng, mode, policy, dtype, per_filter) -> ConvUnit:
    return ConvUnit(plan.projection_spec(), rng, quant_for(mode, policy, "downsample", 1), False, dtype, per_filter)


def make_edge_op(plan: CellPlan, i: int, j: int, kind: OperationKind, rng, mode, policy, dtype, per_filter) -> Operation:
    """Operation on edge (i, j) whose output already has node ``j``'s shape."""
    kind = OperationKind(kind)
    c_out = plan.channels[j]
    if not kind.is_conv and plan.uses_projection(i, j):
        c_in, stride = plan.c_out, 1
    else:
        c_in, stride = plan.channels[i], plan.edge_stride(i, j)
    quant = quant_for(mode, policy, "body", kind.kernel)
    return build_operation(kind, c_in, c_out, stride, rng, quant, mode != "search", dtype, per_filter)


def reads_projection(plan: CellPlan, i: int, j: int, kind: OperationKind) -> bool:
    return not OperationKind(kind).is_conv and plan.uses_projection(i, j)


def needs_projection(gene: CellGene) -> bool:
    return any(
        kind != OperationKind.ZERO and reads_projection(gene.plan, src, j, kind)
        for j, node in enumerate(gene.nodes, start=1)
        for src, kind in node.ops
    )


def _accumulate(h: Tensor, out: Optional[Tensor], where: str) -> Tensor:
    if out is None:
        return h
    if out.shape != h.shape:
        raise ShapeError(f"{where}: operation output {out.shape} does not match node shape {h.shape}")
    return h + out


class NodeOps(Module):
    def __init__(self, srcs: Sequence[int], op_list: Sequence[Operation]):
        self.srcs = tuple(srcs)
        self.ops = list(op_list)


class DerivedCell(Module):
    def __init__(self, gene: CellGene, rng, mode: str, policy: PrecisionPolicy, dtype=np.float32, per_filter=True):
        _check_mode(mode)
        plan = gene.plan
        self.gene = gene
        self.backbone = make_backbone(plan, rng, mode, policy, dtype, per_filter)
        self.projection = make_projection(plan, rng, mode, policy, dtype, per_filter) if needs_projection(gene) else None
        self.nodes = [
            NodeOps(
                [src for src, _ in node.ops],
                [make_edge_op(plan, src, j, kind, rng, mode, policy, dtype, per_filter) for src, kind in node.ops],
            )
            for j, node in enumerate(gene.nodes, start=1)
        ]

    def forward(self, x):
        plan = self.gene.plan
        states = [x]
        proj = self.projection(x) if self.projection is not None else None
        for j, node in enumerate(self.nodes, start=1):
            h = self.backbone[j - 1](states[j - 1])
            for src, op in zip(node.srcs, node.ops):
                inp = proj if reads_projection(plan, src, j, op.kind) else states[src]
                h = _accumulate(h, op(inp), f"edge ({src},{j}) {op.kind.tag}")
            states.append(h)
        return states[-1]


def forward_cells(branches: Sequence[int], x, run):
    """Branch-0 cells start a new position; later branches share its input and are summed."""
    out = cell_in = x
    for k, branch in enumerate(branches):
        if branch == 0:
            cell_in = out
            out = run(k, cell_in)
        else:
            out = out + run(k, cell_in)
    return out


class Network(Module):
    """A derived network (M_p in ``full`` mode, M_f in ``binary`` mode)."""

    def __init__(self, genotype: Genotype, mode: str, policy: PrecisionPolicy, rng, dtype=np.float32, per_filter=True):
        _check_mode(mode)
        self.genotype = genotype
        self.mode = mode
        self.policy = policy
        self.per_filter = per_filter
        plan = genotype.plan()
        self.stem = Stem(plan.in_channels, plan.stem, rng, mode, policy, dtype, per_filter)
        self.cells = [DerivedCell(g, rng, mode, policy, dtype, per_filter) for g in genotype.cells]
        self.classifier = Classifier(plan.feature_channels, plan.num_classes, rng, mode, policy, dtype, per_filter)

    @property
    def backbone_depth(self) -> int:
        """Conv layers on the main path: stem + backbone chain of one branch."""
        return 1 + sum(len(c.backbone) for c in self.cells if c.gene.branch == 0)

    def forward(self, x):
        h = self.stem(x)
        h = forward_cells([c.gene.branch for c in self.cells], h, lambda k, inp: self.cells[k](inp))
        return self.classifier(ops.global_avg_pool(h))

    def conv_units(self) -> list[tuple[str, ConvUnit]]:
        return [(name, m) for name, m in self.named_modules() if isinstance(m, ConvUnit)]


def instantiate(
    genotype: Genotype,
    mode: str = "full",
    policy: Optional[PrecisionPolicy] = None,
    seed: int = 0,
    dtype=np.float32,
    per_filter: bool = True,
) -> Network:
    """Build M_p (``full``) or M_f (``binary``) from a genotype, seeded."""
    if mode not in ("full", "binary"):
        raise ValueError(f"instantiate mode must be 'full' or 'binary', got {mode!r}")
    return Network(genotype, mode, policy or PrecisionPolicy(), np.random.default_rng(seed), dtype, per_filter)


def plan_of(genotype_or_plan) -> NetworkPlan:
    return genotype_or_plan.plan() if isinstance(genotype_or_plan, Genotype) else genotype_or_plan
