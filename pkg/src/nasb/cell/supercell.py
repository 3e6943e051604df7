"""The search-time supercell: backbone chain plus a fully connected DAG of
gated candidate operations, and the rule that turns trained alpha into a
genotype."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from ..autograd import ops
from ..autograd.layers import Module
from ..autograd.tensor import Tensor
from ..nasgate import EdgeArch, GateSample, edge_rng, path_weights
from .genotype import CellGene, Genotype, GenotypeError, NodeGene, RetainSpec
from .network import (
    Classifier,
    Stem,
    _accumulate,
    make_backbone,
    make_edge_op,
    make_projection,
    reads_projection,
)
from .operations import ALL_KINDS, OperationKind, PrecisionPolicy
from .plan import CellPlan, NetworkPlan, PlanError

# ranking compares path weights at this many decimals so that values equal
# up to softmax rounding fall through to the tie-break
_RANK_DECIMALS = 12


class Edge(Module):
    def __init__(self, src: int, dst: int, op_list):
        self.src = src
        self.dst = dst
        self.ops = list(op_list)


class SuperCell(Module):
    """Backbone of ``n_nodes - 1`` conv layers and ``n(n-1)/2`` gated edges."""

    def __init__(
        self,
        plan: CellPlan,
        rng: np.random.Generator,
        *,
        op_kinds: Optional[Sequence[OperationKind]] = None,
        policy: Optional[PrecisionPolicy] = None,
        gate_seed: int = 0,
        key: tuple[int, ...] = (0,),
        mode: str = "search",
        dtype=np.float32,
        per_filter: bool = True,
    ):
        policy = policy or PrecisionPolicy()
        kinds = tuple(sorted(OperationKind(k) for k in (ALL_KINDS if op_kinds is None else op_kinds)))
        if not kinds or len(set(kinds)) != len(kinds):
            raise ValueError("operation mask must list distinct kinds")
        self.plan = plan
        self.kinds = kinds
        self.backbone = make_backbone(plan, rng, mode, policy, dtype, per_filter)
        self.projection = make_projection(plan, rng, mode, policy, dtype, per_filter) if plan.has_projection() else None
        self.edges = [
            Edge(i, j, [make_edge_op(plan, i, j, k, rng, mode, policy, dtype, per_filter) for k in kinds])
            for i, j in plan.edges()
        ]
        self.arch = [EdgeArch(np.zeros(len(kinds)), edge_rng(gate_seed, *key, i, j)) for i, j in plan.edges()]

    @property
    def n_nodes(self) -> int:
        return self.plan.n_nodes

    def alphas(self) -> list[np.ndarray]:
        return [a.alpha for a in self.arch]

    def probabilities(self) -> list[np.ndarray]:
        return [a.probabilities() for a in self.arch]

    def sample_gates(self) -> list[GateSample]:
        return [a.sample() for a in self.arch]

    def gates_for(self, kind: OperationKind) -> list[GateSample]:
        """Deterministic gates that select ``kind`` on every edge."""
        idx = self.kinds.index(OperationKind(kind))
        out = []
        for a in self.arch:
            g = np.zeros(a.m)
            g[idx] = 1.0
            out.append(GateSample(g, a.probabilities()))
        return out

    def forward(self, x: Tensor, gates: Sequence[GateSample], gate_scalars: Optional[Sequence[Tensor]] = None):
        return supercell_forward(self, x, gates, gate_scalars)


def build_supercell(
    group_spec: Union[CellPlan, tuple[int, int, int]],
    n_nodes: int,
    rng: Optional[np.random.Generator] = None,
    **kwargs,
) -> SuperCell:
    """``group_spec`` is a full :class:`CellPlan` or ``(c_in, c_out, stride)``.

    The tuple form builds a plain 3x3 group whose first layer carries the
    stride and the channel change.
    """
    if n_nodes < 2:
        raise PlanError(f"a supercell needs at least 2 nodes, got {n_nodes}")
    if isinstance(group_spec, CellPlan):
        plan = group_spec
        if plan.n_nodes != n_nodes:
            raise PlanError(f"plan has {plan.n_nodes} nodes but n_nodes={n_nodes}")
    else:
        c_in, c_out, stride = group_spec
        plan = CellPlan.from_lists([c_in] + [c_out] * (n_nodes - 1), [stride] + [1] * (n_nodes - 2))
    return SuperCell(plan, rng if rng is not None else np.random.default_rng(0), **kwargs)


def supercell_forward(
    cell: SuperCell,
    x: Tensor,
    gates: Sequence[GateSample],
    gate_scalars: Optional[Sequence[Tensor]] = None,
) -> Tensor:
    """node_j = backbone_j(node_{j-1}) + sum_i active_op(i,j)(node_i).

    When ``gate_scalars`` is given, each active output is multiplied by its
    edge's scalar (value 1) so that backward leaves d(loss)/d(g_active) in
    the scalar's gradient.
    """
    if len(gates) != len(cell.edges):
        raise ValueError(f"need one gate per edge: {len(cell.edges)} edges, {len(gates)} gates")
    plan = cell.plan
    states = [x]
    proj = cell.projection(x) if cell.projection is not None else None
    e = 0
    for j in range(1, plan.n_nodes):
        h = cell.backbone[j - 1](states[j - 1])
        for i in range(j):
            edge = cell.edges[e]
            gate = gates[e]
            if gate.g.shape != (len(edge.ops),) or gate.g.sum() != 1:
                raise ValueError(f"edge ({i},{j}): gate must be one-hot over {len(edge.ops)} operations")
            op = edge.ops[gate.index]
            inp = proj if reads_projection(plan, i, j, op.kind) else states[i]
            out = op(inp)
            if out is not None and gate_scalars is not None:
                out = ops.mul(out, gate_scalars[e])
            h = _accumulate(h, out, f"edge ({i},{j}) {op.kind.tag}")
            e += 1
        states.append(h)
    return states[-1]


class SuperNet(Module):
    """M_s: stem -> supercells -> global average pool -> classifier."""

    def __init__(
        self,
        plan: NetworkPlan,
        seed: int = 0,
        *,
        op_kinds: Optional[Sequence[OperationKind]] = None,
        policy: Optional[PrecisionPolicy] = None,
        dtype=np.float32,
        per_filter: bool = True,
    ):
        policy = policy or PrecisionPolicy()
        rng = np.random.default_rng(seed)
        self.plan = plan
        self.stem = Stem(plan.in_channels, plan.stem, rng, "search", policy, dtype, per_filter)
        self.cells = [
            SuperCell(c, rng, op_kinds=op_kinds, policy=policy, gate_seed=seed, key=(k,), dtype=dtype, per_filter=per_filter)
            for k, c in enumerate(plan.cells)
        ]
        self.classifier = Classifier(plan.feature_channels, plan.num_classes, rng, "search", policy, dtype, per_filter)

    def edge_archs(self) -> list[EdgeArch]:
        return [a for c in self.cells for a in c.arch]

    def sample_gates(self) -> list[list[GateSample]]:
        return [c.sample_gates() for c in self.cells]

    def forward(self, x, gates, gate_scalars=None):
        h = self.stem(x)
        for k, cell in enumerate(self.cells):
            h = supercell_forward(cell, h, gates[k], None if gate_scalars is None else gate_scalars[k])
        return self.classifier(ops.global_avg_pool(h))


def _rank(p: float) -> float:
    return -round(float(p), _RANK_DECIMALS)


@dataclass
class CellArch:
    """Architecture parameters of one cell without any operation weights."""

    plan: CellPlan
    kinds: tuple[OperationKind, ...]
    alphas: list[np.ndarray]

    @property
    def n_nodes(self) -> int:
        return self.plan.n_nodes

    def probabilities(self) -> list[np.ndarray]:
        return [path_weights(a) for a in self.alphas]


@dataclass
class NetArch:
    plan: NetworkPlan
    cells: list[CellArch]

    @classmethod
    def of(cls, net: "SuperNet") -> "NetArch":
        return cls(net.plan, [CellArch(c.plan, c.kinds, [a.copy() for a in c.alphas()]) for c in net.cells])


def derive_nodes(cell: Union[SuperCell, CellArch], spec: RetainSpec) -> tuple[NodeGene, ...]:
    """Per node: best (edge, op) picks the predecessor; top-K ops on that edge stay.

    Ties prefer the lower operation index, then the nearer (higher-index)
    source node.
    """
    probs = cell.probabilities()
    edge_index = {edge: e for e, edge in enumerate(cell.plan.edges())}
    eligible = [k for k in cell.kinds if not (spec.exclude_identity and k == OperationKind.IDENTITY)]
    nodes = []
    n = cell.n_nodes
    for j in range(1, n):
        k_keep = spec.k_for(j, n)
        if k_keep > len(eligible):
            raise GenotypeError(f"node {j}: {spec.variant} retains {k_keep} ops but only {len(eligible)} are eligible")
        best = None
        for i in range(j):
            p = probs[edge_index[(i, j)]]
            for kind in eligible:
                key = (_rank(p[cell.kinds.index(kind)]), int(kind), -i)
                if best is None or key < best:
                    best = key
        pred = -best[2]
        p = probs[edge_index[(pred, j)]]
        ranked = sorted(eligible, key=lambda kind: (_rank(p[cell.kinds.index(kind)]), int(kind)))
        nodes.append(NodeGene(pred, tuple((pred, kind) for kind in ranked[:k_keep])))
    return tuple(nodes)


def derive(model, spec: RetainSpec) -> Union[CellGene, Genotype]:
    """Discrete architecture from trained alpha.

    A :class:`SuperCell` or :class:`CellArch` yields a :class:`CellGene`; a
    :class:`SuperNet` or :class:`NetArch` yields a full :class:`Genotype`.
    Multi-branch variants duplicate each derived cell into
    ``spec.branches`` parallel copies.
    """
    if isinstance(model, (SuperCell, CellArch)):
        return CellGene(model.plan, derive_nodes(model, spec))
    cells = []
    for cell in model.cells:
        nodes = derive_nodes(cell, spec)
        cells.extend(CellGene(cell.plan, nodes, b) for b in range(spec.branches))
    plan = model.plan
    return Genotype(spec.variant, tuple(cells), plan.in_channels, plan.stem, plan.num_classes)


def set_alphas(model: Union[SuperCell, SuperNet], alphas: Sequence[np.ndarray]) -> None:
    archs = model.arch if isinstance(model, SuperCell) else model.edge_archs()
    if len(alphas) != len(archs):
        raise ValueError(f"expected {len(archs)} alpha vectors, got {len(alphas)}")
    for a, new in zip(archs, alphas):
        new = np.asarray(new, dtype=np.float64)
        if new.shape != a.alpha.shape:
            raise ValueError(f"alpha shape {new.shape} != {a.alpha.shape}")
        a.alpha[...] = new

