"""Analytic memory and Flops accounting for binary networks.

Units per image (N = 1):

* binary conv: ``2 * C_in * h * w`` bitwise ops per output element (XNOR
  plus popcount), ``C_out * C_in * h * w`` one-bit parameters;
* full-precision conv / affine: one multiply-accumulate per weight tap per
  output element, 32-bit parameters;
* 3x3 max / average pooling on ``d``-bit values: ``8d`` / ``16d`` bitwise
  ops per output element, no parameters.

``memory_bits = 32 * real_params + binary_params`` and
``flops = real_ops + bitwise_ops / divisor``.  The default divisor 128
turns bitwise ops into binary MAC-equivalents (halving) and then credits a
64-wide word; ``divisor=64`` is the literal bitwise reading.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

from .autograd.ops import ConvSpec, conv_out_extent
from .cell.genotype import CellGene, Genotype, NodeGene, backbone_genotype
from .cell.network import needs_projection, reads_projection
from .cell.operations import OperationKind, PrecisionPolicy
from .cell.plan import PlanError, resnet_plan

REAL_BITS = 32
DEFAULT_D = 32
DEFAULT_DIVISOR = 128.0


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class OpCost:
    bitwise_ops: int = 0
    binary_params: int = 0
    real_ops: int = 0
    real_params: int = 0

    def __post_init__(self):
        if min(self.bitwise_ops, self.binary_params, self.real_ops, self.real_params) < 0:
            raise CostError(f"negative cost {self}")

    def __add__(self, other: "OpCost") -> "OpCost":
        return OpCost(
            self.bitwise_ops + other.bitwise_ops,
            self.binary_params + other.binary_params,
            self.real_ops + other.real_ops,
            self.real_params + other.real_params,
        )


def _conv_taps(spec: ConvSpec) -> int:
    return spec.c_in * spec.kernel_h * spec.kernel_w


def op_cost(kind, spec: Optional[ConvSpec], out_h: int, out_w: int, d: int = DEFAULT_D, binary: bool = True) -> OpCost:
    """Cost of one candidate operation, excluding BN/ReLU and scaling factors.

    For pooling ``spec.c_out`` gives the pooled channel count.  ``binary``
    only affects convolutions; ``False`` prices them as real MACs.
    """
    kind = OperationKind(kind)
    if d <= 0:
        raise CostError(f"pooling bit-width d must be positive, got {d}")
    if kind in (OperationKind.ZERO, OperationKind.IDENTITY):
        return OpCost()
    if spec is None:
        raise CostError(f"{kind.tag} needs a ConvSpec")
    outputs = spec.c_out * out_h * out_w
    if kind.is_pool:
        per_output = 8 * d if kind == OperationKind.MAX_POOL3 else 16 * d
        return OpCost(bitwise_ops=per_output * outputs)
    weights = spec.c_out * _conv_taps(spec)
    if binary:
        return OpCost(bitwise_ops=2 * _conv_taps(spec) * outputs, binary_params=weights)
    return OpCost(real_ops=_conv_taps(spec) * outputs, real_params=weights)


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    cost: OpCost

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, **asdict(self.cost)}


@dataclass
class CostReport:
    name: str
    total: OpCost
    memory_bits: float
    flops: float
    memory_saving: float
    speedup: float
    layers: list[LayerCost] = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    @property
    def memory_mbit(self) -> float:
        return self.memory_bits / 1e6

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "memory_bits": self.memory_bits,
            "memory_mbit": self.memory_mbit,
            "flops": self.flops,
            "memory_saving": self.memory_saving,
            "speedup": self.speedup,
            "totals": asdict(self.total),
            "settings": self.settings,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def table(self) -> str:
        head = f"{'layer':<32}{'kind':<12}{'bitwise':>16}{'bin params':>14}{'real ops':>16}{'real params':>14}"
        rows = [head, "-" * len(head)]
        for layer in self.layers:
            c = layer.cost
            rows.append(
                f"{layer.name:<32}{layer.kind:<12}{c.bitwise_ops:>16,}{c.binary_params:>14,}{c.real_ops:>16,}{c.real_params:>14,}"
            )
        rows.append("-" * len(head))
        rows.append(f"memory: {self.memory_mbit:.2f} Mbit   saving: {self.memory_saving:.2f}x")
        rows.append(f"flops:  {self.flops:.4g}   speedup: {self.speedup:.2f}x")
        return "\n".join(rows)


class _Accumulator:
    def __init__(self, policy: PrecisionPolicy, d: int, count_scale_ops: bool):
        self.policy = policy
        self.d = d
        self.count_scale_ops = count_scale_ops
        self.layers: list[LayerCost] = []

    def add(self, name: str, kind: str, cost: OpCost) -> None:
        self.layers.append(LayerCost(name, kind, cost))

    def conv(self, name: str, spec: ConvSpec, h: int, w: int, role: str, kind: str = "conv") -> tuple[int, int]:
        oh = conv_out_extent(h, spec.kernel_h, spec.stride, spec.padding, spec.dilation)
        ow = conv_out_extent(w, spec.kernel_w, spec.stride, spec.padding, spec.dilation)
        if oh < 1 or ow < 1:
            raise CostError(f"{name}: input {h}x{w} too small for {spec}")
        binary = not self.policy.keeps_real(role, spec.kernel_h)
        cost = op_cost(OperationKind.CONV3, spec, oh, ow, binary=binary)  # any conv kind prices by spec
        if binary:
            # per-filter scaling factors: C_out reals, one multiply per output
            scale_ops = spec.c_out * oh * ow if self.count_scale_ops else 0
            cost = cost + OpCost(real_ops=scale_ops, real_params=spec.c_out)
        self.add(name, kind, cost)
        self.bn(name + ".bn", spec.c_out)
        return oh, ow

    def bn(self, name: str, channels: int) -> None:
        self.add(name, "bn", OpCost(real_params=2 * channels))

    def pool(self, name: str, kind: OperationKind, channels: int, oh: int, ow: int) -> None:
        spec = ConvSpec(channels, channels, 3, 3)
        self.add(name, kind.tag, op_cost(kind, spec, oh, ow, self.d))


def _cell_cost(acc: _Accumulator, gene: CellGene, prefix: str, h: int, w: int, c_in: int) -> tuple[int, int]:
    plan = gene.plan
    if plan.c_in != c_in:
        raise CostError(f"{prefix}: expects {plan.c_in} input channels, receives {c_in}")
    extents = [(h, w)]
    for j in range(1, plan.n_nodes):
        extents.append(acc.conv(f"{prefix}.backbone.{j}", plan.backbone_spec(j), *extents[j - 1], role="body"))
    if needs_projection(gene):
        acc.conv(f"{prefix}.projection", plan.projection_spec(), h, w, role="downsample", kind="downsample")
    last = extents[-1]
    for j, node in enumerate(gene.nodes, start=1):
        oh, ow = extents[j]
        for src, kind in node.ops:
            name = f"{prefix}.node{j}.{kind.tag}<{src}"
            via_proj = reads_projection(plan, src, j, kind)
            c_src = plan.c_out if via_proj else plan.channels[src]
            if kind.is_conv:
                spec = ConvSpec.square(c_src, plan.channels[j], kind.kernel, plan.edge_stride(src, j), kind.dilation)
                got = acc.conv(name, spec, *extents[src], role="body", kind=kind.tag)
                if got != (oh, ow):
                    raise CostError(f"{name}: output {got} does not match node extent {(oh, ow)}")
            elif kind.is_pool:
                acc.pool(name, kind, c_src, *(last if via_proj else (oh, ow)))
                acc.bn(name + ".bn", plan.channels[j])
    return last


def _resolve_input(genotype: Genotype, input_shape) -> tuple[int, int, int]:
    if isinstance(input_shape, int):
        input_shape = (genotype.in_channels, input_shape, input_shape)
    c, h, w = (int(v) for v in input_shape)
    if c != genotype.in_channels:
        raise CostError(f"input has {c} channels, network expects {genotype.in_channels}")
    if h < 1 or w < 1:
        raise CostError(f"bad input extent {h}x{w}")
    return c, h, w


def _raw_cost(genotype: Genotype, input_shape, policy: PrecisionPolicy, d: int, count_scale_ops: bool) -> _Accumulator:
    acc = _Accumulator(policy, d, count_scale_ops)
    c, h, w = _resolve_input(genotype, input_shape)
    stem = genotype.stem
    h, w = acc.conv("stem.conv", stem.spec(c), h, w, role="first_conv")
    if stem.pool:
        oh, ow = conv_out_extent(h, 3, 2, 1), conv_out_extent(w, 3, 2, 1)
        acc.pool("stem.pool", OperationKind.MAX_POOL3, stem.channels, oh, ow)
        h, w = oh, ow
    c = stem.channels
    for p, cells in enumerate(genotype.positions()):
        outs = [_cell_cost(acc, gene, f"cell{p}.b{gene.branch}", h, w, c) for gene in cells]
        h, w = outs[0]
        c = cells[0].plan.c_out
    features, classes = c, genotype.num_classes
    if policy.keeps_real("classifier"):
        acc.add("classifier", "linear", OpCost(real_ops=features * classes, real_params=features * classes))
    else:
        acc.add(
            "classifier",
            "linear",
            OpCost(bitwise_ops=2 * features * classes, binary_params=features * classes, real_ops=classes, real_params=classes),
        )
    return acc


def reference_genotype(genotype: Genotype) -> Genotype:
    """Plain backbone of the same plan (identity connections cost nothing)."""
    return backbone_genotype(genotype.plan(), OperationKind.IDENTITY, genotype.variant)


def _summarize(acc: _Accumulator, divisor: float) -> tuple[OpCost, float, float]:
    total = OpCost()
    for layer in acc.layers:
        total = total + layer.cost
    memory = REAL_BITS * total.real_params + total.binary_params
    flops = total.real_ops + total.bitwise_ops / divisor
    return total, float(memory), float(flops)


def model_cost(
    network_desc: Union[Genotype, str],
    input_shape=224,
    policy: Optional[PrecisionPolicy] = None,
    d: int = DEFAULT_D,
    divisor: float = DEFAULT_DIVISOR,
    count_scale_ops: bool = True,
    name: Optional[str] = None,
) -> CostReport:
    """Sum per-layer costs; saving and speedup are against the all-real plain backbone."""
    if divisor <= 0:
        raise CostError(f"divisor must be positive, got {divisor}")
    if isinstance(network_desc, str):
        name = name or network_desc
        network_desc, default_policy = preset(network_desc)
        policy = policy or default_policy
    policy = policy or PrecisionPolicy()
    try:
        acc = _raw_cost(network_desc, input_shape, policy, d, count_scale_ops)
        ref = _raw_cost(reference_genotype(network_desc), input_shape, PrecisionPolicy(all_real=True), d, count_scale_ops)
    except PlanError as e:
        raise CostError(str(e)) from None
    total, memory, flops = _summarize(acc, divisor)
    _, ref_memory, ref_flops = _summarize(ref, divisor)
    settings = {
        "input_shape": list(_resolve_input(network_desc, input_shape)),
        "policy": asdict(policy),
        "d": d,
        "divisor": divisor,
        "count_scale_ops": count_scale_ops,
    }
    return CostReport(
        name or network_desc.variant,
        total,
        memory,
        flops,
        ref_memory / memory,
        ref_flops / flops,
        acc.layers,
        settings,
    )


# ----------------------------------------------------------------------------
# presets


def nasb_resnet18_genotype() -> Genotype:
    """Per cell: node 1 keeps Identity from node 0, later nodes MaxPool3 from their predecessor.

    Totals 12 max pooling and 4 identity operations.
    """
    plan = resnet_plan(18)
    cells = []
    for cell in plan.cells:
        nodes = [NodeGene(0, ((0, OperationKind.IDENTITY),))]
        nodes += [NodeGene(j - 1, ((j - 1, OperationKind.MAX_POOL3),)) for j in range(2, cell.n_nodes)]
        cells.append(CellGene(cell, tuple(nodes)))
    return Genotype("NASB", tuple(cells), plan.in_channels, plan.stem, plan.num_classes)


def nasb_resnet50_genotype() -> Genotype:
    """41 max pooling, 6 identity and one dilated 1x1 conv over the 48 bottleneck nodes."""
    plan = resnet_plan(50)
    cells = []
    for k, cell in enumerate(plan.cells):
        n = cell.n_nodes
        kinds = {1: OperationKind.IDENTITY}
        if k == 0:
            kinds[n - 1] = OperationKind.DIL_CONV1
        elif k in (1, 2):
            kinds[n - 1] = OperationKind.IDENTITY
        nodes = [NodeGene(j - 1, ((j - 1, kinds.get(j, OperationKind.MAX_POOL3)),)) for j in range(1, n)]
        cells.append(CellGene(cell, tuple(nodes)))
    return Genotype("NASB", tuple(cells), plan.in_channels, plan.stem, plan.num_classes)


PRESETS = (
    "resnet18",
    "resnet34",
    "resnet50",
    "bireal-resnet18",
    "bireal-resnet34",
    "bireal-resnet50",
    "nasb-resnet18",
    "nasb-resnet50",
)


def preset(name: str) -> tuple[Genotype, PrecisionPolicy]:
    """Built-in architecture and its natural precision policy."""
    if name not in PRESETS:
        raise CostError(f"unknown architecture {name!r}; expected one of {PRESETS} or a genotype file")
    if name == "nasb-resnet18":
        return nasb_resnet18_genotype(), PrecisionPolicy()
    if name == "nasb-resnet50":
        return nasb_resnet50_genotype(), PrecisionPolicy()
    depth = int(name.rsplit("resnet", 1)[1])
    geno = backbone_genotype(resnet_plan(depth), OperationKind.IDENTITY, "NASB")
    if name.startswith("bireal-"):
        return geno, PrecisionPolicy()
    return geno, PrecisionPolicy(all_real=True)
