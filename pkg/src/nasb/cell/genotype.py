"""Derived architectures, their retain rules and JSON form."""

from __future__ import annotations

import json
from dataclasses import dataclass

from .operations import OperationKind
from .plan import CellPlan, NetworkPlan, PlanError, StemPlan

GENOTYPE_VERSION = 1


class GenotypeError(ValueError):
    pass


@dataclass(frozen=True)
class RetainSpec:
    variant: str
    inner_k: int = 1
    output_k: int = 1
    exclude_identity: bool = False
    branches: int = 1

    TAGS = ("NASB", "V1", "V2", "V3", "V4", "V5")

    @classmethod
    def for_variant(cls, tag: str) -> "RetainSpec":
        tag = tag.upper()
        table = {
            "NASB": (1, 1, False, 1),
            "V1": (1, 1, False, 1),
            "V2": (1, 4, False, 1),
            "V3": (1, 1, False, 2),
            "V4": (4, 4, True, 1),
            "V5": (6, 8, False, 1),
        }
        if tag not in table:
            raise ValueError(f"unknown variant {tag!r}; expected one of {cls.TAGS}")
        return cls(tag, *table[tag])

    def k_for(self, node: int, n_nodes: int) -> int:
        return self.output_k if node == n_nodes - 1 else self.inner_k


@dataclass(frozen=True)
class NodeGene:
    pred: int
    ops: tuple[tuple[int, OperationKind], ...]

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple((int(s), OperationKind(k)) for s, k in self.ops))


@dataclass(frozen=True)
class CellGene:
    plan: CellPlan
    nodes: tuple[NodeGene, ...]  # entry j-1 describes node j
    branch: int = 0

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        n = self.plan.n_nodes
        if len(self.nodes) != n - 1:
            raise GenotypeError(f"cell with {n} nodes needs {n - 1} node entries, got {len(self.nodes)}")
        for j, node in enumerate(self.nodes, start=1):
            if not 0 <= node.pred < j:
                raise GenotypeError(f"node {j}: predecessor {node.pred} must be an earlier node")
            if not node.ops:
                raise GenotypeError(f"node {j}: no retained operations")
            for src, _ in node.ops:
                if not 0 <= src < j:
                    raise GenotypeError(f"node {j}: source {src} must be an earlier node")

    def op_counts(self) -> dict[OperationKind, int]:
        out: dict[OperationKind, int] = {}
        for node in self.nodes:
            for _, kind in node.ops:
                out[kind] = out.get(kind, 0) + 1
        return out


@dataclass(frozen=True)
class Genotype:
    variant: str
    cells: tuple[CellGene, ...]
    in_channels: int
    stem: StemPlan
    num_classes: int
    version: int = GENOTYPE_VERSION

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        if not self.cells:
            raise GenotypeError("genotype has no cells")
        if self.cells[0].branch != 0:
            raise GenotypeError("first cell must be branch 0")
        for k, cell in enumerate(self.cells[1:], start=1):
            prev = self.cells[k - 1]
            if cell.branch not in (0, prev.branch + 1):
                raise GenotypeError(f"cell {k}: branch {cell.branch} does not follow branch {prev.branch}")
            if cell.branch and (cell.plan.c_in, cell.plan.c_out, cell.plan.scale(cell.plan.n_nodes - 1)) != (
                prev.plan.c_in,
                prev.plan.c_out,
                prev.plan.scale(prev.plan.n_nodes - 1),
            ):
                raise GenotypeError(f"cell {k}: parallel branch shape differs from its sibling")
        try:
            self.plan()
        except PlanError as e:
            raise GenotypeError(str(e)) from None

    def positions(self) -> list[list[CellGene]]:
        """Cells grouped by network position; siblings are summed at the position output."""
        out: list[list[CellGene]] = []
        for cell in self.cells:
            if cell.branch == 0:
                out.append([cell])
            else:
                out[-1].append(cell)
        return out

    @property
    def branches(self) -> int:
        return max(cell.branch for cell in self.cells) + 1

    def plan(self) -> NetworkPlan:
        return NetworkPlan(self.in_channels, self.stem, tuple(p[0].plan for p in self.positions()), self.num_classes)

    def op_counts(self) -> dict[OperationKind, int]:
        out: dict[OperationKind, int] = {}
        for cell in self.cells:
            for k, v in cell.op_counts().items():
                out[k] = out.get(k, 0) + v
        return out

    # ------------------------------------------------------------------ JSON

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "variant": self.variant,
            "cells": [
                {
                    "n_nodes": c.plan.n_nodes,
                    "nodes": [
                        {"pred": n.pred, "ops": [{"src": s, "kind": k.tag} for s, k in n.ops]} for n in c.nodes
                    ],
                    "channels": c.plan.channels,
                    "strides": c.plan.strides,
                    "kernels": c.plan.kernels,
                    "shortcut": c.plan.shortcut,
                    "branch": c.branch,
                }
                for c in self.cells
            ],
            "network": {
                "in_channels": self.in_channels,
                "stem": {
                    "channels": self.stem.channels,
                    "kernel": self.stem.kernel,
                    "stride": self.stem.stride,
                    "pool": self.stem.pool,
                },
                "num_classes": self.num_classes,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Genotype":
        try:
            version = d["version"]
            if version != GENOTYPE_VERSION:
                raise GenotypeError(f"unsupported genotype version {version}")
            cells = []
            for c in d["cells"]:
                plan = CellPlan.from_lists(c["channels"], c["strides"], c.get("kernels"), c.get("shortcut", "pad"))
                if c["n_nodes"] != plan.n_nodes:
                    raise GenotypeError(f"n_nodes {c['n_nodes']} disagrees with {plan.n_nodes} channel entries")
                nodes = [
                    NodeGene(int(n["pred"]), [(int(o["src"]), OperationKind.from_tag(o["kind"])) for o in n["ops"]])
                    for n in c["nodes"]
                ]
                cells.append(CellGene(plan, tuple(nodes), int(c.get("branch", 0))))
            net = d["network"]
            st = net["stem"]
            stem = StemPlan(int(st["channels"]), int(st["kernel"]), int(st["stride"]), bool(st["pool"]))
            return cls(d["variant"], tuple(cells), int(net["in_channels"]), stem, int(net["num_classes"]), version)
        except KeyError as e:
            raise GenotypeError(f"genotype is missing field {e.args[0]!r}") from None
        except PlanError as e:
            raise GenotypeError(str(e)) from None

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise GenotypeError(f"genotype is not valid JSON: {e}") from None
        return cls.from_dict(d)


def check_retain(genotype: Genotype, spec: RetainSpec) -> None:
    """Raise GenotypeError unless every node obeys ``spec``'s retain rule."""
    if genotype.branches != spec.branches:
        raise GenotypeError(f"{spec.variant} expects {spec.branches} branch(es), genotype has {genotype.branches}")
    for c, cell in enumerate(genotype.cells):
        n = cell.plan.n_nodes
        for j, node in enumerate(cell.nodes, start=1):
            k = spec.k_for(j, n)
            if len(node.ops) != k:
                raise GenotypeError(f"cell {c} node {j}: {len(node.ops)} ops retained, {spec.variant} needs {k}")
            if any(src != node.pred for src, _ in node.ops):
                raise GenotypeError(f"cell {c} node {j}: ops must come from the predecessor {node.pred}")
            kinds = [kind for _, kind in node.ops]
            if len(set(kinds)) != len(kinds):
                raise GenotypeError(f"cell {c} node {j}: duplicate operations")
            if spec.exclude_identity and OperationKind.IDENTITY in kinds:
                raise GenotypeError(f"cell {c} node {j}: {spec.variant} excludes Identity")


def backbone_genotype(plan: NetworkPlan, kind: OperationKind = OperationKind.IDENTITY, variant: str = "NASB") -> Genotype:
    """Every node keeps one ``kind`` op from its immediate predecessor.

    With Identity this is the residual (Bi-Real style) network.
    """
    cells = [
        CellGene(cell, tuple(NodeGene(j - 1, ((j - 1, kind),)) for j in range(1, cell.n_nodes)))
        for cell in plan.cells
    ]
    return Genotype(variant, tuple(cells), plan.in_channels, plan.stem, plan.num_classes)
