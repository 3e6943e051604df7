"""Search space: operations, supercells, genotypes and derived networks."""

from .genotype import (
    GENOTYPE_VERSION,
    CellGene,
    Genotype,
    GenotypeError,
    NodeGene,
    RetainSpec,
    backbone_genotype,
    check_retain,
)
from .network import MODES, Classifier, DerivedCell, Network, Stem, instantiate
from .operations import ALL_KINDS, ConvUnit, Operation, OperationKind, PrecisionPolicy, build_operation
from .plan import CellPlan, LayerPlan, NetworkPlan, PlanError, StemPlan, plan_from_dict, plan_to_dict, resnet_plan, toy_plan
from .supercell import CellArch, NetArch, SuperCell, SuperNet, build_supercell, derive, derive_nodes, set_alphas, supercell_forward

__all__ = [
    "ALL_KINDS",
    "CellArch",
    "CellGene",
    "CellPlan",
    "Classifier",
    "ConvUnit",
    "DerivedCell",
    "GENOTYPE_VERSION",
    "Genotype",
    "GenotypeError",
    "LayerPlan",
    "MODES",
    "Network",
    "NetArch",
    "NetworkPlan",
    "NodeGene",
    "Operation",
    "OperationKind",
    "PlanError",
    "PrecisionPolicy",
    "RetainSpec",
    "Stem",
    "StemPlan",
    "SuperCell",
    "SuperNet",
    "backbone_genotype",
    "build_operation",
    "build_supercell",
    "check_retain",
    "derive",
    "derive_nodes",
    "instantiate",
    "plan_from_dict",
    "plan_to_dict",
    "resnet_plan",
    "set_alphas",
    "supercell_forward",
    "toy_plan",
]
