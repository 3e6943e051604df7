"""Binary-CNN architecture search with gated supercells, three-stage training
and an analytic memory/Flops cost model."""

__version__ = "0.1.0"
