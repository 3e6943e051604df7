"""Path weights, binary gates and the architecture-parameter gradient.

Each edge holds ``M`` real parameters ``alpha``.  A step draws one
categorical sample from ``p = softmax(alpha)`` and activates only that
operation.  The gradient w.r.t. the gates (non-zero only at the active
index) is pushed through the softmax Jacobian to give d(loss)/d(alpha).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def path_weights(alpha) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim != 1 or a.size < 1:
        raise ValueError(f"alpha must be a non-empty vector, got shape {a.shape}")
    z = np.exp(a - a.max())
    return z / z.sum()


@dataclass(frozen=True)
class GateSample:
    g: np.ndarray
    p: np.ndarray

    @property
    def index(self) -> int:
        return int(np.argmax(self.g))


def sample_gates(p, rng: np.random.Generator) -> GateSample:
    """One-hot draw of a single active operation with probabilities ``p``."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"gate probabilities must be a normalized vector, got sum {p.sum()}")
    u = rng.random()
    # inverse-CDF; clamp guards the cumulative sum falling short of 1
    idx = min(int(np.searchsorted(np.cumsum(p), u, side="right")), p.size - 1)
    while p[idx] == 0.0:
        idx -= 1
    g = np.zeros_like(p)
    g[idx] = 1.0
    return GateSample(g, p)


def gate_grad_to_alpha(grad_g, p) -> np.ndarray:
    """sum_j grad_g[j] * p[j] * (delta_ij - p[i]), a softmax Jacobian-vector product."""
    grad_g = np.asarray(grad_g, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if grad_g.shape != p.shape:
        raise ValueError(f"grad_g shape {grad_g.shape} != p shape {p.shape}")
    weighted = grad_g * p
    return weighted - p * weighted.sum()


@dataclass
class EdgeArch:
    """Architecture parameters of one edge plus its private gate stream."""

    alpha: np.ndarray
    rng: np.random.Generator = field(repr=False)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 1 or self.alpha.size < 1:
            raise ValueError("an edge needs at least one candidate operation")
        if not np.all(np.isfinite(self.alpha)):
            raise ValueError("alpha must be finite")

    @property
    def m(self) -> int:
        return self.alpha.size

    def probabilities(self) -> np.ndarray:
        return path_weights(self.alpha)

    def sample(self) -> GateSample:
        return sample_gates(self.probabilities(), self.rng)


def edge_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent stream per edge so draws don't depend on iteration order."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(key))))
