"""Momentum SGD and Adam.

The ``*_step`` functions update one array in place and are what the
optimizer classes loop over.  Weight decay is an L2 term added to the
gradient.  Parameters whose ``grad`` is ``None`` (not reached by the last
backward) are skipped, so operations inactive in a sampled step keep their
weights and optimizer state.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor


def _check_lr(lr: float) -> None:
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")


def sgd_momentum_step(
    param: np.ndarray,
    grad: np.ndarray,
    buf: Optional[np.ndarray],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> np.ndarray:
    """v <- momentum*v + (g + wd*w); w <- w - lr*v.  Returns the new buffer."""
    _check_lr(lr)
    d = grad + weight_decay * param if weight_decay else grad
    if momentum:
        buf = d.copy() if buf is None else momentum * buf + d
        d = buf
    param -= (lr * d).astype(param.dtype, copy=False)
    return buf


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """Bias-corrected Adam update of ``param`` with moment buffers ``m``, ``v``."""
    _check_lr(lr)
    if t < 1:
        raise ValueError(f"adam step count must be >= 1, got {t}")
    d = grad + weight_decay * param if weight_decay else grad
    m *= beta1
    m += (1.0 - beta1) * d
    v *= beta2
    v += (1.0 - beta2) * d * d
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(param.dtype, copy=False)


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        _check_lr(lr)
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: list[Optional[np.ndarray]] = [None] * len(self.params)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.buffers[i] = sgd_momentum_step(p.data, p.grad, self.buffers[i], self.lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {"kind": "sgd", "lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay}
        arrays = {f"buf.{i}": b for i, b in enumerate(self.buffers) if b is not None}
        return meta, arrays

    def load_state_dict(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        if meta.get("kind") != "sgd":
            raise ValueError(f"optimizer kind mismatch: {meta.get('kind')} != sgd")
        self.lr, self.momentum, self.weight_decay = meta["lr"], meta["momentum"], meta["weight_decay"]
        self.buffers = [arrays.get(f"buf.{i}") for i in range(len(self.params))]


class Adam:
    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        _check_lr(lr)
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = [0] * len(self.params)

    def step(self, grads: Optional[Sequence[Optional[np.ndarray]]] = None) -> None:
        """Update every parameter with a gradient; ``grads`` overrides ``p.grad``."""
        for i, p in enumerate(self.params):
            g = p.grad if grads is None else grads[i]
            if g is None:
                continue
            self.t[i] += 1
            adam_step(p.data, g, self.m[i], self.v[i], self.t[i], self.lr, *self.betas, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {
            "kind": "adam",
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "t": list(self.t),
        }
        arrays = {}
        for i in range(len(self.params)):
            arrays[f"m.{i}"] = self.m[i]
            arrays[f"v.{i}"] = self.v[i]
        return meta, arrays

    def load_state_dict(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        if meta.get("kind") != "adam":
            raise ValueError(f"optimizer kind mismatch: {meta.get('kind')} != adam")
        self.lr, self.eps, self.weight_decay = meta["lr"], meta["eps"], meta["weight_decay"]
        self.betas = tuple(meta["betas"])
        self.t = list(meta["t"])
        self.m = [arrays[f"m.{i}"].copy() for i in range(len(self.params))]
        self.v = [arrays[f"v.{i}"].copy() for i in range(len(self.params))]
