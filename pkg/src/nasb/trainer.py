"""Three-stage training: search (M_s), pretrain (M_p), finetune (M_f), plus evaluation."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .autograd import SGD, Adam, Tensor, backward, softmax_cross_entropy
from .autograd.layers import Module
from .cell import (
    Genotype,
    NetArch,
    Network,
    OperationKind,
    PrecisionPolicy,
    RetainSpec,
    SuperNet,
    instantiate,
    plan_from_dict,
    plan_to_dict,
)
from .cell.supercell import CellArch
from .checkpoint import Checkpoint
from .data import DatasetError, DatasetFile, augment, batches, split_halves
from .formats import PathLike, write_atomic
from .nasgate import gate_grad_to_alpha

STAGE_KEYS = {"search": 1, "pretrain": 2, "finetune": 3, "eval": 4}


# how the weight scaling coefficient is shared: one per output filter or one per tensor
SCALES = ("per-filter", "per-tensor")


class ArchitectureMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    arch_lr: float = 0.05
    arch_beta1: float = 0.5
    arch_beta2: float = 0.999
    arch_weight_decay: float = 0.0
    finetune_lr: float = 1e-3
    finetune_weight_decay: float = 0.0
    lr_schedule: str = "constant"
    seed: int = 0
    variant: str = "NASB"
    op_mask: Optional[list] = None
    policy: str = "keep1x1"
    scale: str = "per-filter"
    augment: bool = True
    flip: bool = True
    crop_pad: int = 2
    arch_updates: bool = True
    arch_warmup: int = 0
    max_batches: Optional[int] = None
    checkpoint_every: int = 0
    dtype: str = "float32"
    trace: bool = False
    search_data: Optional[str] = None
    train_data: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 0 or self.arch_warmup < 0:
            raise ValueError("epochs and arch_warmup must be >= 0")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be positive, got {self.batch_size}")
        if self.finetune_weight_decay != 0:
            raise ValueError("finetune weight decay must be 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}, got {self.scale!r}")
        PrecisionPolicy.named(self.policy)
        RetainSpec.for_variant(self.variant)
        self.op_kinds()

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def op_kinds(self) -> Optional[list[OperationKind]]:
        if self.op_mask is None:
            return None
        return [OperationKind.from_tag(t) if isinstance(t, str) else OperationKind(t) for t in self.op_mask]

    @property
    def per_filter(self) -> bool:
        return self.scale == "per-filter"

    def precision(self) -> PrecisionPolicy:
        return PrecisionPolicy.named(self.policy)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)

    def lr_at(self, base: float, epoch: int) -> float:
        if self.lr_schedule == "cosine" and self.epochs > 0:
            return base * 0.5 * (1 + math.cos(math.pi * epoch / self.epochs))
        return base


@dataclass
class StageLog:
    stage: str
    rows: list[dict] = field(default_factory=list)
    alpha: list[list[list[float]]] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)

    def record(self, epoch: int, split: str, loss: float, top1: float) -> None:
        if self.rows and epoch < self.rows[-1]["epoch"]:
            raise ValueError(f"epoch {epoch} recorded after epoch {self.rows[-1]['epoch']}")
        if not (math.isfinite(loss) and math.isfinite(top1)):
            raise FloatingPointError(f"{self.stage} epoch {epoch} {split}: non-finite loss {loss} or accuracy {top1}")
        self.rows.append({"epoch": epoch, "split": split, "loss": float(loss), "top1": float(top1)})

    def last(self, split: str) -> dict:
        return [r for r in self.rows if r["split"] == split][-1]

    def losses(self, split: str) -> list[float]:
        return [r["loss"] for r in self.rows if r["split"] == split]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "loss", "top1"])
        for r in self.rows:
            w.writerow([r["epoch"], r["split"], repr(r["loss"]), repr(r["top1"])])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "stage": self.stage,
            "epochs": len({r["epoch"] for r in self.rows}),
            "final": {s: self.last(s) for s in sorted({r["split"] for r in self.rows})},
            "alpha": self.alpha,
            "wall_clock_seconds": self.wall_clock,
        }

    def save(self, directory: PathLike, prefix: Optional[str] = None) -> None:
        d = Path(directory)
        prefix = prefix or self.stage
        write_atomic(d / f"{prefix}_log.csv", self.to_csv().encode())
        write_atomic(d / f"{prefix}_summary.json", (json.dumps(self.summary(), indent=2) + "\n").encode())


def stage_rng(seed: int, stage: str, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STAGE_KEYS[stage], stream)))


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _batch(ds: DatasetFile, idx, dtype) -> tuple[np.ndarray, np.ndarray]:
    return ds.images[idx].astype(dtype, copy=False), ds.labels[idx]


def _check_dataset(ds: DatasetFile, in_channels: int, num_classes: int) -> None:
    if len(ds) == 0:
        raise DatasetError("empty dataset")
    if ds.images.shape[1] != in_channels:
        raise DatasetError(f"dataset images have {ds.images.shape[1]} channels, model expects {in_channels}")
    if ds.num_classes > num_classes or (ds.labels.size and ds.labels.max() >= num_classes):
        raise DatasetError(f"dataset has {ds.num_classes} classes, model predicts {num_classes}")


def _param_checksum(params: Sequence[Tensor]) -> float:
    return float(sum(np.abs(p.data).sum(dtype=np.float64) for p in params))


# ----------------------------------------------------------------------------
# stage 1


def build_supernet(plan, cfg: TrainConfig) -> SuperNet:
    return SuperNet(plan, cfg.seed, op_kinds=cfg.op_kinds(), policy=cfg.precision(), dtype=cfg.np_dtype,
                    per_filter=cfg.per_filter)


def _gate_scalars(net: SuperNet, dtype) -> list[list[Tensor]]:
    return [[Tensor(np.ones((), dtype=dtype), requires_grad=True) for _ in cell.edges] for cell in net.cells]


EpochHook = Optional[Callable[..., None]]


def search_optimizers(supernet: SuperNet, cfg: TrainConfig) -> tuple[SGD, Adam]:
    """Momentum SGD over operation and backbone weights; Adam over the alphas."""
    wopt = SGD(supernet.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    alpha_params = [Tensor(a.alpha) for a in supernet.edge_archs()]  # shares memory with the edges
    aopt = Adam(alpha_params, cfg.arch_lr, (cfg.arch_beta1, cfg.arch_beta2), weight_decay=cfg.arch_weight_decay)
    return wopt, aopt


def search_stage(
    supernet: SuperNet,
    dataset: DatasetFile,
    cfg: TrainConfig,
    on_epoch: EpochHook = None,
    optimizers: Optional[tuple[SGD, Adam]] = None,
) -> tuple[list[np.ndarray], StageLog]:
    """Alternate alpha updates on validation batches with weight updates on training batches.

    ``on_epoch(epoch, supernet, (wopt, aopt))`` runs after each epoch is logged.
    Pass ``optimizers`` from :func:`search_optimizers` to keep their state.
    """
    plan = supernet.plan
    _check_dataset(dataset, plan.in_channels, plan.num_classes)
    train, val = split_halves(dataset, cfg.seed)
    dtype = cfg.np_dtype
    weights = supernet.parameters()
    archs = supernet.edge_archs()
    wopt, aopt = optimizers or search_optimizers(supernet, cfg)
    order_rng = stage_rng(cfg.seed, "search", 0)
    log = StageLog("search")
    supernet.train()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        wopt.lr = cfg.lr_at(cfg.lr, epoch)
        arch_on = cfg.arch_updates and epoch >= cfg.arch_warmup
        stats = {"train": [0.0, 0.0, 0], "val": [0.0, 0.0, 0]}
        train_batches = list(batches(len(train), cfg.batch_size, order_rng))
        val_batches = list(batches(len(val), cfg.batch_size, order_rng))
        steps = min(len(train_batches), len(val_batches))
        if cfg.max_batches is not None:
            steps = min(steps, cfg.max_batches)
        for t in range(steps):
            # (a) architecture step on a validation batch, weights frozen
            x, y = _batch(val, val_batches[t], dtype)
            gates = supernet.sample_gates()
            before = _param_checksum(weights) if cfg.trace else None
            if arch_on:
                scalars = _gate_scalars(supernet, dtype)
                logits = supernet(Tensor(x), gates, scalars)
                loss = softmax_cross_entropy(logits, y)
                flat = [s for row in scalars for s in row]
                backward(loss, wrt=flat)
                supernet.zero_grad()
                grads = []
                for g_sample, s in zip((g for row in gates for g in row), flat):
                    grad_g = np.zeros_like(g_sample.p)
                    grad_g[g_sample.index] = 0.0 if s.grad is None else float(s.grad)
                    grads.append(gate_grad_to_alpha(grad_g, g_sample.p))
                aopt.step(grads)
            else:
                logits = supernet(Tensor(x), gates)
                loss = softmax_cross_entropy(logits, y)
            _accumulate_stats(stats["val"], loss, logits, y)
            if cfg.trace:
                log.trace.append({"epoch": epoch, "step": t, "phase": "arch", "weights_changed": _param_checksum(weights) != before})

            # (b) weight step on a training batch, alpha frozen
            x, y = _batch(train, train_batches[t], dtype)
            alpha_before = [a.alpha.copy() for a in archs] if cfg.trace else None
            gates = supernet.sample_gates()
            logits = supernet(Tensor(x), gates)
            loss = softmax_cross_entropy(logits, y)
            supernet.zero_grad()
            backward(loss)
            wopt.step()
            _accumulate_stats(stats["train"], loss, logits, y)
            if cfg.trace:
                changed = any(not np.array_equal(a.alpha, b) for a, b in zip(archs, alpha_before))
                log.trace.append({"epoch": epoch, "step": t, "phase": "weight", "alpha_changed": changed})
        for split in ("train", "val"):
            log.record(epoch, split, *_finish_stats(stats[split]))
        log.alpha.append([a.alpha.tolist() for a in archs])
        log.wall_clock.append(time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(epoch, supernet, (wopt, aopt))
    return [a.alpha.copy() for a in archs], log


def _accumulate_stats(acc, loss: Tensor, logits: Tensor, y) -> None:
    n = len(y)
    acc[0] += float(loss.data) * n
    acc[1] += _accuracy(logits.data, y) * n
    acc[2] += n


def _finish_stats(acc) -> tuple[float, float]:
    if acc[2] == 0:
        return float("nan"), float("nan")
    return acc[0] / acc[2], acc[1] / acc[2]


# ----------------------------------------------------------------------------
# stages 2 and 3


def _fit(model: Module, opt, dataset: DatasetFile, cfg: TrainConfig, stage: str, base_lr: float, on_epoch: EpochHook) -> StageLog:
    dtype = cfg.np_dtype
    order_rng = stage_rng(cfg.seed, stage, 0)
    aug_rng = stage_rng(cfg.seed, stage, 1)
    log = StageLog(stage)
    model.train()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        opt.lr = cfg.lr_at(base_lr, epoch)
        stats = [0.0, 0.0, 0]
        for t, idx in enumerate(batches(len(dataset), cfg.batch_size, order_rng)):
            if cfg.max_batches is not None and t >= cfg.max_batches:
                break
            x, y = _batch(dataset, idx, dtype)
            if cfg.augment:
                x = augment(x, aug_rng, cfg.crop_pad, cfg.flip)
            logits = model(Tensor(x))
            loss = softmax_cross_entropy(logits, y)
            model.zero_grad()
            backward(loss)
            opt.step()
            _accumulate_stats(stats, loss, logits, y)
        log.record(epoch, "train", *_finish_stats(stats))
        log.wall_clock.append(time.perf_counter() - t0)
        if on_epoch is not None:
            model.eval()
            on_epoch(epoch, model, opt)
            model.train()
    model.eval()
    return log


def pretrain_stage(
    genotype: Genotype, dataset: DatasetFile, cfg: TrainConfig, on_epoch: EpochHook = None
) -> tuple[Network, StageLog, SGD]:
    """Train the full-precision derived model M_p from its seeded initialization."""
    model = instantiate(genotype, "full", cfg.precision(), seed=cfg.seed, dtype=cfg.np_dtype)
    _check_dataset(dataset, genotype.in_channels, genotype.num_classes)
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    log = _fit(model, opt, dataset, cfg, "pretrain", cfg.lr, on_epoch)
    return model, log, opt


def binarize_from(source: Union[Network, Checkpoint], cfg: TrainConfig, genotype: Optional[Genotype] = None) -> Network:
    """M_f with latent weights and BN statistics copied from M_p."""
    if isinstance(source, Checkpoint):
        if source.genotype is None:
            raise ArchitectureMismatch("checkpoint carries no genotype")
        ckpt_geno = Genotype.from_dict(source.genotype)
        if genotype is not None and genotype.to_json() != ckpt_geno.to_json():
            raise ArchitectureMismatch("checkpoint genotype differs from the requested genotype")
        genotype = ckpt_geno
        policy = PrecisionPolicy.named(source.meta.get("policy", cfg.policy))
        state = source.with_prefix("model")
    else:
        if genotype is not None and genotype.to_json() != source.genotype.to_json():
            raise ArchitectureMismatch("model genotype differs from the requested genotype")
        genotype = source.genotype
        policy = source.policy
        state = source.state_dict()
    model = instantiate(genotype, "binary", policy, seed=cfg.seed, dtype=cfg.np_dtype, per_filter=cfg.per_filter)
    try:
        model.load_state_dict(state, strict=True)
    except (KeyError, ValueError) as e:
        raise ArchitectureMismatch(f"checkpoint does not fit the genotype: {e}") from None
    return model


def finetune_stage(
    source: Union[Network, Checkpoint],
    dataset: DatasetFile,
    cfg: TrainConfig,
    genotype: Optional[Genotype] = None,
    on_epoch: EpochHook = None,
) -> tuple[Network, StageLog, Adam]:
    """Binarize M_p and train the latent weights with Adam (no weight decay)."""
    model = binarize_from(source, cfg, genotype)
    _check_dataset(dataset, model.genotype.in_channels, model.genotype.num_classes)
    opt = Adam(model.parameters(), cfg.finetune_lr, weight_decay=cfg.finetune_weight_decay)
    log = _fit(model, opt, dataset, cfg, "finetune", cfg.finetune_lr, on_epoch)
    return model, log, opt


def evaluate(
    model: Callable[[Tensor], Tensor], dataset: DatasetFile, topk: int = 5, batch_size: int = 256, dtype=np.float32
) -> tuple[float, float]:
    """(top-1, top-k) accuracy on unaugmented images; ties go to the lower class index."""
    if isinstance(model, Module):
        model.eval()
    hit1 = hitk = 0
    for idx in batches(len(dataset), batch_size, None):
        x, y = _batch(dataset, idx, dtype)
        logits = model(Tensor(x)).data
        k = logits.shape[1]
        if y.size and (y.min() < 0 or y.max() >= k):
            raise ValueError(f"label out of range [0, {k})")
        order = np.argsort(-logits, axis=1, kind="stable")
        hit1 += int(np.sum(order[:, 0] == y))
        hitk += int(np.sum(np.any(order[:, : min(topk, k)] == y[:, None], axis=1)))
    n = max(len(dataset), 1)
    return hit1 / n, hitk / n


# ----------------------------------------------------------------------------
# checkpoints


def _rng_states(net: SuperNet) -> dict:
    return {"gates": [a.rng.bit_generator.state for a in net.edge_archs()]}


def _optimizer_state(named: dict, tensors: dict) -> dict:
    out = {}
    for group, opt in named.items():
        if opt is None:
            continue
        meta, arrays = opt.state_dict()
        out[group] = meta
        tensors.update({f"optim/{group}/{k}": v for k, v in arrays.items()})
    return out


def search_checkpoint(net: SuperNet, cfg: TrainConfig, optimizers: Optional[tuple[SGD, Adam]] = None) -> Checkpoint:
    tensors = {f"model/{k}": v for k, v in net.state_dict().items()}
    for e, a in enumerate(net.edge_archs()):
        tensors[f"arch/{e}"] = a.alpha
    wopt, aopt = optimizers or (None, None)
    optimizer = _optimizer_state({"weights": wopt, "arch": aopt}, tensors)
    meta = {
        "stage": "search",
        "plan": plan_to_dict(net.plan),
        "op_kinds": [k.tag for k in net.cells[0].kinds],
        "policy": cfg.policy,
        "config": cfg.to_dict(),
    }
    return Checkpoint(meta, tensors, None, optimizer, _rng_states(net))


def arch_from_checkpoint(ckpt: Checkpoint) -> NetArch:
    if ckpt.meta.get("stage") != "search":
        raise ValueError(f"expected a search checkpoint, got stage {ckpt.meta.get('stage')!r}")
    plan = plan_from_dict(ckpt.meta["plan"])
    kinds = tuple(OperationKind.from_tag(t) for t in ckpt.meta["op_kinds"])
    arch = ckpt.with_prefix("arch")
    cells, e = [], 0
    for cell in plan.cells:
        n_edges = len(cell.edges())
        alphas = [np.asarray(arch[str(e + k)], dtype=np.float64) for k in range(n_edges)]
        cells.append(CellArch(cell, kinds, alphas))
        e += n_edges
    if e != len(arch):
        raise ArchitectureMismatch(f"checkpoint has {len(arch)} alpha vectors, plan needs {e}")
    return NetArch(plan, cells)


def model_checkpoint(model: Network, stage: str, cfg: TrainConfig, opt=None) -> Checkpoint:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    optimizer = _optimizer_state({"weights": opt}, tensors)
    meta = {"stage": stage, "mode": model.mode, "policy": _policy_name(model.policy),
            "scale": SCALES[not model.per_filter], "config": cfg.to_dict()}
    return Checkpoint(meta, tensors, model.genotype.to_dict(), optimizer, {})


def _policy_name(policy: PrecisionPolicy) -> str:
    for name in PrecisionPolicy.NAMES:
        if PrecisionPolicy.named(name) == policy:
            return name
    raise ValueError(f"policy {policy} has no name")


def model_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> Network:
    if ckpt.genotype is None or "mode" not in ckpt.meta:
        raise ValueError("checkpoint does not hold a derived model")
    geno = Genotype.from_dict(ckpt.genotype)
    per_filter = ckpt.meta.get("scale", SCALES[0]) == SCALES[0]
    model = instantiate(geno, ckpt.meta["mode"], PrecisionPolicy.named(ckpt.meta["policy"]), dtype=dtype,
                        per_filter=per_filter)
    model.load_state_dict(ckpt.with_prefix("model"), strict=True)
    model.eval()
    return model
