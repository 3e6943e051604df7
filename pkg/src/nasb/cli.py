"""``nasb`` command line: gen-data, search, derive, pretrain, finetune, eval, cost.

Every subcommand accepts ``--config run.json``: a flat JSON object whose keys
are the subcommand's long option names with dashes replaced by underscores.
Flags given on the command line override the file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .cell import Genotype, GenotypeError, PrecisionPolicy, RetainSpec, derive, resnet_plan, toy_plan
from .checkpoint import load_checkpoint, save_checkpoint
from .costmodel import PRESETS, model_cost
from .data import gen_synthetic, load_dataset_dir, save_dataset
from .formats import FormatError, write_atomic
from .trainer import (
    TrainConfig,
    arch_from_checkpoint,
    build_supernet,
    evaluate,
    finetune_stage,
    model_checkpoint,
    model_from_checkpoint,
    pretrain_stage,
    search_checkpoint,
    search_optimizers,
    search_stage,
)

PROG = "nasb"


class CliError(Exception):
    pass


# options shared by the training subcommands, mapped onto TrainConfig fields
_TRAIN_OPTS = {
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "momentum": float,
    "weight_decay": float,
    "arch_lr": float,
    "arch_warmup": int,
    "finetune_lr": float,
    "lr_schedule": str,
    "seed": int,
    "policy": str,
    "scale": str,
    "max_batches": int,
    "checkpoint_every": int,
    "dtype": str,
}


def _add_train_opts(p: argparse.ArgumentParser, names: Sequence[str]) -> None:
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=_TRAIN_OPTS[name], default=None)


def _flag(p, name, **kw):
    p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="JSON run configuration; flags override it")
        return p

    p = command("gen-data", "write a synthetic class-conditional dataset (images.ntsr, labels.nlbl, meta.json)")
    _flag(p, "out", help="output directory")
    _flag(p, "classes", type=int)
    _flag(p, "samples", type=int)
    _flag(p, "size", type=int)
    _flag(p, "difficulty", choices=["trivial", "easy", "hard"])
    _flag(p, "channels", type=int)
    _flag(p, "seed", type=int)

    p = command("search", "stage 1: train a supernet and its architecture parameters on dataset D")
    _flag(p, "data", help="dataset directory (D)")
    _flag(p, "out", help="search checkpoint to write")
    _flag(p, "arch", choices=["toy", "resnet18", "resnet34", "resnet50"], help="supernet backbone")
    _flag(p, "width", type=int)
    _flag(p, "nodes", type=int)
    _flag(p, "cells", type=int)
    _flag(p, "op_mask", help="comma-separated operation tags, e.g. Zero,Identity,MaxPool3,Conv3")
    _flag(p, "no_arch_updates", action="store_const", const=True)
    _add_train_opts(p, ["epochs", "batch_size", "lr", "momentum", "weight_decay", "arch_lr", "arch_warmup", "lr_schedule",
                        "seed", "policy", "max_batches", "checkpoint_every", "dtype"])

    p = command("derive", "derive a genotype JSON from a search checkpoint")
    _flag(p, "in", help="search checkpoint")
    _flag(p, "variant", help="NASB, V1 .. V5")
    _flag(p, "out", help="genotype JSON to write")

    p = command("pretrain", "stage 2: train the full-precision derived model M_p on dataset D'")
    _flag(p, "genotype", help="genotype JSON")
    _flag(p, "data", help="dataset directory (D')")
    _flag(p, "out", help="checkpoint to write")
    _flag(p, "no_augment", action="store_const", const=True)
    _add_train_opts(p, ["epochs", "batch_size", "lr", "momentum", "weight_decay", "lr_schedule", "seed", "policy",
                        "max_batches", "checkpoint_every", "dtype"])

    p = command("finetune", "stage 3: binarize M_p and finetune it into M_f on dataset D'")
    _flag(p, "in", help="pretrain checkpoint")
    _flag(p, "genotype", help="optional genotype JSON the checkpoint must match")
    _flag(p, "data", help="dataset directory (D')")
    _flag(p, "out", help="checkpoint to write")
    _flag(p, "no_augment", action="store_const", const=True)
    _add_train_opts(p, ["epochs", "batch_size", "finetune_lr", "lr_schedule", "seed", "scale", "max_batches",
                        "checkpoint_every", "dtype"])

    p = command("eval", "single-crop top-1/top-k accuracy of a model checkpoint")
    _flag(p, "in", help="pretrain or finetune checkpoint")
    _flag(p, "data", help="dataset directory")
    _flag(p, "topk", type=int)
    _flag(p, "out", help="optional JSON result file")

    p = command("cost", "memory and Flops of a preset or genotype")
    _flag(p, "arch", help=f"preset ({', '.join(PRESETS)}) or genotype JSON path")
    _flag(p, "input_size", type=int)
    _flag(p, "policy", choices=list(PrecisionPolicy.NAMES))
    _flag(p, "d", type=int, help="bitwise cost of one real multiply")
    _flag(p, "divisor", type=float, help="bitwise ops per Flop")
    _flag(p, "no_scale_ops", action="store_const", const=True)
    _flag(p, "out", help="optional JSON report file")
    return parser


DEFAULTS = {
    "gen-data": {"classes": 2, "samples": 2000, "size": 16, "difficulty": "easy", "channels": 1, "seed": 0},
    "search": {"arch": "toy", "width": 8, "nodes": 2, "cells": 1, "no_arch_updates": False},
    "derive": {"variant": "NASB"},
    "pretrain": {"no_augment": False},
    "finetune": {"no_augment": False},
    "eval": {"topk": 5},
    "cost": {"input_size": 224, "d": 32, "divisor": 128.0, "no_scale_ops": False},
}
REQUIRED = {
    "gen-data": ["out"],
    "search": ["data", "out"],
    "derive": ["in", "out"],
    "pretrain": ["genotype", "data", "out"],
    "finetune": ["in", "data", "out"],
    "eval": ["in", "data"],
    "cost": ["arch"],
}
INPUT_PATHS = {"search": ["data"], "derive": ["in"], "pretrain": ["genotype", "data"], "finetune": ["in", "data", "genotype"],
               "eval": ["in", "data"]}


def resolve(args: argparse.Namespace) -> dict:
    """Merge built-in defaults, the config file and command-line flags (in rising priority)."""
    opts = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    merged = {k: None for k in opts}
    merged.update(DEFAULTS[args.command])
    if args.config:
        try:
            file_opts = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(file_opts, dict):
            raise CliError(f"config {args.config} must hold a JSON object")
        unknown = sorted(set(file_opts) - set(opts))
        if unknown:
            raise CliError(f"config {args.config}: unknown keys for {args.command}: {', '.join(unknown)}")
        merged.update(file_opts)
    merged.update({k: v for k, v in opts.items() if v is not None})
    missing = [k for k in REQUIRED[args.command] if merged.get(k) is None]
    if missing:
        raise CliError(f"{args.command}: missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    for key in INPUT_PATHS.get(args.command, []):
        if merged.get(key) is not None and not Path(merged[key]).exists():
            raise CliError(f"{key} path does not exist: {merged[key]}")
    return merged


def train_config(opts: dict, **extra) -> TrainConfig:
    kw = {k: opts[k] for k in _TRAIN_OPTS if opts.get(k) is not None}
    kw.update(extra)
    return TrainConfig(**kw)


def _checkpointer(out: Path, cfg: TrainConfig, make):
    """Epoch hook writing ``<out>.epochN<suffix>`` every ``checkpoint_every`` epochs."""
    if cfg.checkpoint_every <= 0:
        return None

    def hook(epoch: int, model, opt) -> None:
        if (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 < cfg.epochs:
            save_checkpoint(out.with_name(f"{out.stem}.epoch{epoch + 1}{out.suffix}"), make(model, opt))

    return hook


def _write_json(path, obj) -> None:
    write_atomic(path, (json.dumps(obj, indent=2) + "\n").encode())


def cmd_gen_data(o: dict) -> None:
    ds = gen_synthetic(o["classes"], o["samples"], o["size"], o["difficulty"], o["seed"], o["channels"])
    paths = save_dataset(ds, o["out"])
    print(f"wrote {len(ds)} samples to {paths['images'].parent}")


def _search_plan(o: dict, in_channels: int, num_classes: int):
    if o["arch"] == "toy":
        return toy_plan(in_channels, o["width"], o["nodes"], o["cells"], num_classes)
    return resnet_plan(int(o["arch"][len("resnet"):]), num_classes, in_channels)


def cmd_search(o: dict) -> None:
    mask = o["op_mask"]
    if isinstance(mask, str):
        mask = [t.strip() for t in mask.split(",") if t.strip()]
    cfg = train_config(o, op_mask=mask, arch_updates=not o["no_arch_updates"], search_data=str(o["data"]))
    ds = load_dataset_dir(o["data"])
    net = build_supernet(_search_plan(o, ds.image_shape[0], ds.num_classes), cfg)
    optimizers = search_optimizers(net, cfg)
    out = Path(o["out"])
    hook = _checkpointer(out, cfg, lambda model, opts: search_checkpoint(model, cfg, opts))
    _, log = search_stage(net, ds, cfg, hook, optimizers)
    save_checkpoint(out, search_checkpoint(net, cfg, optimizers))
    log.save(out.parent, out.stem)
    final = log.last("val")
    print(f"search: {cfg.epochs} epochs, val loss {final['loss']:.4f} top1 {final['top1']:.4f} -> {out}")


def cmd_derive(o: dict) -> None:
    arch = arch_from_checkpoint(load_checkpoint(o["in"]))
    geno = derive(arch, RetainSpec.for_variant(o["variant"]))
    write_atomic(o["out"], geno.to_json().encode())
    print(f"derived {geno.variant} genotype with {sum(geno.op_counts().values())} ops -> {o['out']}")


def _train_stage(o: dict, stage: str) -> None:
    augment = not o["no_augment"]
    out = Path(o["out"])
    if stage == "pretrain":
        cfg = train_config(o, augment=augment, train_data=str(o["data"]))
        geno = Genotype.from_json(Path(o["genotype"]).read_text())
        hook = _checkpointer(out, cfg, lambda model, opt: model_checkpoint(model, stage, cfg, opt))
        model, log, opt = pretrain_stage(geno, load_dataset_dir(o["data"]), cfg, hook)
    else:
        ckpt = load_checkpoint(o["in"])
        policy = ckpt.meta.get("policy")
        cfg = train_config(o, augment=augment, train_data=str(o["data"]), **({"policy": policy} if policy else {}))
        geno = Genotype.from_json(Path(o["genotype"]).read_text()) if o.get("genotype") else None
        hook = _checkpointer(out, cfg, lambda model, opt: model_checkpoint(model, stage, cfg, opt))
        model, log, opt = finetune_stage(ckpt, load_dataset_dir(o["data"]), cfg, geno, hook)
    save_checkpoint(out, model_checkpoint(model, stage, cfg, opt))
    log.save(out.parent, out.stem)
    if log.rows:
        final = log.last("train")
        print(f"{stage}: {cfg.epochs} epochs, train loss {final['loss']:.4f} top1 {final['top1']:.4f} -> {out}")
    else:
        print(f"{stage}: 0 epochs -> {out}")


def cmd_eval(o: dict) -> None:
    ckpt = load_checkpoint(o["in"])
    dtype = ckpt.meta.get("config", {}).get("dtype", "float32")
    model = model_from_checkpoint(ckpt, dtype=dtype)
    ds = load_dataset_dir(o["data"])
    top1, topk = evaluate(model, ds, o["topk"], dtype=dtype)
    result = {"checkpoint": str(o["in"]), "samples": len(ds), "top1": top1, f"top{o['topk']}": topk}
    print(json.dumps(result))
    if o.get("out"):
        _write_json(o["out"], result)


def cmd_cost(o: dict) -> None:
    arch = o["arch"]
    policy = PrecisionPolicy.named(o["policy"]) if o.get("policy") else None
    if arch in PRESETS:
        desc, name = arch, arch
    else:
        path = Path(arch)
        if not path.exists():
            raise CliError(f"unknown architecture {arch!r}: not a preset ({', '.join(PRESETS)}) and no such file")
        desc, name = Genotype.from_json(path.read_text()), path.stem
    report = model_cost(desc, o["input_size"], policy, o["d"], o["divisor"], not o["no_scale_ops"], name)
    print(report.table())
    print(report.to_json(), end="")
    if o.get("out"):
        write_atomic(o["out"], report.to_json().encode())


COMMANDS = {
    "gen-data": cmd_gen_data,
    "search": cmd_search,
    "derive": cmd_derive,
    "pretrain": lambda o: _train_stage(o, "pretrain"),
    "finetune": lambda o: _train_stage(o, "finetune"),
    "eval": cmd_eval,
    "cost": cmd_cost,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on unknown commands or flags
    try:
        COMMANDS[args.command](resolve(args))
    except (CliError, FormatError, GenotypeError, ValueError, KeyError, OSError) as e:
        text = str(e.args[0]) if isinstance(e, KeyError) and e.args else str(e)
        msg = text.splitlines()[0] if text else type(e).__name__
        print(f"{PROG} {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
