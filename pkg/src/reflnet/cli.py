"""Command-line entry point: ``reflnet <subcommand> ...``.

Every subcommand accepts ``--config FILE`` plus one flag per config key
(``--region-size 100``, ``--plain-block`` ...); flags override the file.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import datagen
from ._io import read_text, write_text_atomic
from .errors import ConfigError, FileFormatError, NumericError
from .metrics import format_report
from .pipeline import (
    LossReport,
    RunConfig,
    coerce_value,
    evaluate,
    infer_scene,
    parse_config_text,
    prepare_scene,
    pretrain,
    scene_partition,
    train_joint,
)
from .pointcloud import load_pcd
from .rdm import attention_flops, write_attention_dump
from .backbone import backbone_forward, infer_backbone_config
from .ssre import save_partition
from .tensor import load_checkpoint, save_checkpoint

log = logging.getLogger("reflnet")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


# -- config handling -------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    group = p.add_argument_group("config overrides")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in (bool, "bool"):
            group.add_argument(flag, dest=f.name, action="store_true", default=None)
        else:
            group.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None) is not None:
        cfg = parse_config_text(read_text(args.config), cfg)
    changes = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            changes[f.name] = coerce_value(f.name, value)
    cfg = cfg.replace(**changes)
    return cfg


def _load_scenes(manifest: Path, split: str, cfg: RunConfig):
    return [prepare_scene(load_pcd(path), cfg) for path, _, _ in datagen.read_manifest(manifest, split)]


def _format_losses(reports: List[LossReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "epoch", "loss", "val_miou"])
    for r in reports:
        w.writerow([r.stage, r.epoch, f"{r.loss:.17g}", "" if np.isnan(r.val_miou) else f"{r.val_miou:.17g}"])
    return buf.getvalue()


def _require_stage1(path: Optional[Path]):
    if path is None:
        raise ConfigError("train-joint needs a stage-1 checkpoint (--checkpoint)")
    params = load_checkpoint(path)
    infer_backbone_config(params)
    return params


# -- subcommands ------------------------------------------------------------------

def cmd_gen(args) -> int:
    overrides = {}
    if args.density is not None:
        overrides["density"] = args.density
    manifest = datagen.generate_dataset(args.out, args.train, args.val, args.seed, **overrides)
    print(manifest)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    train = _load_scenes(args.manifest, "train", cfg)
    val = _load_scenes(args.manifest, "val", cfg) if args.with_val else []
    params, reports = pretrain(cfg, train, val)
    save_checkpoint(params, args.out)
    if args.report:
        write_text_atomic(args.report, _format_losses(reports))
    for r in reports:
        print(f"initial epoch {r.epoch} loss {r.loss:.6f} val_miou {r.val_miou:.4f}")
    return EXIT_OK


def cmd_train_joint(args) -> int:
    cfg = load_config(args)
    params = _require_stage1(args.checkpoint)
    train = _load_scenes(args.manifest, "train", cfg)
    val = _load_scenes(args.manifest, "val", cfg) if args.with_val else []
    params, reports = train_joint(cfg, params, train, val)
    save_checkpoint(params, args.out)
    if args.report:
        write_text_atomic(args.report, _format_losses(reports))
    for r in reports:
        print(f"refined epoch {r.epoch} loss {r.loss:.6f} val_miou {r.val_miou:.4f}")
    return EXIT_OK


def cmd_extract_regions(args) -> int:
    cfg = load_config(args)
    params = load_checkpoint(args.checkpoint)
    scene = prepare_scene(load_pcd(args.scene), cfg)
    out = backbone_forward(scene.cloud, scene.nn, params)
    part = scene_partition(cfg, scene, out.logits)
    save_partition(part, args.regions, args.centers)
    print(f"M {part.num_regions}")
    for c in range(len(part.group_sizes)):
        if part.group_sizes[c]:
            print(f"class {c} N_k {part.group_sizes[c]} M_k {part.group_region_counts[c]}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    params = load_checkpoint(args.checkpoint)
    scenes = _load_scenes(args.manifest, args.split, cfg)
    joint = args.mode == "joint"
    per_scene: list = []
    agg = evaluate(cfg, params, scenes, joint, per_scene)
    args.out.mkdir(parents=True, exist_ok=True)
    names = datagen.CLASS_NAMES if cfg.num_classes == len(datagen.CLASS_NAMES) else None
    for scene, report in zip(scenes, per_scene):
        write_text_atomic(args.out / f"{scene.raw.scene_id}.csv", format_report(report, names))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k, v in agg.items():
        w.writerow([k, f"{v:.9g}"])
    write_text_atomic(args.out / "aggregate.csv", buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = load_config(args)
    params = load_checkpoint(args.checkpoint)
    scene = prepare_scene(load_pcd(args.scene), cfg)
    res = infer_scene(cfg, params, scene, joint=args.mode == "joint")
    write_text_atomic(args.out, "".join(f"{int(v)}\n" for v in res.pred))
    return EXIT_OK


def cmd_attn_dump(args) -> int:
    cfg = load_config(args)
    params = load_checkpoint(args.checkpoint)
    scene = prepare_scene(load_pcd(args.scene), cfg)
    res = infer_scene(cfg, params, scene, joint=True)
    args.out.mkdir(parents=True, exist_ok=True)
    files = write_attention_dump(args.out, res.rdm)
    print(f"M {res.partition.num_regions} files {len(files)}")
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = load_config(args)
    if not args.m:
        raise ConfigError("flops needs at least one M")
    bins = cfg.rdm().num_bins
    lines = ["M,flops"] + [f"{m},{attention_flops(m, cfg.d, cfg.heads, cfg.layers, cfg.plain_block, bins)}"
                           for m in args.m]
    text = "\n".join(lines) + "\n"
    if args.out:
        write_text_atomic(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reflnet", description="Region-enhanced point cloud segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--train", type=int, default=24)
    p.add_argument("--val", type=int, default=8)
    p.add_argument("--seed", type=int, default=1000)
    p.add_argument("--density", type=float, default=None, help="points per square meter")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="stage 1: backbone on initial predictions")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--report", type=Path)
    p.add_argument("--with-val", action="store_true", help="evaluate the val split each epoch")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-joint", help="stage 2: backbone + region attention")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, help="stage-1 checkpoint")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--report", type=Path)
    p.add_argument("--with-val", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_joint)

    p = sub.add_parser("extract-regions", help="write the region partition of one scene")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--regions", type=Path, required=True)
    p.add_argument("--centers", type=Path)
    _add_config_flags(p)
    p.set_defaults(func=cmd_extract_regions)

    for name, func, help_text in (("eval", cmd_eval, "evaluate a checkpoint on a split"),
                                  ("infer", cmd_infer, "write per-point predictions")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", type=Path, required=True)
        mode = p.add_mutually_exclusive_group()
        mode.add_argument("--backbone-only", dest="mode", action="store_const", const="backbone")
        mode.add_argument("--joint", dest="mode", action="store_const", const="joint")
        p.set_defaults(mode="joint")
        if name == "eval":
            p.add_argument("--manifest", type=Path, required=True)
            p.add_argument("--split", default="val")
            p.add_argument("--out", type=Path, required=True, help="output directory")
        else:
            p.add_argument("--scene", type=Path, required=True)
            p.add_argument("--out", type=Path, required=True)
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("attn-dump", help="dump attention maps of one scene")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_attn_dump)

    p = sub.add_parser("flops", help="attention cost per region count")
    p.add_argument("--m", type=int, nargs="+", required=True)
    p.add_argument("--out", type=Path)
    _add_config_flags(p)
    p.set_defaults(func=cmd_flops)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, ArithmeticError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
