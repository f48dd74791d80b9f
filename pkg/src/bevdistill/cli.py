"""Command line entry point: ``bevdistill <command> --config run.json --out dir``.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import Checkpoint
from .config import ConfigError, DataConfig, load_config
from .dataset import TRAIN, VAL, load_dataset, synthetic_split
from .gradcheck import format_report, run_gradcheck
from .losses import write_iou_csv
from .maps import export_maps
from .models import prepare_scene
from .pointcloud import (
    DataFormatError,
    LabelRemap,
    LabelSet,
    default_scene_spec,
    read_labels,
    read_point_cloud_bin,
    remap_labels,
    write_labels,
    write_point_cloud_bin,
)
from .train import evaluate, predict_points, pretrain_teacher, train_student, write_metrics_csv, model_from_checkpoint

log = logging.getLogger("bevdistill")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def _base_dir(args):
    return Path(args.config).resolve().parent if args.config else Path.cwd()


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth_data(args, cfg):
    out = _out(args)
    spec = default_scene_spec(cfg.data.class_counts)
    entries = {}
    for split, name, count in ((TRAIN, "train", cfg.data.train_scenes), (VAL, "val", cfg.data.val_scenes)):
        (out / name).mkdir(exist_ok=True)
        entries[name] = []
        for k, (pc, labels) in enumerate(synthetic_split(cfg, split, count)):
            scan, label = f"{name}/{k:06d}.bin", f"{name}/{k:06d}.label"
            write_point_cloud_bin(out / scan, pc)
            write_labels(out / label, labels)
            entries[name].append({"scan": scan, "label": label})
    remap = LabelRemap.identity(len(spec))
    remap.class_names = [c.name for c in spec]
    (out / "remap.json").write_text(json.dumps(remap.to_json(), indent=2))
    file_cfg = replace(
        cfg,
        data=DataConfig(source="files", train=tuple(entries["train"]), val=tuple(entries["val"]), remap="remap.json"),
    )
    (out / "config.json").write_text(file_cfg.dumps())
    print(f"wrote {len(entries['train'])} train and {len(entries['val'])} val scans to {out}")
    return EXIT_OK


def cmd_pretrain_teacher(args, cfg):
    data = load_dataset(cfg, _base_dir(args))
    ckpt = pretrain_teacher(cfg, data, steps=args.steps)
    path = _out(args) / "teacher.ckpt"
    ckpt.save(path)
    report = evaluate(ckpt, data.val or data.train)
    print(f"teacher saved to {path}; validation mIoU {report.miou:.4f}")
    return EXIT_OK


def cmd_train_student(args, cfg):
    data = load_dataset(cfg, _base_dir(args))
    teacher = Checkpoint.load(args.teacher)
    result = train_student(cfg, teacher, data)
    out = _out(args)
    result.checkpoint.save(out / "student.ckpt")
    write_metrics_csv(out / "metrics.csv", result.metrics)
    with open(out / "alignment.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "row_cosine"])
        for epoch, value in enumerate(result.alignment):
            w.writerow([epoch, repr(value)])
    if data.val:
        print(f"student validation mIoU {evaluate(result.checkpoint, data.val).miou:.4f}")
    print(f"student saved to {out / 'student.ckpt'}")
    return EXIT_OK


def cmd_evaluate(args, cfg):
    data = load_dataset(cfg, _base_dir(args))
    ckpt = Checkpoint.load(args.checkpoint)
    scenes = data.val if args.split == "val" else data.train
    report = evaluate(ckpt, scenes)
    path = _out(args) / f"eval_{ckpt.role}_{args.split}.csv"
    write_iou_csv(path, report.iou, report.miou, report.class_names)
    for name, value in report.rows():
        print(f"{name:<16} {value:.4f}")
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    results = run_gradcheck(cfg, seed=cfg.seed)
    text = format_report(results)
    print(text)
    if args.out:
        (_out(args) / "gradcheck.txt").write_text(text + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_export_maps(args, cfg):
    base = _base_dir(args)
    if args.scan:
        pc = read_point_cloud_bin(args.scan)
        if args.label:
            raw = read_labels(args.label)
            remap = LabelRemap.load(base / cfg.data.remap) if cfg.data.remap else None
            labels = remap_labels(raw, remap) if remap else raw
        else:
            labels = LabelSet([255] * len(pc))
        num_classes = LabelRemap.load(base / cfg.data.remap).num_classes if cfg.data.remap else 4
    else:
        pc, labels = synthetic_split(cfg, VAL, 1)[0]
        num_classes = len(default_scene_spec(cfg.data.class_counts))
    scene = prepare_scene(pc, labels, cfg.grid, num_classes)
    predictions = None
    if args.checkpoint and labels.valid.any():
        predictions = predict_points(model_from_checkpoint(Checkpoint.load(args.checkpoint)), scene)
    for path in export_maps(scene, _out(args), predictions):
        print(path)
    return EXIT_OK


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain-teacher": cmd_pretrain_teacher,
    "train-student": cmd_train_student,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "export-maps": cmd_export_maps,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="bevdistill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="runs", help="output directory")
        if name == "pretrain-teacher":
            p.add_argument("--steps", type=int, help="stop after this many optimizer steps")
        if name == "train-student":
            p.add_argument("--teacher", required=True, help="teacher checkpoint")
        if name == "evaluate":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--split", choices=("val", "train"), default="val")
        if name == "export-maps":
            p.add_argument("--scan", help=".bin scan (default: first synthetic validation scene)")
            p.add_argument("--label", help=".label file for the error map")
            p.add_argument("--checkpoint", help="model used for the error map")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, DataFormatError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - the exit code is the contract
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
