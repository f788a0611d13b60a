"""Command-line entry points.

Subcommands cover the full workflow: synthesize a dataset, train, evaluate
with metrics and figures, verify gradients, and visualize corner-based
refinement on single images.

Exit codes: 0 on success, 1 when the requested operation ran and failed
(a gradient check tripped, training diverged), 2 for unusable input
(bad flags, malformed config, missing files).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_tensors
from .config import ConfigError, RunConfig, config_to_json, load_config, resolve_config
from .data import generate_dataset, image_to_input, load_split
from .evaluate import default_iou_thresholds, evaluate_detections, result_to_json
from .gradcheck import available_checks, run_checks
from .inference import detections_to_json, joint_refine, run_inference
from .model import ABLATION_PRESETS, Model, apply_ablation
from .scenes import SceneFormatError
from .train import CHECKPOINT_NAME, LOSS_LOG_NAME, TrainingDiverged, train_run

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "config.resolved.json"


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else resolve_config({})
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(
            cfg,
            seed=args.seed,
            dataset=dataclasses.replace(cfg.dataset, seed=args.seed),
            train=dataclasses.replace(cfg.train, seed=args.seed),
        )
    ablation = getattr(args, "ablation", None)
    if ablation:
        cfg = dataclasses.replace(cfg, head=apply_ablation(cfg.head, ablation))
    return cfg


def _write_resolved(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / RESOLVED_CONFIG_NAME).write_text(config_to_json(cfg))


def _inference_config(cfg: RunConfig, model: Model, joint: bool | None = None):
    """Inference knobs consistent with the trained head."""
    effective = cfg.head.joint_inference and cfg.inference.joint_inference
    if joint is not None:
        effective = joint and cfg.head.corner_head
    return dataclasses.replace(
        cfg.inference,
        joint_inference=effective,
        conversion=cfg.head.conversion,
        subset_size=cfg.head.subset_size,
        moment_multiplier=model.moment_multiplier,
    )


def _load_model(cfg: RunConfig, checkpoint_path) -> Model:
    model = Model(cfg.head, seed=cfg.seed, strides=cfg.strides)
    model.load_state(load_tensors(checkpoint_path))
    return model


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out)
    workers = int(os.environ.get("POINTDET_WORKERS", "1"))
    manifest = generate_dataset(cfg.dataset, out, workers=max(workers, 1))
    _write_resolved(cfg, out)
    counts = {s: v["count"] for s, v in manifest["splits"].items()}
    print(f"wrote {counts} scenes to {out} (sha256 {manifest['dataset_sha256'][:16]}...)")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    items = load_split(args.data, "train")
    model = Model(cfg.head, seed=cfg.seed, strides=cfg.strides)
    out = Path(args.out)
    _write_resolved(cfg, out)
    try:
        ckpt_path = train_run(model, items, cfg.train, out, resume=args.resume)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    from .report import plot_loss_curves

    fig = plot_loss_curves(out / LOSS_LOG_NAME, out / "loss_curves.png")
    with open(out / LOSS_LOG_NAME, encoding="ascii") as fh:
        last = json.loads(fh.readlines()[-1])
    print(f"final loss {last['total']:.4f} after {last['iteration']} iterations")
    print(f"checkpoint: {ckpt_path}")
    print(f"figure: {fig}")
    return 0


def _evaluate_run(cfg: RunConfig, model: Model, items, joint: bool | None, dump_dir=None):
    inf_cfg = _inference_config(cfg, model, joint)
    detections = []
    scenes = []
    dump_lines = []
    for image_id, scene, image in items:
        dets = run_inference(model.predict(image_to_input(image)), inf_cfg)
        detections.append(dets)
        scenes.append(scene)
        if dump_dir is not None:
            dump_lines.append(detections_to_json(image_id, dets))
    if dump_dir is not None:
        (Path(dump_dir) / "detections.jsonl").write_text("\n".join(dump_lines) + "\n")
    return detections, scenes, inf_cfg


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    items = load_split(args.data, args.split)
    model = _load_model(cfg, args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, out)
    joint = False if args.no_joint_inference else None
    thresholds = tuple(args.iou_thresholds) if args.iou_thresholds else default_iou_thresholds()
    detections, scenes, inf_cfg = _evaluate_run(
        cfg, model, items, joint, dump_dir=out if args.dump_detections else None
    )
    result = evaluate_detections(detections, scenes, thresholds)
    (out / "metrics.json").write_text(result_to_json(result))
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iou_threshold", "ap"])
        for t in result.iou_thresholds:
            writer.writerow([f"{t:.2f}", f"{result.ap_per_iou[t]:.6f}"])
        writer.writerow(["mean", f"{result.mean_ap:.6f}"])
    from .report import plot_ap_bars, plot_detections, plot_pr_curves

    plot_ap_bars(result, out / "ap_per_iou.png")
    plot_pr_curves(result, out / "pr_curves.png")
    for k in range(min(args.overlay_count, len(items))):
        image_id, scene, image = items[k]
        plot_detections(image, detections[k], out / f"overlay_{image_id}.png", scene)
    mode = "joint" if inf_cfg.joint_inference else "plain"
    print(f"mean AP {result.mean_ap:.4f} over {result.num_images} images ({mode} decode)")
    for t in result.iou_thresholds:
        print(f"  AP@{t:.2f} = {result.ap_per_iou[t]:.4f}")
    print(f"metrics: {out / 'metrics.json'}")
    return 0


def cmd_gradcheck(args) -> int:
    names = args.checks if args.checks else None
    try:
        results = run_checks(
            seed=args.seed, trials=args.trials, names=names, inject_bug=args.inject_bug
        )
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 2
    width = max(len(r.name) for r in results)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(
            f"{r.name:<{width}}  {status:>4}  max rel err {r.max_err:9.3e}"
            f"  ({r.trials} trials, {r.seconds:.2f}s)"
        )
    total = sum(r.trials for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed, {total} input draws")
    if failed:
        print("failed: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return 1
    return 0


def cmd_demo_refine(args) -> int:
    cfg = _load_run_config(args)
    items = load_split(args.data, args.split)
    if not 0 <= args.index < len(items):
        print(f"error: --index {args.index} out of range (split has {len(items)})",
              file=sys.stderr)
        return 2
    model = _load_model(cfg, args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    image_id, scene, image = items[args.index]
    outputs = model.predict(image_to_input(image))

    plain_cfg = _inference_config(cfg, model, joint=False)
    joint_cfg = _inference_config(cfg, model, joint=True)
    if not joint_cfg.joint_inference:
        print("error: checkpoint has no corner head; nothing to refine", file=sys.stderr)
        return 2
    plain = run_inference(outputs, plain_cfg)
    joint = run_inference(outputs, joint_cfg)

    from .report import plot_detections

    fig_plain = plot_detections(image, plain, out / f"demo_{image_id}_plain.png", scene)
    fig_joint = plot_detections(image, joint, out / f"demo_{image_id}_joint.png", scene)
    moved = sum(1 for d in joint if d.refined_tl or d.refined_br)
    log = {
        "image_id": image_id,
        "detections_plain": len(plain),
        "detections_joint": len(joint),
        "corners_refined_detections": moved,
    }
    (out / f"demo_{image_id}.json").write_text(json.dumps(log, sort_keys=True, indent=2) + "\n")
    print(f"{image_id}: {len(joint)} detections, {moved} with refined corners")
    print(f"figures: {fig_plain} {fig_joint}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointdet",
        description="Point-set object detector with corner/foreground verification.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p, seed=True):
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        if seed:
            p.add_argument("--seed", type=int, help="override every seed in the config")

    p = sub.add_parser("gen-data", help="synthesize a dataset with a manifest")
    add_config(p)
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector")
    add_config(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory for checkpoint and logs")
    p.add_argument("--ablation", choices=sorted(ABLATION_PRESETS),
                   help="head preset overriding the config")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes metrics and figures")
    add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--ablation", choices=sorted(ABLATION_PRESETS))
    p.add_argument("--iou-thresholds", type=float, nargs="+", metavar="T")
    p.add_argument("--no-joint-inference", action="store_true",
                   help="decode boxes without corner snapping")
    p.add_argument("--dump-detections", action="store_true",
                   help="also write per-image detections.jsonl")
    p.add_argument("--overlay-count", type=int, default=4,
                   help="number of overlay figures to render")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=4, help="random inputs per check")
    p.add_argument("--checks", nargs="+", metavar="NAME",
                   help=f"subset of: {', '.join(available_checks())}")
    p.add_argument("--inject-bug", metavar="NAME",
                   help="negate one check's analytic gradient to prove detection")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("demo-refine", help="render one image with and without refinement")
    add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--index", type=int, default=0, help="scene index within the split")
    p.set_defaults(func=cmd_demo_refine)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, SceneFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
