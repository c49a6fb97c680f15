"""Operator surface: dataset generation, training, inference, evaluation,
and gradient verification.

Every command prints its resolved configuration, runs deterministically for
a given seed, and exits non-zero on failure. Reports embed the config hash
and format versions; wall-clock timings go to a separate sidecar so the
deterministic artifacts stay byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dataio import (FORMAT_VERSION, DataFormatError, load_checkpoint,
                     load_dataset, read_panoptic_grid, save_checkpoint,
                     write_panoptic_grid)
from .gradcheck import run_gradient_checks
from .metrics import aggregate_results, evaluate_video
from .synthetic import BENCHMARKS, make_benchmark
from .tracker import run_inference, run_vss_inference
from .train import train_model

REPORT_FORMAT_VERSION = 1

CONFIG_FLAGS = {
    "mode": "--mode",
    "subclip_size": "--subclip-size",
    "window": "--window",
    "seed": "--seed",
    "iterations": "--iterations",
    "learning_rate": "--learning-rate",
    "batch_size": "--batch-size",
}


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON config file mirroring RunConfig field names")
    parser.add_argument("--mode", choices=("VPS", "VIS", "VSS"), default=None)
    parser.add_argument("--subclip-size", type=int, default=None)
    parser.add_argument("--window", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--iterations", type=int, default=None)
    parser.add_argument("--learning-rate", type=float, default=None)
    parser.add_argument("--batch-size", type=int, default=None)


def resolve_config(args) -> RunConfig:
    """Defaults < --config file < explicit flags."""
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {field: getattr(args, field)
                 for field in CONFIG_FLAGS
                 if getattr(args, field, None) is not None}
    if overrides:
        config = config.replace(**overrides)
    return config


def _print_config(config: RunConfig, command: str):
    print(f"[{command}] resolved config (hash {config.config_hash()}):")
    print(config.to_json())


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    config = resolve_config(args)
    seed = config.seed
    _print_config(config, "gen")
    paths = make_benchmark(args.benchmark, seed, args.out)
    for split, manifest in sorted(paths.items()):
        print(f"wrote {split}: {manifest}")
    return 0


def cmd_train(args) -> int:
    config = resolve_config(args)
    _print_config(config, "train")
    dataset = load_dataset(args.dataset)
    t0 = time.perf_counter()
    model, history = train_model(config, dataset)
    elapsed = time.perf_counter() - t0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.tlck"
    save_checkpoint(model, ckpt)
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "loss", "track_loss", "lr"])
        writer.writeheader()
        writer.writerows(history)
    _write_json(out / "train_config.json", {
        "report_format_version": REPORT_FORMAT_VERSION,
        "dataset_format_version": FORMAT_VERSION,
        "config_hash": config.config_hash(),
        "config": config.to_dict(),
        "final_loss": history[-1]["loss"],
        "steps": len(history),
    })
    _write_json(out / "timing.json", {"train_seconds": elapsed})
    print(f"checkpoint: {ckpt} (final loss {history[-1]['loss']:.4f}, {elapsed:.1f}s)")
    return 0


def cmd_infer(args) -> int:
    config = resolve_config(args)
    _print_config(config, "infer")
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    if model.config.num_classes != dataset.labels.num_classes:
        raise DataFormatError(
            f"checkpoint has {model.config.num_classes} classes, "
            f"dataset has {dataset.labels.num_classes}")
    infer_cfg = config.inference_config()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": config.config_hash(),
        "mode": config.mode,
        "window": infer_cfg.window,
        "videos": [],
    }
    all_tracks = {}
    total_frames = 0
    total_seconds = 0.0
    for video in dataset.videos:
        vdir = out / video.video_id
        vdir.mkdir(exist_ok=True)
        if config.mode == "VSS":
            t0 = time.perf_counter()
            class_ids = run_vss_inference(video.clip, model, infer_cfg)
            elapsed = time.perf_counter() - t0
            inst_ids = np.zeros_like(class_ids)
            tracks = []
        else:
            result = run_inference(video.clip, model, dataset.labels, infer_cfg)
            class_ids, inst_ids = result.panoptic.class_ids, result.panoptic.instance_ids
            tracks = result.tracks
            elapsed = result.elapsed_seconds
        files = []
        for t in range(class_ids.shape[0]):
            rel = f"{video.video_id}/pred_{t:03d}.tlg"
            write_panoptic_grid(out / rel, class_ids[t], inst_ids[t])
            files.append(rel)
        manifest["videos"].append({"id": video.video_id, "predictions": files})
        all_tracks[video.video_id] = tracks
        total_frames += class_ids.shape[0]
        total_seconds += elapsed

    _write_json(out / "pred_manifest.json", manifest)
    _write_json(out / "tracks.json", all_tracks)
    fps = total_frames / total_seconds if total_seconds > 0 else float("inf")
    _write_json(out / "timing.json", {
        "frames_per_second": fps,
        "elapsed_seconds": total_seconds,
        "frames": total_frames,
        "window": infer_cfg.window,
    })
    print(f"wrote predictions for {len(dataset.videos)} videos "
          f"({fps:.1f} frames/s at window {infer_cfg.window})")
    return 0


def _load_predictions(pred_dir: Path) -> tuple:
    manifest_path = pred_dir / "pred_manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(f"no pred_manifest.json under {pred_dir}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataFormatError("unsupported prediction format version")
    videos = {}
    for entry in manifest["videos"]:
        classes, insts = [], []
        for rel in entry["predictions"]:
            c, i = read_panoptic_grid(pred_dir / rel)
            classes.append(c)
            insts.append(i)
        videos[entry["id"]] = (np.stack(classes), np.stack(insts))
    return manifest, videos


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    manifest, preds = _load_predictions(pred_dir)
    dataset = load_dataset(args.gt)
    results = []
    for video in dataset.videos:
        if video.video_id not in preds:
            raise DataFormatError(f"no predictions for video {video.video_id}")
        pred_class, pred_inst = preds[video.video_id]
        if pred_class.shape != video.gt_class.shape:
            raise DataFormatError(
                f"{video.video_id}: prediction has {pred_class.shape[0]} frames, "
                f"ground truth has {video.gt_class.shape[0]}")
        results.append(evaluate_video(pred_class, pred_inst,
                                      video.gt_class, video.gt_inst,
                                      dataset.labels))
    summary = aggregate_results(results)

    out = Path(args.out) if args.out else pred_dir
    out.mkdir(parents=True, exist_ok=True)
    report = {
        "report_format_version": REPORT_FORMAT_VERSION,
        "dataset_format_version": FORMAT_VERSION,
        "config_hash": manifest.get("config_hash", "unknown"),
        "mode": manifest.get("mode", "unknown"),
        "window": manifest.get("window"),
        "num_videos": len(results),
        "metrics": summary.scores(),
        "per_class": summary.per_class,
    }
    _write_json(out / "report.json", report)
    with open(out / "per_class.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["class_id", "kind", "sem_iou", "pq"])
        writer.writeheader()
        writer.writerows(summary.per_class)
    for name, value in sorted(summary.scores().items()):
        print(f"{name}: {value:.6f}")
    print(f"report: {out / 'report.json'}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradient_checks(trials=args.trials)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name}: max rel err {r.max_rel_err:.3e} "
              f"(tolerance {r.tolerance:.0e}, {r.trials} trials, {r.seconds:.1f}s)")
        failed += 0 if r.passed else 1
    if failed:
        print(f"{failed} of {len(results)} gradient checks failed")
        return 1
    print(f"all {len(results)} gradient checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tubeseg",
        description="Near-online universal video segmentation on subclip tubes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic benchmark")
    p.add_argument("--benchmark", choices=BENCHMARKS, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset split")
    p.add_argument("--dataset", type=Path, required=True, help="split directory")
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="run inference with a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True, help="split directory")
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (DataFormatError, ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
