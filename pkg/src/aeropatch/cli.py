"""Command-line surface: dataset generation, training, evaluation, export.

Every subcommand takes --config FILE plus --key=value overrides mirroring
the dotted config keys, writes its artifacts atomically under --out, and
drops a manifest.json sufficient to reproduce the run bit-exactly.
Exit codes: 0 success, 2 validation/config error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import plots
from .augment import WeatherSpec, apply_weather
from .config import ConfigError, RunConfig, write_atomic
from .detector import ToyDetector, build_annotations, detect
from .embed import embed_patch
from .losses import AttackSetup, PipelineVariant, sample_specs
from .metrics import aorr, match_detections, osr, pr_ap
from .optimize import optimize_patch
from .synthetic import SynthParams, gen_synthetic_dataset
from .tracks import FrameScores, PrecomputedScores, ingest_physical_run
from .types import (DatasetError, DetectionSet, Patch, PatchDesign,
                    PrintableColorSet, SceneDataset, TrackedScoreSeries,
                    save_image, validate_dataset)

MM_PER_INCH = 25.4


def _base_parser(name: str, **flags: str) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=f"aeropatch {name}", allow_abbrev=False)
    parser.add_argument("--config", default=None, help="config file (key = value lines)")
    for flag, help_text in flags.items():
        parser.add_argument(f"--{flag}", default=None, help=help_text)
    return parser


def _resolve(parser: argparse.ArgumentParser, argv: list[str],
             required: tuple[str, ...] = ()) -> tuple[argparse.Namespace, RunConfig]:
    args, rest = parser.parse_known_args(argv)
    cfg = RunConfig()
    if args.config:
        cfg.load_file(args.config)
    cfg.apply_flags(rest)
    for name in required:
        if getattr(args, name.replace("-", "_")) is None:
            raise ConfigError(f"--{name} is required")
    return args, cfg


def _load_detector(cfg: RunConfig, flag_value: str | None) -> ToyDetector:
    path = flag_value or cfg["detector.checkpoint"]
    if not path:
        raise ConfigError("missing detector checkpoint (--detector or detector.checkpoint)")
    if not Path(path).exists():
        raise ConfigError(f"missing detector checkpoint: {path}")
    return ToyDetector.load(path)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_gen_synthetic(argv: list[str]) -> int:
    parser = _base_parser("gen-synthetic", out="output scene directory")
    args, cfg = _resolve(parser, argv, required=("out",))
    out = _out_dir(args)
    params = SynthParams(
        image_size=cfg["synth.image_size"],
        car_count=(cfg["synth.car_min"], cfg["synth.car_max"]),
        car_length=(cfg["synth.car_len_min"], cfg["synth.car_len_max"]),
    )
    counts = gen_synthetic_dataset(out, cfg["synth.n_train"], cfg["synth.n_test"],
                                   params, cfg["synth.seed"])
    write_atomic(out / "manifest.json", cfg.manifest("gen-synthetic", {"counts": counts}))
    print(f"wrote {counts['train']} train / {counts['test']} test images to {out}")
    return 0


def cmd_train_detector(argv: list[str]) -> int:
    parser = _base_parser("train-detector", scene="scene directory",
                          out="output directory")
    args, cfg = _resolve(parser, argv, required=("scene", "out"))
    out = _out_dir(args)
    dataset = SceneDataset.from_dir(args.scene)
    validate_dataset(dataset)
    truth = DetectionSet.load(Path(args.scene) / "ground_truth_train.json")
    scenes = []
    for img in dataset.train_images:
        boxes = [d.box for d in truth.per_image.get(img.image_id, [])]
        scenes.append((img.pixels(), boxes))

    from .detector import train_toy_detector

    detector = ToyDetector(input_size=cfg["detector.input_size"])
    history = train_toy_detector(
        detector, scenes,
        epochs=cfg["dettrain.epochs"],
        batch_size=cfg["dettrain.batch_size"],
        learning_rate=cfg["dettrain.learning_rate"],
        seed=cfg["dettrain.seed"],
        occlusion_augment=cfg["dettrain.occlusion_augment"])
    ckpt = out / "detector.pt"
    detector.save(ckpt)
    write_atomic(out / "detector_loss.csv",
                 "epoch,loss\n" + "\n".join(f"{i + 1},{v!r}" for i, v in enumerate(history)) + "\n")
    write_atomic(out / "manifest.json", cfg.manifest("train-detector", {
        "detector_checksum": detector.param_checksum(),
        "final_loss": history[-1] if history else None,
    }))
    print(f"trained detector -> {ckpt} (final loss {history[-1]:.4f})")
    return 0


def cmd_annotate(argv: list[str]) -> int:
    parser = _base_parser("annotate", scene="scene directory",
                          detector="detector checkpoint", out="output directory")
    args, cfg = _resolve(parser, argv, required=("scene", "out"))
    out = _out_dir(args)
    detector = _load_detector(cfg, args.detector)
    dataset = SceneDataset.from_dir(args.scene)
    result = build_annotations(
        detector, dataset,
        objectness_threshold=cfg["annotate.objectness"],
        nms_iou=cfg["annotate.nms_iou"],
        review_threshold=cfg["annotate.review_threshold"])
    write_atomic(out / "annotations_train.json", result.train.to_json())
    write_atomic(out / "annotations_test.json", result.test.to_json())
    write_atomic(out / "review.txt", "\n".join(result.review) + ("\n" if result.review else ""))
    write_atomic(out / "manifest.json", cfg.manifest("annotate", {
        "detector_checksum": detector.param_checksum(),
        "skipped": result.skipped,
        "train_detections": result.train.total_detections(),
        "test_detections": result.test.total_detections(),
    }))
    print(f"annotated {len(result.train)} train / {len(result.test)} test images; "
          f"{len(result.review)} detections flagged for review")
    return 0


def _attack_setup(cfg: RunConfig, detector: ToyDetector, weather: bool) -> AttackSetup:
    return AttackSetup(
        detector=detector,
        geometry=cfg.geometry(),
        aug=cfg.aug_config(weather),
        colors=PrintableColorSet.default(),
        max_scope=cfg["detector.max_scope"],
        soft_max_temp=cfg["detector.soft_max_temp"],
        per_image_spec=cfg["aug.per_image"],
    )


def cmd_train_patch(argv: list[str]) -> int:
    parser = _base_parser("train-patch", scene="scene directory",
                          annotations="training annotation JSON",
                          detector="detector checkpoint", out="output directory")
    args, cfg = _resolve(parser, argv, required=("scene", "annotations", "out"))
    out = _out_dir(args)
    detector = _load_detector(cfg, args.detector)
    dataset = SceneDataset.from_dir(args.scene)
    annotations = DetectionSet.load(args.annotations)
    train_cfg = cfg.train_config()
    digital, physical = cfg.patch_sizes()
    setup = _attack_setup(cfg, detector,
                          weather=train_cfg.pipeline_variant is PipelineVariant.GCW)
    checksum_before = detector.param_checksum()

    result = optimize_patch(
        dataset, annotations, cfg.geometry(), train_cfg, cfg.loss_weights(),
        setup, digital_size=digital, physical_size=physical,
        checkpoint_dir=out / "checkpoints", dump_dir=out)

    patch_path = out / "patch.npz"
    result.patch.save(patch_path)
    write_atomic(out / "loss_curve.csv", result.curve_csv())
    if result.epochs:
        plots.plot_loss_curve(result.epochs, out / "loss_curve.png")
    checksum_after = detector.param_checksum()
    if checksum_before != checksum_after:
        raise RuntimeError("detector parameters changed during patch training")
    write_atomic(out / "manifest.json", cfg.manifest("train-patch", {
        "detector_checksum": checksum_after,
        "patch_sha256": _sha256(patch_path),
    }))
    print(f"trained {cfg['patch.design']} patch ({train_cfg.pipeline_variant.value}) "
          f"-> {patch_path}")
    return 0


def cmd_eval_digital(argv: list[str]) -> int:
    parser = _base_parser("eval-digital", scene="scene directory",
                          annotations="test annotation JSON",
                          detector="detector checkpoint",
                          patch="patch .npz file", out="output directory")
    args, cfg = _resolve(parser, argv, required=("scene", "annotations", "out"))
    out = _out_dir(args)
    regime = cfg["eval.regime"]
    if regime not in ("std", "std_w"):
        raise ConfigError(f"eval.regime must be std|std_w, got {regime!r}")
    noop = cfg["eval.noop_patch"]
    if not noop and args.patch is None:
        raise ConfigError("--patch is required unless eval.noop_patch=true")

    detector = _load_detector(cfg, args.detector)
    dataset = SceneDataset.from_dir(args.scene)
    clean = DetectionSet.load(args.annotations)
    patch = Patch.load(args.patch) if not noop else None
    geometry = cfg.geometry()
    aug_gc = cfg.aug_config(weather=False)
    rng = np.random.default_rng(cfg["eval.seed"])
    test_by_id = {img.image_id: img for img in dataset.test_images}

    pairs_per_image = []
    attacked_sets: dict[str, list] = {}
    clean_sets: dict[str, list] = {}
    rows = ["image_id,x_min,y_min,x_max,y_max,clean_score,attacked_score"]
    for image_id in sorted(clean.per_image):
        dets = clean.per_image[image_id]
        if not dets or image_id not in test_by_id:
            continue
        image = test_by_id[image_id].pixels()
        boxes = [d.box for d in dets]
        if noop:
            attacked_img = image
        else:
            specs = sample_specs(rng, aug_gc, boxes, cfg["aug.per_image"])
            attacked_img = embed_patch(image, patch, boxes, specs, geometry)
        if regime == "std_w":
            effects = cfg.aug_config(weather=True).weather_effects
            effect = effects[int(rng.integers(0, len(effects)))]
            intensity = float(rng.uniform(cfg["aug.weather.intensity_min"],
                                          cfg["aug.weather.intensity_max"]))
            attacked_img = apply_weather(attacked_img, WeatherSpec(
                effect, intensity, seed=int(rng.integers(0, 2**31 - 1))))
        attacked = detect(detector, attacked_img,
                          cfg["eval.retrieval_threshold"], cfg["eval.nms_iou"])
        pairs = match_detections(dets, attacked, cfg["eval.min_iou"])
        pairs_per_image.append(pairs)
        attacked_sets[image_id] = attacked
        clean_sets[image_id] = dets
        for p in pairs:
            b = p.clean.box
            rows.append(f"{image_id},{b[0]!r},{b[1]!r},{b[2]!r},{b[3]!r},"
                        f"{p.clean.objectness!r},{p.attacked_score!r}")

    if not pairs_per_image:
        raise DatasetError("no test images with clean detections to evaluate")
    aorr_value = aorr(pairs_per_image, normalization=cfg["eval.aorr_norm"])
    pr = pr_ap(clean_sets, attacked_sets, iou_threshold=cfg["eval.min_iou"])
    plots.plot_pr_curves({f"{regime}": pr}, out / "pr_curve.png")
    write_atomic(out / "pairs.csv", "\n".join(rows) + "\n")

    metrics_doc = {
        "metric": "aorr",
        "value": aorr_value,
        "ap": pr.ap,
        "regime": regime,
        "normalization": cfg["eval.aorr_norm"],
        "n_images": len(pairs_per_image),
        "n_detections": sum(len(p) for p in pairs_per_image),
        "noop_patch": noop,
        "config": {k: cfg.values[k] for k in sorted(cfg.values)},
    }
    write_atomic(out / "metrics.json", json.dumps(metrics_doc, indent=2, sort_keys=True))
    write_atomic(out / "manifest.json", cfg.manifest("eval-digital", {
        "detector_checksum": detector.param_checksum(),
        "patch_sha256": _sha256(Path(args.patch)) if args.patch else None,
    }))
    print(f"AORR ({regime}) = {aorr_value:.4f}, AP = {pr.ap:.4f} "
          f"over {metrics_doc['n_detections']} detections")
    return 0


def cmd_eval_physical(argv: list[str]) -> int:
    parser = _base_parser(
        "eval-physical",
        **{"patched-track": "track CSV for patched footage",
           "clean-track": "track CSV for clean footage",
           "patched-scores": "precomputed score CSV (patched)",
           "clean-scores": "precomputed score CSV (clean)",
           "patched-frames": "frame directory (patched)",
           "clean-frames": "frame directory (clean)",
           "detector": "detector checkpoint (for frame re-runs)",
           "conditions": "sidecar JSON with per-object condition tags",
           "out": "output directory"})
    args, cfg = _resolve(parser, argv, required=("patched-track", "clean-track", "out"))
    out = _out_dir(args)

    def source(scores_csv, frames_dir):
        if scores_csv:
            return PrecomputedScores(Path(scores_csv))
        if frames_dir:
            detector = _load_detector(cfg, args.detector)
            return FrameScores(Path(frames_dir), detector,
                               retrieval_threshold=cfg["physical.retrieval_threshold"],
                               min_iou=cfg["physical.min_iou"])
        raise ConfigError("need either a score CSV or a frame directory per video")

    conditions = None
    if args.conditions:
        conditions = json.loads(Path(args.conditions).read_text())
    series, report = ingest_physical_run(
        args.patched_track, args.clean_track,
        source(args.patched_scores, args.patched_frames),
        source(args.clean_scores, args.clean_frames),
        conditions=conditions)

    per_object = {}
    for s in series:
        value = osr(s)
        per_object[s.object_id] = {
            "osr": value,
            "alpha": len(s.patched_scores),
            "beta": len(s.clean_scores),
            "conditions": s.conditions,
        }
        write_atomic(out / f"series_{s.object_id}.json", s.to_json())
        plots.plot_score_series(s, out / f"scores_{s.object_id}.png")
    plots.plot_ndr_curves(series, out / "ndr_curves.png")

    metrics_doc = {
        "metric": "osr",
        "per_object": per_object,
        "mean_osr": sum(v["osr"] for v in per_object.values()) / len(per_object),
        "report": report,
        "config": {k: cfg.values[k] for k in sorted(cfg.values)},
    }
    write_atomic(out / "metrics.json", json.dumps(metrics_doc, indent=2, sort_keys=True))
    write_atomic(out / "manifest.json", cfg.manifest("eval-physical", {}))
    print(f"mean OSR = {metrics_doc['mean_osr']:.4f} over {len(series)} objects")
    return 0


def cmd_export_patch(argv: list[str]) -> int:
    parser = _base_parser("export-patch", patch="patch .npz file",
                          out="output directory")
    args, cfg = _resolve(parser, argv, required=("patch", "out"))
    out = _out_dir(args)
    patch = Patch.load(args.patch)
    w_px, h_px = patch.digital_size
    w_mm, h_mm = patch.physical_size
    dpi = (w_px / (w_mm / MM_PER_INCH), h_px / (h_mm / MM_PER_INCH))

    written = []
    for i, unit in enumerate(patch.units()):
        suffix = "" if patch.design is PatchDesign.ON else f"_strip{i}"
        path = out / f"patch_{patch.design.value}{suffix}.png"
        save_image(unit, path, dpi=dpi)
        written.append(path.name)
    sidecar = [
        f"design = {patch.design.value}",
        f"units = {len(patch.units())}",
        f"digital_size_px = {w_px} x {h_px}",
        f"physical_size_mm = {w_mm:g} x {h_mm:g}",
        f"dpi = {dpi[0]!r} x {dpi[1]!r}",
        "files = " + ", ".join(written),
    ]
    write_atomic(out / "print_dimensions.txt", "\n".join(sidecar) + "\n")
    write_atomic(out / "manifest.json", cfg.manifest("export-patch", {
        "patch_sha256": _sha256(Path(args.patch)),
    }))
    print(f"exported {len(written)} file(s); physical size {w_mm:g} x {h_mm:g} mm")
    return 0


def cmd_plot(argv: list[str]) -> int:
    parser = _base_parser("plot", kind="loss | series | ndr",
                          input="input file (CSV or series JSON; ndr accepts "
                                "a comma-separated list)",
                          out="output PNG path")
    args, cfg = _resolve(parser, argv, required=("kind", "input", "out"))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "loss":
        from .optimize import EpochStats

        rows = Path(args.input).read_text().strip().splitlines()[1:]
        epochs = []
        for row in rows:
            e, loss, mobj, npsv, tvv = row.split(",")
            epochs.append(EpochStats(int(e), float(loss), float(mobj),
                                     float(npsv), float(tvv)))
        plots.plot_loss_curve(epochs, args.out)
    elif args.kind == "series":
        series = TrackedScoreSeries.from_json(Path(args.input).read_text())
        plots.plot_score_series(series, args.out)
    elif args.kind == "ndr":
        series = [TrackedScoreSeries.from_json(Path(p).read_text())
                  for p in args.input.split(",")]
        plots.plot_ndr_curves(series, args.out)
    else:
        raise ConfigError(f"unknown plot kind {args.kind!r}")
    print(f"wrote {args.out}")
    return 0


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train-detector": cmd_train_detector,
    "annotate": cmd_annotate,
    "train-patch": cmd_train_patch,
    "eval-digital": cmd_eval_digital,
    "eval-physical": cmd_eval_physical,
    "export-patch": cmd_export_patch,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv or argv[0] in ("-h", "--help"):
        names = "\n  ".join(COMMANDS)
        print(f"usage: aeropatch <command> [options] [--key=value ...]\n"
              f"commands:\n  {names}")
        return 0
    command = argv[0]
    if command not in COMMANDS:
        print(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}",
              file=sys.stderr)
        return 2
    torch.manual_seed(0)  # library calls below reseed as configured
    try:
        return COMMANDS[command](argv[1:])
    except (ConfigError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
