"""Command-line surface: convert, train, evaluate, predict.

Exit codes are a stable scripting contract: 0 success, 2 usage or input
error, 3 runtime failure. Every command writes one JSON manifest next
to its outputs recording the resolved configuration, paths, seed and
wall-clock bounds, so a run can be replayed from its manifest alone.
Flag values override config-file values, which override defaults.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .dataset import (BINARY_CLASS_MAP, DEFAULT_CLASS_MAP, DEFAULT_PALETTE,
                      Preprocessing, load_dataset, read_palette, render_overlay,
                      to_binary)
from .engine import forward
from .errors import (CheckpointIncompatibleError, CorruptCheckpointError,
                     InvalidLabelError, MissingAnnotationError,
                     TrainingDivergedError)
from .metrics import evaluate, report_to_csv, report_to_table
from .model import (ARCHITECTURES, apply_output_stride, build_resnet101,
                    compute_receptive_field, convert_to_fcn,
                    reconcile_parameters)
from .params import load_parameters
from .training import (Checkpoint, TrainingConfig, load_checkpoint,
                       save_checkpoint, train, write_loss_csv)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RUNTIME = 3

_CONFIG_PARSERS = {
    "learning_rate": float,
    "max_iterations": int,
    "batch_size": int,
    "seed": int,
    "checkpoint_every": int,
    "crop_size": str,
    "arch": str,
    "num_classes": int,
    "init_checkpoint": str,
}


class InputError(Exception):
    """User-facing input problem; maps to exit code 2."""


def _parse_config_file(path: Path) -> dict:
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    values: dict = {}
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{line_no}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _CONFIG_PARSERS:
            raise InputError(f"{path}:{line_no}: unknown config key {key!r}")
        values[key] = _CONFIG_PARSERS[key](raw)
    return values


def _parse_crop_size(raw: str):
    if raw.lower() in ("none", ""):
        return None
    try:
        h, _, w = raw.partition("x")
        return int(h), int(w)
    except ValueError:
        raise InputError(f"crop_size must be HxW or none, got {raw!r}") from None


def _utcnow() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _write_manifest(path: Path, command: str, config: dict, inputs: dict,
                    outputs: dict, seed: int, started: str) -> None:
    manifest = {
        "command": command,
        "toolkit_version": __version__,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "started": started,
        "finished": _utcnow(),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _class_map_for(num_classes: int) -> dict[str, int]:
    if num_classes == 3:
        return dict(DEFAULT_CLASS_MAP)
    if num_classes == 2:
        return dict(BINARY_CLASS_MAP)
    return {f"class{i}": i for i in range(num_classes)}


def _resolve_seed(args, config: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return config.get("seed", 0)


def cmd_convert(args) -> int:
    started = _utcnow()
    weights_dir = Path(args.weights)
    stored = load_parameters(weights_dir)
    if "fc.weight" not in stored:
        raise InputError(f"{weights_dir}: no fc.weight tensor; cannot infer "
                         "the classifier's class count")
    classifier_classes = stored["fc.weight"].shape[-1]
    spec, params = build_resnet101(classifier_classes, pretrained=str(weights_dir))

    rf_before = compute_receptive_field(spec)
    fcn = convert_to_fcn(spec, args.classes)
    params = reconcile_parameters(fcn, params, seed=args.seed or 0)
    if args.output_stride == 8:
        fcn = apply_output_stride(fcn, 8)
    rf_after = compute_receptive_field(fcn)
    print(f"receptive field: {rf_before} -> {rf_after}")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    seed = args.seed or 0
    ckpt = Checkpoint(model=fcn, params=params, optimizer=None, iteration=0,
                      config=TrainingConfig(seed=seed),
                      preprocessing=Preprocessing())
    save_checkpoint(ckpt, out)
    _write_manifest(out.with_name(out.name + ".manifest.json"), "convert",
                    {"classes": args.classes, "output_stride": args.output_stride},
                    {"weights": str(weights_dir)}, {"checkpoint": str(out)},
                    seed, started)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = _utcnow()
    config_values = _parse_config_file(Path(args.config))
    seed = _resolve_seed(args, config_values)
    arch = config_values.get("arch", "resnet101")
    if arch not in ARCHITECTURES:
        raise InputError(f"unknown arch {arch!r}; choose from "
                         f"{sorted(ARCHITECTURES)}")
    num_classes = 2 if args.binary else config_values.get("num_classes", 3)
    crop_size = _parse_crop_size(config_values.get("crop_size", "none"))
    config = TrainingConfig(
        learning_rate=config_values.get("learning_rate", 1e-4),
        max_iterations=config_values.get("max_iterations", 500),
        batch_size=config_values.get("batch_size", 1),
        seed=seed,
        checkpoint_every=config_values.get("checkpoint_every", 100),
        crop_size=crop_size,
    )

    data_dir = Path(args.data)
    mask_transform = to_binary if args.binary else None
    load_classes = 3 if args.binary else num_classes
    try:
        dataset = load_dataset(data_dir, _class_map_for(load_classes))
    except (MissingAnnotationError, InvalidLabelError, ValueError) as exc:
        raise InputError(str(exc)) from exc

    init_checkpoint = config_values.get("init_checkpoint")
    if init_checkpoint:
        ckpt0 = load_checkpoint(init_checkpoint)
        if ckpt0.model.num_classes != num_classes:
            raise InputError(
                f"init checkpoint predicts {ckpt0.model.num_classes} classes, "
                f"training needs {num_classes}")
        fcn, params = ckpt0.model, ckpt0.params
        preprocessing = ckpt0.preprocessing
    else:
        spec, params = ARCHITECTURES[arch](num_classes, seed=seed)
        fcn = apply_output_stride(convert_to_fcn(spec, num_classes), 8)
        params = reconcile_parameters(fcn, params, seed=seed)
        preprocessing = Preprocessing()

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt, history = train(fcn, params, dataset, config,
                          preprocessing=preprocessing,
                          checkpoint_dir=out_dir, mask_transform=mask_transform)
    save_checkpoint(ckpt, out_dir / "checkpoint_final.ckpt")
    write_loss_csv(history, out_dir / "loss.csv")
    _write_manifest(out_dir / "manifest.json", "train",
                    {**config_values, "binary": args.binary,
                     "resolved": {"learning_rate": config.learning_rate,
                                  "max_iterations": config.max_iterations,
                                  "batch_size": config.batch_size,
                                  "seed": seed,
                                  "checkpoint_every": config.checkpoint_every,
                                  "crop_size": list(crop_size) if crop_size else None,
                                  "arch": arch, "num_classes": num_classes}},
                    {"data": str(data_dir), "config": str(args.config)},
                    {"checkpoint": str(out_dir / "checkpoint_final.ckpt"),
                     "loss_csv": str(out_dir / "loss.csv")},
                    seed, started)
    print(f"trained {config.max_iterations} iterations; "
          f"final loss {history[-1]:.6f}" if history else "no iterations run")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = _utcnow()
    ckpt = load_checkpoint(args.checkpoint)
    num_classes = ckpt.model.num_classes
    mask_transform = to_binary if num_classes == 2 else None
    load_classes = 3 if num_classes == 2 else num_classes
    try:
        dataset = load_dataset(Path(args.data), _class_map_for(load_classes))
    except (MissingAnnotationError, InvalidLabelError, ValueError) as exc:
        raise InputError(str(exc)) from exc

    report = evaluate(ckpt.model, ckpt.params, dataset,
                      preprocessing=ckpt.preprocessing,
                      mask_transform=mask_transform)
    report_dir = Path(args.report)
    report_dir.mkdir(parents=True, exist_ok=True)
    (report_dir / "report.csv").write_text(report_to_csv(report))
    table = report_to_table(report)
    (report_dir / "report.txt").write_text(table)
    print(table, end="")
    _write_manifest(report_dir / "manifest.json", "evaluate",
                    {"num_classes": num_classes},
                    {"data": str(args.data), "checkpoint": str(args.checkpoint)},
                    {"csv": str(report_dir / "report.csv"),
                     "table": str(report_dir / "report.txt")},
                    ckpt.config.seed, started)
    return EXIT_OK


def cmd_predict(args) -> int:
    started = _utcnow()
    ckpt = load_checkpoint(args.checkpoint)
    image_path = Path(args.image)
    if not image_path.is_file():
        raise InputError(f"image not found: {image_path}")
    try:
        with Image.open(image_path) as im:
            raw = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise InputError(f"unreadable image {image_path}: {exc}") from exc

    mean = np.asarray(ckpt.preprocessing.mean)
    std = np.asarray(ckpt.preprocessing.std)
    standardized = (raw / 255.0 - mean) / std
    logits = forward(ckpt.model, ckpt.params, standardized)
    mask = np.argmax(logits, axis=-1).astype(np.uint8)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask, mode="L").save(out)
    outputs = {"mask": str(out)}
    if args.overlay:
        palette = read_palette(args.palette) if args.palette else DEFAULT_PALETTE
        blended = render_overlay(raw, mask, palette, args.alpha)
        overlay_path = out.with_name(out.stem + "_overlay.png")
        Image.fromarray(np.clip(np.rint(blended), 0, 255).astype(np.uint8)).save(
            overlay_path)
        outputs["overlay"] = str(overlay_path)
    _write_manifest(out.with_name(out.name + ".manifest.json"), "predict",
                    {"overlay": args.overlay, "alpha": args.alpha},
                    {"image": str(image_path), "checkpoint": str(args.checkpoint)},
                    outputs, ckpt.config.seed, started)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="toolseg",
        description="Dilated fully convolutional ResNet segmentation toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="turn classifier weights into a "
                                       "segmentation checkpoint")
    p.add_argument("--weights", required=True,
                   help="parameter directory of the classifier")
    p.add_argument("--classes", required=True, type=int)
    p.add_argument("--output-stride", required=True, type=int, choices=(8, 32))
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", help="train on a sequence dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--binary", action="store_true",
                   help="collapse masks to tool vs background")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="report metrics on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlay", action="store_true")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--palette", default=None)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (InputError, CheckpointIncompatibleError, CorruptCheckpointError,
            MissingAnnotationError, InvalidLabelError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
