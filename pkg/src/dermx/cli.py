"""Command-line pipeline: prepare | train | evaluate | explain | report.

Every directory-producing command stages its files in a temporary sibling
directory and commits them only on success, so failures leave no partial
output behind. Each output directory carries exactly one ``manifest.json``
recording the command, an effective-config digest, seeds, input/output
paths and artifact checksums; reruns with identical inputs reproduce the
digest (timestamps aside).

Set ``DERMX_DETERMINISTIC=1`` to force single-threaded deterministic torch
kernels.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import metrics as mx
from . import training as tr
from . import xai
from .augment import AugmentationPolicy
from .errors import ConfigError, DermxError, ValidationError
from .labels import CLASS_NAMES, NUM_CLASSES, ClassLabel
from .models import ModelConfig, build_classifier, load_checkpoint
from .training import ADAM_BETAS, ADAM_EPS

DETERMINISTIC_ENV = "DERMX_DETERMINISTIC"


def _digest(data: dict) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@contextmanager
def staged_output(out_dir: str | Path):
    """Yield a staging directory; commit its contents into out_dir on success."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.stage-", dir=out_dir.parent))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    out_dir.mkdir(exist_ok=True)
    for item in sorted(stage.iterdir()):
        target = out_dir / item.name
        if target.is_dir():
            shutil.rmtree(target)
        elif target.exists():
            target.unlink()
        os.replace(item, target)
    stage.rmdir()


def write_run_manifest(directory: Path, command: str, config_digest: str,
                       seeds: dict, inputs: dict, extra: dict | None = None) -> None:
    """Record the run into <directory>/manifest.json with artifact checksums."""
    checksums = {}
    for path in sorted(directory.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            checksums[str(path.relative_to(directory))] = _sha256_file(path)
    manifest = {
        "command": command,
        "config_digest": config_digest,
        "seeds": seeds,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": sorted(checksums),
        "checksums": checksums,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _require_path(path: Path, kind: str) -> Path:
    if not path.exists():
        raise ValidationError(f"{kind} not found: {path}")
    return path


# ---------------------------------------------------------------- prepare ----

def cmd_prepare(args) -> int:
    metadata_path = _require_path(Path(args.metadata), "metadata CSV")
    if not args.metadata_only:
        if args.images is None:
            raise ValidationError("--images is required unless --metadata-only is set")
        _require_path(Path(args.images), "image directory")
    image_root = Path(args.images) if args.images else Path(".")

    ratios = tuple(args.ratios)
    records = ds.parse_metadata(metadata_path.read_text(), image_root)
    manifest = ds.stratified_split(records, ratios=ratios, seed=args.seed)

    with staged_output(args.out) as stage:
        ds.write_split_report_csv(manifest, stage / "split_report.csv")
        if args.metadata_only:
            (stage / "split_manifest.json").write_text(manifest.to_json() + "\n")
        else:
            ds.export_archive(manifest, records, stage, side=args.side)
        settings = {"ratios": list(ratios), "seed": args.seed, "side": args.side,
                    "metadata_only": bool(args.metadata_only)}
        write_run_manifest(
            stage, "prepare", _digest(settings), seeds={"split": args.seed},
            inputs={"metadata": metadata_path, "images": image_root},
            extra={"settings": settings, "class_counts": manifest.class_counts,
                   "partition_sizes": manifest.partition_sizes()},
        )
    print(f"prepared split over {len(records)} records -> {args.out}")
    return 0


# ------------------------------------------------------------------ train ----

def cmd_train(args) -> int:
    config = ModelConfig.from_file(_require_path(Path(args.config), "config file"))
    if config.epochs < 1:
        raise ConfigError("no training epochs")

    if args.no_augment:
        policy = None
    elif args.policy:
        policy = AugmentationPolicy.from_file(_require_path(Path(args.policy), "policy file"))
    else:
        policy = AugmentationPolicy()

    data_dir = _require_path(Path(args.data), "data directory")
    train_images, train_labels = ds.load_archive(_require_path(data_dir / "train.npz",
                                                               "train archive"))
    val_images, val_labels = ds.load_archive(_require_path(data_dir / "val.npz",
                                                           "val archive"))

    handle = build_classifier(config, weights=args.weights)
    with staged_output(args.out) as stage:
        result = tr.train(
            handle, train_images, train_labels, val_images, val_labels, config,
            policy=policy, out_dir=stage,
            log=lambda s: print(
                f"epoch {s.epoch}/{config.epochs} loss {s.train_loss:.4f} "
                f"val_loss {s.val_loss:.4f} val_acc {s.val_accuracy:.4f} lr {s.learning_rate:.2e}"
            ),
        )
        tr.write_history_csv(result.history, stage / "history.csv")
        write_run_manifest(
            stage, "train", config.digest(),
            seeds={"model": config.seed, "train": config.seed},
            inputs={"config": args.config, "data": data_dir},
            extra={
                "config": config.to_dict(),
                "weights_source": args.weights,
                "augmentation": None if policy is None else json.loads(policy.to_json()),
                "optimizer": {"name": "adam", "betas": list(ADAM_BETAS), "eps": ADAM_EPS},
                "normalization": {
                    "mean": handle.net.input_mean.flatten().tolist(),
                    "std": handle.net.input_std.flatten().tolist(),
                },
                "best_epoch": result.best_epoch,
                "best_val_accuracy": max(s.val_accuracy for s in result.history),
                "environment": {"torch_deterministic": os.environ.get(DETERMINISTIC_ENV) == "1"},
            },
        )
    print(f"trained {config.backbone} for {config.epochs} epochs -> {args.out}")
    return 0


# --------------------------------------------------------------- evaluate ----

def cmd_evaluate(args) -> int:
    handle, meta = load_checkpoint(_require_path(Path(args.checkpoint), "checkpoint"))
    data_dir = _require_path(Path(args.data), "data directory")
    archive = _require_path(data_dir / f"{args.partition}.npz", f"{args.partition} archive")
    images, labels = ds.load_archive(archive)
    if len(images) == 0:
        raise ValidationError(f"partition {args.partition!r} is empty")
    if labels.max(initial=0) >= handle.config.num_classes:
        raise ValidationError(
            f"data contains class index {int(labels.max())} but the checkpoint "
            f"has {handle.config.num_classes} classes"
        )

    predictions = handle.predict(images)
    report = mx.report_from_predictions(labels, predictions,
                                        num_classes=handle.config.num_classes)

    with staged_output(args.out) as stage:
        payload = {"model": handle.config.backbone, "partition": args.partition}
        payload.update(report.to_dict())
        (stage / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
        report.to_csv(stage / "report.csv")
        mx.confusion_to_csv(report.confusion, stage / "confusion_matrix.csv")
        mx.render_confusion_heatmap(report.confusion, stage / "confusion_matrix.png")
        write_run_manifest(
            stage, "evaluate", _digest({"checkpoint": str(args.checkpoint),
                                        "partition": args.partition}),
            seeds={"model": handle.config.seed},
            inputs={"checkpoint": args.checkpoint, "data": data_dir},
            extra={"model": handle.config.backbone, "partition": args.partition,
                   "accuracy": float(report.accuracy)},
        )
    print(f"evaluated {args.partition}: accuracy {report.accuracy:.4f} -> {args.out}")
    return 0


# ---------------------------------------------------------------- explain ----

def _parse_target_class(spec: str, probs: np.ndarray) -> int:
    if spec == "auto":
        return int(np.argmax(probs))
    if spec.isdigit():
        index = int(spec)
        if index >= NUM_CLASSES:
            raise ValidationError(f"class index {index} out of range [0, {NUM_CLASSES})")
        return index
    try:
        return int(ClassLabel[spec.upper()])
    except KeyError:
        raise ValidationError(
            f"unknown class {spec!r}; use auto, an index, or one of {', '.join(CLASS_NAMES)}"
        ) from None


def cmd_explain(args) -> int:
    handle, _meta = load_checkpoint(_require_path(Path(args.checkpoint), "checkpoint"))
    image_path = _require_path(Path(args.image), "image file")
    try:
        image = ds.load_image_file(image_path, side=handle.config.input_side)
    except OSError as exc:
        raise ValidationError(f"cannot load image {image_path}: {exc}") from exc

    probs = handle.forward(image[np.newaxis])[0]
    target = _parse_target_class(args.target_class, probs)

    method = xai.SaliencyMethod(args.method)
    if method is xai.SaliencyMethod.VANILLA_GRAD:
        smap = xai.vanilla_gradient(handle, image, target, image_id=image_path.stem)
    elif method is xai.SaliencyMethod.SMOOTHGRAD:
        smap = xai.smoothgrad(
            handle, image, target,
            params=xai.SmoothGradParams(n_samples=args.n_samples,
                                        noise_sigma=args.noise_sigma, seed=args.seed),
            image_id=image_path.stem,
        )
    else:
        if args.k_channels is None:
            # score_cam defaults to all channels, faster_score_cam to its top-16
            k = None if method is xai.SaliencyMethod.SCORE_CAM else 16
        elif str(args.k_channels).lower() == "all":
            k = None
        else:
            k = int(args.k_channels)
        fn = xai.score_cam if method is xai.SaliencyMethod.SCORE_CAM else xai.faster_score_cam
        smap = fn(handle, image, target, layer=args.layer, k_channels=k,
                  image_id=image_path.stem)

    overlay = xai.render_overlay(image, smap, alpha=args.alpha, colormap=args.colormap)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    xai.save_png(out_path, overlay)
    sidecar = {
        "method": method.value,
        "params": smap.params,
        "alpha": args.alpha,
        "colormap": args.colormap,
        "target_class": {"index": target, "name": ClassLabel(target).name},
        "predicted_probabilities": {name: float(p) for name, p in zip(CLASS_NAMES, probs)},
        "degenerate": smap.degenerate,
        "image": str(image_path),
        "checkpoint": str(args.checkpoint),
    }
    out_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    print(f"explained {image_path.name} ({method.value}, class {ClassLabel(target).name}) "
          f"-> {out_path}")
    return 0


# ----------------------------------------------------------------- report ----

def cmd_report(args) -> int:
    rows = []
    for run in args.run_dirs:
        run_dir = Path(run)
        report_path = run_dir / "report.json"
        if not report_path.exists():
            raise ValidationError(f"no evaluation report in {run_dir} (expected report.json)")
        data = json.loads(report_path.read_text())
        rows.append({
            "run": run_dir.name,
            "model": data.get("model", run_dir.name),
            "accuracy": float(data["accuracy"]),
            "precision": float(data["weighted"]["precision"]),
            "recall": float(data["weighted"]["recall"]),
            "f1": float(data["weighted"]["f1"]),
        })
    rows.sort(key=lambda r: (-r["accuracy"], r["run"]))

    header = ["Model", "Accuracy", "Precision", "Recall", "F1-Score"]
    csv_lines = [",".join(header)]
    md_lines = ["| " + " | ".join(header) + " |",
                "|" + "|".join(["---"] * len(header)) + "|"]
    for r in rows:
        cells = [r["model"], f"{r['accuracy'] * 100:.2f}%", f"{r['precision']:.2f}",
                 f"{r['recall']:.2f}", f"{r['f1']:.2f}"]
        csv_lines.append(",".join(cells))
        md_lines.append("| " + " | ".join(cells) + " |")

    with staged_output(args.out) as stage:
        (stage / "comparison.csv").write_text("\n".join(csv_lines) + "\n")
        (stage / "comparison.md").write_text("\n".join(md_lines) + "\n")
        write_run_manifest(
            stage, "report", _digest({"runs": sorted(str(r) for r in args.run_dirs)}),
            seeds={}, inputs={f"run_{i}": r for i, r in enumerate(args.run_dirs)},
        )
    print("\n".join(md_lines))
    return 0


# ------------------------------------------------------------------- main ----

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dermx",
        description="Skin-lesion classification pipeline: data prep, fine-tuning, "
                    "evaluation and saliency explanations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="split the dataset and export tensor archives")
    p.add_argument("--metadata", required=True, help="HAM10000-style metadata CSV")
    p.add_argument("--images", help="directory of <image_id>.jpg files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", type=float, nargs=3, default=(0.8, 0.1, 0.1),
                   metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--side", type=int, default=ds.DEFAULT_SIDE)
    p.add_argument("--metadata-only", action="store_true",
                   help="write the split without decoding or exporting images")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fine-tune a classifier on prepared archives")
    p.add_argument("--config", required=True, help="model config JSON")
    p.add_argument("--data", required=True, help="directory from `prepare`")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--policy", help="augmentation policy JSON (default: built-in policy)")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--weights", choices=("random", "pretrained"), default="pretrained",
                   help="backbone initialization (default: pretrained)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on one partition")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--partition", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="render a saliency overlay for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--method", required=True,
                   choices=[m.value for m in xai.SaliencyMethod])
    p.add_argument("--class", dest="target_class", default="auto",
                   help="auto, a class index, or a class name (default: auto)")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--layer", help="CAM target layer (default: last conv feature layer)")
    p.add_argument("--k-channels", dest="k_channels",
                   help="channel count for CAM methods, or 'all'")
    p.add_argument("--n-samples", type=int, default=25)
    p.add_argument("--noise-sigma", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.45)
    p.add_argument("--colormap", default="jet")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="merge evaluation reports into a comparison table")
    p.add_argument("run_dirs", nargs="+", metavar="RUN_DIR")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    if os.environ.get(DETERMINISTIC_ENV) == "1":
        import torch

        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DermxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
