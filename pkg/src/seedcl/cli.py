"""Command-line entry points: dataset generation, pretraining, linear
probing, evaluation, learning-rate sweeps, and histogram comparison.

Every command that takes --out writes a run_record.json there (config
snapshot plus status), including on failure. Exit codes: 0 success,
1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import List, Optional

from . import __version__
from .config import default_run_config, load_run_config
from .contrastive import FRAMEWORKS, pretrain
from .errors import ConfigError, IoFailure, SeedclError
from .image import load_png
from .metrics import (
    classification_report,
    color_histogram,
    histogram_rms_difference,
    render_report,
)
from .net import EncoderConfig, HeadSpec
from .params import load_checkpoint
from .probe import (
    ProbeConfig,
    predict_labels,
    split_labels,
    train_probe,
)
from .rng import derive_stream
from .synthgen import (
    ThresholdConfig,
    extract_cutouts,
    generate_dataset,
    generate_toy_cutouts,
    group_cutouts,
    read_manifest,
)


def _labeled_subset_args(args):
    # Default probe budget: 50 labeled images per class, 10 held out.
    fraction = args.fraction
    per_class = args.per_class
    per_class_val = args.per_class_val
    if fraction is None and per_class is None:
        per_class = 50
        if per_class_val is None:
            per_class_val = 10
    return fraction, per_class, per_class_val


def _write_run_record(out_dir: Optional[Path], command: str, config: dict, status: str, error: str = "") -> None:
    if out_dir is None:
        return
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        record = {
            "command": command,
            "version": __version__,
            "config": config,
            "status": status,
            "error": error,
            "finished_unix": int(time.time()),
        }
        with open(out_dir / "run_record.json", "w") as fh:
            json.dump(record, fh, indent=2)
    except OSError:
        pass  # the record is best-effort; the primary outputs already failed or succeeded


def _parse_split(text: str):
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError(f"--split expects two comma-separated fractions, got {text!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError as exc:
        raise ConfigError(f"--split fractions must be numbers: {text!r}") from exc


def _load_encoder_checkpoint(path: Path):
    store, meta = load_checkpoint(path)
    if "encoder" not in meta:
        raise ConfigError(f"checkpoint {path} has no encoder description")
    return store, EncoderConfig.from_dict(meta["encoder"]), meta


def _maybe_plot(enabled: bool, out_dir: Path, rows, columns: List[str], stem: str) -> None:
    if not enabled:
        return
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("plotting requested but matplotlib is not installed; skipping", file=sys.stderr)
        return
    fig, ax = plt.subplots()
    xs = [r[0] for r in rows]
    for i, label in enumerate(columns, start=1):
        ax.plot(xs, [r[i] for r in rows], label=label)
    ax.set_xlabel("epoch")
    ax.legend()
    fig.savefig(out_dir / f"{stem}.png", dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# commands


def _cmd_gen_synthetic(args) -> int:
    out_dir = Path(args.out)
    config = {
        "toy_classes": args.toy_classes,
        "cutouts": args.cutouts,
        "per_class": args.per_class,
        "seeds_per_image": args.seeds_per_image,
        "size": args.size,
        "split": args.split,
        "seed": args.seed,
        "base_size": args.base_size,
        "allow_overlap": not args.no_overlap,
        "rotate": not args.no_rotate,
    }
    try:
        split_ratio = _parse_split(args.split)
        if (args.toy_classes is None) == (args.cutouts is None):
            raise ConfigError("give exactly one of --toy-classes or --cutouts")
        if args.toy_classes is not None:
            rng = derive_stream(args.seed, "toy")
            cutouts = group_cutouts(
                generate_toy_cutouts(args.toy_classes, args.cutouts_per_class, rng, base_size=args.base_size)
            )
        else:
            cutouts = {}
            root = Path(args.cutouts)
            classes = sorted(p.name for p in root.iterdir() if p.is_dir())
            if not classes:
                raise ConfigError(f"no class directories under {root}")
            for label in classes:
                photos = [load_png(p) for p in sorted((root / label).glob("*.png"))]
                if not photos:
                    raise ConfigError(f"no PNG photos under {root / label}")
                cutouts[label] = extract_cutouts(photos, ThresholdConfig(), class_label=label)
        manifest = generate_dataset(
            cutouts,
            per_class=args.per_class,
            seeds_per_image=args.seeds_per_image,
            canvas_size=(args.size, args.size),
            split_ratio=split_ratio,
            out_dir=out_dir,
            master_seed=args.seed,
            rotate=not args.no_rotate,
            allow_overlap=not args.no_overlap,
        )
    except SeedclError as exc:
        _write_run_record(out_dir, "gen-synthetic", config, "failed", str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _write_run_record(out_dir, "gen-synthetic", config, "success")
    counts = {s: len(manifest.split_records(s)) for s in ("train", "val")}
    print(
        f"wrote {len(manifest.records)} images over {len(manifest.class_names)} classes "
        f"to {out_dir} (train {counts['train']}, val {counts['val']})"
    )
    return 0


def _cmd_pretrain(args) -> int:
    out_dir = Path(args.out)
    try:
        if args.config:
            run = load_run_config(args.config, framework=args.framework, master_seed=args.seed)
        else:
            run = default_run_config(framework=args.framework, profile=args.profile, master_seed=args.seed or 0)
        if args.epochs is not None:
            run.train.epochs = args.epochs
        if args.batch_size is not None:
            run.train.batch_size = args.batch_size
        if args.lr is not None:
            run.train.learning_rate = args.lr
    except SeedclError as exc:
        _write_run_record(out_dir, "pretrain", {"args": vars(args)}, "failed", str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 1
    config = run.to_dict()
    try:
        manifest = read_manifest(Path(args.data) / "manifest.jsonl" if Path(args.data).is_dir() else args.data)
        result = pretrain(manifest, run.framework, run.train, run.encoder, run.policy, out_dir=out_dir)
    except SeedclError as exc:
        _write_run_record(out_dir, "pretrain", config, "failed", str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _write_run_record(out_dir, "pretrain", config, "success")
    _maybe_plot(args.plot, out_dir, [(e, m) for e, m in result.epoch_means], ["mean_loss"], "loss_curve")
    final = result.epoch_means[-1][1]
    print(f"pretrained {args.framework} for {run.train.epochs} epochs; final mean loss {final:.4f}")
    print(f"checkpoint: {result.checkpoint_dir}")
    return 0


def _cmd_probe(args) -> int:
    out_dir = Path(args.out)
    config = {"args": {k: v for k, v in vars(args).items() if k != "func"}}
    try:
        store, encoder_config, _ = _load_encoder_checkpoint(Path(args.ckpt))
        manifest = read_manifest(Path(args.data) / "manifest.jsonl" if Path(args.data).is_dir() else args.data)
        fraction, per_class, per_class_val = _labeled_subset_args(args)
        split = split_labels(
            manifest,
            fraction=fraction,
            per_class=per_class,
            per_class_val=per_class_val,
            seed=args.seed,
        )
        lr = "auto" if args.lr is None else args.lr
        probe_config = ProbeConfig(epochs=args.epochs, learning_rate=lr, batch_size=args.batch_size, seed=args.seed)
        result = train_probe(store, encoder_config, manifest, split, probe_config, out_dir=out_dir)
    except SeedclError as exc:
        _write_run_record(out_dir, "probe", config, "failed", str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _write_run_record(out_dir, "probe", config, "success")
    _maybe_plot(
        args.plot,
        out_dir,
        result.curves,
        ["train_acc", "train_loss", "val_acc", "val_loss"],
        "probe_curves",
    )
    print(
        f"probe trained on {len(split.train_records)} labeled images "
        f"(lr {result.learning_rate:.3g}); final val accuracy {result.final_val_accuracy:.4f}"
    )
    print(f"checkpoint: {result.checkpoint_dir}")
    return 0


def _cmd_eval(args) -> int:
    out_dir = Path(args.report_out) if args.report_out else None
    config = {"args": {k: v for k, v in vars(args).items() if k != "func"}}
    try:
        store, encoder_config, _ = _load_encoder_checkpoint(Path(args.ckpt))
        clf, clf_meta = load_checkpoint(Path(args.probe))
        if "classifier" not in clf_meta or "classes" not in clf_meta:
            raise ConfigError(f"{args.probe} does not look like a probe checkpoint")
        clf_spec = HeadSpec.from_dict(clf_meta["classifier"])
        class_names = list(clf_meta["classes"])
        manifest = read_manifest(Path(args.data) / "manifest.jsonl" if Path(args.data).is_dir() else args.data)
        records = manifest.split_records(args.split)
        if not records:
            raise ConfigError(f"manifest has no {args.split!r} records")
        images = [load_png(manifest.resolve(r)) for r in records]
        y_true = [r.class_label for r in records]
        y_pred = predict_labels(store, encoder_config, clf, clf_spec, images, class_names)
        report = classification_report(y_true, y_pred, class_names)
    except SeedclError as exc:
        _write_run_record(out_dir, "eval", config, "failed", str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 1
    text = render_report(report)
    print(text, end="")
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "report.txt").write_text(text)
            (out_dir / "report.json").write_text(report.to_json() + "\n")
        except OSError as exc:
            _write_run_record(out_dir, "eval", config, "failed", str(exc))
            print(f"error: cannot write reports: {exc}", file=sys.stderr)
            return 1
        _write_run_record(out_dir, "eval", config, "success")
    return 0


def _cmd_lr_find(args) -> int:
    out_dir = Path(args.out)
    config = {"args": {k: v for k, v in vars(args).items() if k != "func"}}
    try:
        from .net import classifier_head_spec
        from .probe import (
            _classifier_lr_eval,
            _labels_to_ints,
            _load_records,
            encode_in_batches,
            lr_find,
            write_lr_csv,
        )

        store, encoder_config, _ = _load_encoder_checkpoint(Path(args.ckpt))
        manifest = read_manifest(Path(args.data) / "manifest.jsonl" if Path(args.data).is_dir() else args.data)
        fraction, per_class, per_class_val = _labeled_subset_args(args)
        split = split_labels(
            manifest,
            fraction=fraction,
            per_class=per_class,
            per_class_val=per_class_val,
            seed=args.seed,
        )
        images = _load_records(manifest, split.train_records)
        features = encode_in_batches(store, images, encoder_config)
        labels = _labels_to_ints(split.train_records, split.class_names)
        spec = classifier_head_spec(encoder_config, len(split.class_names))
        result = lr_find(
            _classifier_lr_eval(features, labels, spec, args.seed),
            lr_min=args.lr_min,
            lr_max=args.lr_max,
            num_steps=args.steps,
        )
        out_dir.mkdir(parents=True, exist_ok=True)
        write_lr_csv(out_dir / "lr_sweep.csv", result)
    except SeedclError as exc:
        _write_run_record(out_dir, "lr-find", config, "failed", str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _write_run_record(out_dir, "lr-find", config, "success")
    print(f"suggested learning rate: {result.suggested_lr:.6g}")
    return 0


def _cmd_hist_compare(args) -> int:
    try:
        img_a = load_png(args.image_a)
        img_b = load_png(args.image_b)
        rms = histogram_rms_difference(color_histogram(img_a), color_histogram(img_b))
    except SeedclError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{rms:.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seedcl", description="Synthetic seed imagery and contrastive pretraining")
    parser.add_argument("--version", action="version", version=f"seedcl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="compose a randomized dataset from cutouts")
    g.add_argument("--toy-classes", type=int, default=None, help="generate N procedural cutout classes")
    g.add_argument("--cutouts", default=None, help="directory of per-class photo folders to extract cutouts from")
    g.add_argument("--cutouts-per-class", type=int, default=12, help="procedural cutouts per toy class")
    g.add_argument("--per-class", type=int, default=1000, help="composed images per class")
    g.add_argument("--seeds-per-image", type=int, default=50)
    g.add_argument("--size", type=int, default=224, help="canvas side in pixels")
    g.add_argument("--split", default="0.8,0.2", help="train,val fractions")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--base-size", type=int, default=16, help="toy cutout base diameter in pixels")
    g.add_argument("--no-overlap", action="store_true", help="retry placements that overlap previous seeds")
    g.add_argument("--no-rotate", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_synthetic)

    p = sub.add_parser("pretrain", help="self-supervised pretraining on a generated dataset")
    p.add_argument("--framework", required=True, choices=list(FRAMEWORKS))
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--out", required=True)
    p.add_argument("--profile", default="desk", choices=["desk", "reference"])
    p.add_argument("--config", default=None, help="JSON config overriding the profile")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--plot", action="store_true", help="write loss_curve.png (needs matplotlib)")
    p.set_defaults(func=_cmd_pretrain)

    r = sub.add_parser("probe", help="linear evaluation on a frozen checkpoint")
    r.add_argument("--ckpt", required=True, help="pretraining checkpoint directory")
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--fraction", type=float, default=None, help="labeled fraction of each class")
    r.add_argument("--per-class", type=int, default=None, help="labeled images per class")
    r.add_argument("--per-class-val", type=int, default=None)
    r.add_argument("--epochs", type=int, default=100)
    r.add_argument("--batch-size", type=int, default=32)
    r.add_argument("--lr", type=float, default=None, help="fixed probe rate (default: sweep)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--plot", action="store_true", help="write probe_curves.png (needs matplotlib)")
    r.set_defaults(func=_cmd_probe)

    e = sub.add_parser("eval", help="classification report for a probe on a manifest split")
    e.add_argument("--ckpt", required=True, help="pretraining checkpoint directory")
    e.add_argument("--probe", required=True, help="probe checkpoint directory")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=["train", "val", "test"])
    e.add_argument("--report-out", default=None, help="directory for report.txt / report.json")
    e.set_defaults(func=_cmd_eval)

    f = sub.add_parser("lr-find", help="geometric learning-rate sweep for the probe")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--fraction", type=float, default=None)
    f.add_argument("--per-class", type=int, default=None)
    f.add_argument("--per-class-val", type=int, default=None)
    f.add_argument("--lr-min", type=float, default=1e-5)
    f.add_argument("--lr-max", type=float, default=10.0)
    f.add_argument("--steps", type=int, default=40)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=_cmd_lr_find)

    h = sub.add_parser("hist-compare", help="RMS difference between two images' color histograms")
    h.add_argument("image_a")
    h.add_argument("image_b")
    h.set_defaults(func=_cmd_hist_compare)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SeedclError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
