"""Linear evaluation on a frozen encoder: label-fraction splitting, probe
training over cached features, a geometric learning-rate sweep, and
prediction helpers for report generation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .contrastive import Adam, Sgd, softmax_cross_entropy
from .errors import (
    AllDiverged,
    ConfigError,
    InsufficientData,
    IoFailure,
    NumericFailure,
    UnknownLabel,
)
from .image import Image, load_png
from .net import (
    EncoderConfig,
    HeadSpec,
    classifier_head_spec,
    encode,
    encoder_backward,
    encoder_forward,
    head_backward,
    head_forward,
    head_kinds_present,
    images_to_input,
    init_params,
    strip_head_and_freeze,
)
from .params import ParamStore, save_checkpoint
from .rng import derive_stream
from .synthgen import DatasetManifest, ManifestRecord


@dataclass
class ProbeSplit:
    """Per-class balanced label subset drawn from the source train split."""

    train_records: List[ManifestRecord]
    val_records: List[ManifestRecord]
    class_names: List[str]

    def counts(self) -> Tuple[int, int]:
        return len(self.train_records), len(self.val_records)


@dataclass
class ProbeConfig:
    epochs: int = 100
    learning_rate: Union[float, str] = "auto"
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("need epochs >= 1 and batch_size >= 1")
        if isinstance(self.learning_rate, str):
            if self.learning_rate != "auto":
                raise ConfigError(f"learning_rate must be a float or 'auto', got {self.learning_rate!r}")
        elif self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def split_labels(
    manifest: DatasetManifest,
    fraction: Optional[float] = None,
    per_class: Optional[int] = None,
    per_class_val: Optional[int] = None,
    seed: int = 0,
) -> ProbeSplit:
    """Draw a balanced labeled subset from the train split of each class.

    With `fraction`, each class contributes ceil(fraction * class_total)
    records (capped at its train count); with `per_class`, exactly that
    many. `per_class_val` of the drawn records become the probe's
    validation set (default: one fifth).
    """
    if (fraction is None) == (per_class is None):
        raise ConfigError("give exactly one of fraction or per_class")
    if fraction is not None and not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    if per_class is not None and per_class < 1:
        raise ConfigError("per_class must be positive")

    train_records: List[ManifestRecord] = []
    val_records: List[ManifestRecord] = []
    for ci, cls in enumerate(manifest.class_names):
        class_all = [r for r in manifest.records if r.class_label == cls]
        class_train = [r for r in class_all if r.split == "train"]
        if fraction is not None:
            take = min(math.ceil(fraction * len(class_all)), len(class_train))
        else:
            take = per_class
        if take < 1 or take > len(class_train):
            raise InsufficientData(
                f"class {cls!r} has {len(class_train)} train records, cannot draw {take}"
            )
        if per_class_val is not None:
            n_val = per_class_val
        else:
            # One fifth held out, but never rounding the val share to nothing.
            n_val = max(take // 5, 1) if take >= 2 else 0
        if n_val < 0 or n_val >= take:
            raise InsufficientData(f"class {cls!r}: cannot hold out {n_val} of {take} drawn records")
        rng = derive_stream(seed, "split", ci)
        picks = rng.choice(len(class_train), size=take, replace=False)
        chosen = [class_train[int(i)] for i in picks]
        train_records.extend(chosen[: take - n_val])
        val_records.extend(chosen[take - n_val :])
    return ProbeSplit(train_records, val_records, list(manifest.class_names))


# ---------------------------------------------------------------------------
# learning-rate sweep


@dataclass
class LrFindResult:
    rows: List[Tuple[float, float, float]]  # (lr, loss, smoothed_loss)
    suggested_lr: float
    baseline_loss: float


def lr_find(
    eval_fn,
    lr_min: float = 1e-5,
    lr_max: float = 10.0,
    num_steps: int = 40,
    smoothing: float = 0.98,
    divergence_factor: float = 4.0,
) -> LrFindResult:
    """Geometric learning-rate sweep with one update per candidate.

    eval_fn(lr) must return the loss after a single plain gradient step of
    size lr taken from the same fixed starting point; eval_fn(0.0) is the
    unstepped baseline. The sweep stops once the bias-corrected smoothed
    loss exceeds divergence_factor times the best seen, and suggests the
    rate with the steepest smoothed descent. Raises AllDiverged when every
    candidate raises the loss above the baseline.
    """
    if not 0.0 < lr_min < lr_max:
        raise ConfigError("need 0 < lr_min < lr_max")
    if num_steps < 2:
        raise ConfigError("num_steps must be >= 2")
    baseline = float(eval_fn(0.0))
    lrs = np.geomspace(lr_min, lr_max, num_steps)
    rows: List[Tuple[float, float, float]] = []
    ema = 0.0
    best = math.inf
    for t, lr in enumerate(lrs):
        loss = float(eval_fn(float(lr)))
        if not math.isfinite(loss):
            loss = math.inf
        ema = smoothing * ema + (1.0 - smoothing) * min(loss, 1e30)
        smoothed = ema / (1.0 - smoothing ** (t + 1))
        rows.append((float(lr), loss, smoothed))
        if smoothed > divergence_factor * best:
            break
        best = min(best, smoothed)
    if all(loss >= baseline for _, loss, _ in rows):
        raise AllDiverged(f"no learning rate in [{lr_min}, {lr_max}] reduced the loss")
    drops = [rows[i][2] - rows[i - 1][2] for i in range(1, len(rows))]
    suggested = rows[1 + int(np.argmin(drops))][0]
    return LrFindResult(rows=rows, suggested_lr=suggested, baseline_loss=baseline)


def write_lr_csv(path: Union[str, Path], result: LrFindResult) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lr", "loss", "smoothed_loss"])
            for lr, loss, smoothed in result.rows:
                writer.writerow([f"{lr:.10g}", f"{loss:.10g}", f"{smoothed:.10g}"])
    except OSError as exc:
        raise IoFailure(f"cannot write sweep log {path}: {exc}") from exc


def _classifier_lr_eval(features, labels, clf_spec, seed):
    base = _init_classifier(clf_spec, seed)

    def eval_fn(lr: float) -> float:
        store = base.copy()
        logits, cache = head_forward(store, clf_spec, features, want_cache=True)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        if lr == 0.0:
            return loss
        grads, _ = head_backward(store, clf_spec, cache, dlogits)
        Sgd(store, lr).step(grads)
        logits, _ = head_forward(store, clf_spec, features, want_cache=False)
        return softmax_cross_entropy(logits, labels)[0]

    return eval_fn


# ---------------------------------------------------------------------------
# probe training


@dataclass
class ProbeResult:
    curves: List[Tuple[int, float, float, float, float]]
    classifier: ParamStore
    classifier_spec: HeadSpec
    encoder: ParamStore
    class_names: List[str]
    learning_rate: float
    checkpoint_dir: Optional[Path] = None
    lr_sweep: Optional[LrFindResult] = None

    @property
    def final_val_accuracy(self) -> float:
        return self.curves[-1][3]

    @property
    def final_train_accuracy(self) -> float:
        return self.curves[-1][1]


def write_curves_csv(path: Union[str, Path], curves) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_acc", "train_loss", "val_acc", "val_loss"])
            for epoch, tr_acc, tr_loss, va_acc, va_loss in curves:
                writer.writerow(
                    [epoch, f"{tr_acc:.10g}", f"{tr_loss:.10g}", f"{va_acc:.10g}", f"{va_loss:.10g}"]
                )
    except OSError as exc:
        raise IoFailure(f"cannot write curve log {path}: {exc}") from exc


def _init_classifier(spec: HeadSpec, seed: int) -> ParamStore:
    rng = derive_stream(seed, "init", 7)
    store = ParamStore()
    limit = np.sqrt(6.0 / spec.in_dim)
    store.add(
        f"{spec.param_prefix()}fc0.w",
        rng.uniform(-limit, limit, size=(spec.in_dim, spec.out_dim)).astype(np.float32),
    )
    store.add(f"{spec.param_prefix()}fc0.b", np.zeros(spec.out_dim, dtype=np.float32))
    return store


def _labels_to_ints(records: Sequence[ManifestRecord], class_names: Sequence[str]) -> np.ndarray:
    index = {c: i for i, c in enumerate(class_names)}
    out = []
    for r in records:
        if r.class_label not in index:
            raise UnknownLabel(f"record label {r.class_label!r} not in {list(class_names)}")
        out.append(index[r.class_label])
    return np.asarray(out, dtype=np.int64)


def encode_in_batches(
    params: ParamStore, images: Sequence[Image], config: EncoderConfig, batch_size: int = 256
) -> np.ndarray:
    chunks = []
    for start in range(0, len(images), batch_size):
        chunks.append(encode(params, images[start : start + batch_size], config))
    return np.concatenate(chunks, axis=0)


def _load_records(manifest: DatasetManifest, records: Sequence[ManifestRecord]) -> List[Image]:
    return [load_png(manifest.resolve(r)) for r in records]


def train_probe(
    encoder_store: ParamStore,
    encoder_config: EncoderConfig,
    manifest: DatasetManifest,
    split: ProbeSplit,
    config: ProbeConfig,
    out_dir: Optional[Union[str, Path]] = None,
    train_images: Optional[Sequence[Image]] = None,
    val_images: Optional[Sequence[Image]] = None,
) -> ProbeResult:
    """Fit a linear classifier on frozen-encoder features.

    Any heads still attached to the store are stripped first; the encoder
    itself is never updated. With learning_rate='auto' a sweep picks the
    probe's rate before training.
    """
    store = encoder_store
    for kind in head_kinds_present(store):
        store = strip_head_and_freeze(store, kind)
    if store is encoder_store:
        store = encoder_store.copy()
        store.freeze_all()

    if train_images is None:
        train_images = _load_records(manifest, split.train_records)
    if val_images is None:
        val_images = _load_records(manifest, split.val_records)
    if not train_images or not val_images:
        raise InsufficientData("probe needs non-empty train and val record sets")

    y_train = _labels_to_ints(split.train_records, split.class_names)
    y_val = _labels_to_ints(split.val_records, split.class_names)
    f_train = encode_in_batches(store, train_images, encoder_config)
    f_val = encode_in_batches(store, val_images, encoder_config)

    clf_spec = classifier_head_spec(encoder_config, len(split.class_names))
    sweep = None
    lr = config.learning_rate
    if lr == "auto":
        sweep = lr_find(_classifier_lr_eval(f_train, y_train, clf_spec, config.seed))
        lr = sweep.suggested_lr
    clf = _init_classifier(clf_spec, config.seed)
    opt = Adam(clf, lr)
    shuffle_rng = derive_stream(config.seed, "shuffle", 1)

    n = f_train.shape[0]
    batch = min(config.batch_size, n)
    steps = max(1, n // batch)
    curves: List[Tuple[int, float, float, float, float]] = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for step in range(steps):
            idx = order[step * batch : step * batch + batch]
            logits, cache = head_forward(clf, clf_spec, f_train[idx], want_cache=True)
            loss, dlogits = softmax_cross_entropy(logits, y_train[idx])
            if not math.isfinite(loss):
                raise NumericFailure(f"non-finite probe loss at epoch {epoch} step {step}")
            grads, _ = head_backward(clf, clf_spec, cache, dlogits)
            opt.step(grads)
        tr_loss, tr_acc = _eval_classifier(clf, clf_spec, f_train, y_train)
        va_loss, va_acc = _eval_classifier(clf, clf_spec, f_val, y_val)
        curves.append((epoch, tr_acc, tr_loss, va_acc, va_loss))

    result = ProbeResult(
        curves=curves,
        classifier=clf,
        classifier_spec=clf_spec,
        encoder=store,
        class_names=list(split.class_names),
        learning_rate=float(lr),
        lr_sweep=sweep,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_curves_csv(out / "probe_curves.csv", curves)
        if sweep is not None:
            write_lr_csv(out / "lr_sweep.csv", sweep)
        meta = {
            "kind": "linear_probe",
            "classes": list(split.class_names),
            "classifier": clf_spec.to_dict(),
            "encoder": encoder_config.to_dict(),
            "learning_rate": float(lr),
            "probe_config": config.to_dict(),
        }
        ckpt = out / "probe_checkpoint"
        save_checkpoint(clf, ckpt, meta)
        result.checkpoint_dir = ckpt
    return result


def _eval_classifier(clf, spec, features, labels) -> Tuple[float, float]:
    logits, _ = head_forward(clf, spec, features, want_cache=False)
    loss, _ = softmax_cross_entropy(logits, labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return loss, acc


def predict_labels(
    encoder_store: ParamStore,
    encoder_config: EncoderConfig,
    classifier: ParamStore,
    classifier_spec: HeadSpec,
    images: Sequence[Image],
    class_names: Sequence[str],
) -> List[str]:
    """Classify images with a frozen encoder plus trained linear head."""
    feats = encode_in_batches(encoder_store, images, encoder_config)
    logits, _ = head_forward(classifier, classifier_spec, feats, want_cache=False)
    picks = np.argmax(logits, axis=1)
    return [class_names[int(i)] for i in picks]


def supervised_finetune(
    encoder_store: ParamStore,
    encoder_config: EncoderConfig,
    manifest: DatasetManifest,
    split: ProbeSplit,
    config: ProbeConfig,
) -> ProbeResult:
    """Train encoder and classifier jointly on the labeled subset.

    A supervised reference point: identical data path to the probe but
    with the encoder unfrozen and re-encoded every step.
    """
    store = encoder_store
    for kind in head_kinds_present(store):
        store = strip_head_and_freeze(store, kind)
    store = store.copy()
    store.unfreeze_all()

    train_images = _load_records(manifest, split.train_records)
    val_images = _load_records(manifest, split.val_records)
    y_train = _labels_to_ints(split.train_records, split.class_names)
    y_val = _labels_to_ints(split.val_records, split.class_names)

    clf_spec = classifier_head_spec(encoder_config, len(split.class_names))
    lr = config.learning_rate if config.learning_rate != "auto" else 1e-3
    clf = _init_classifier(clf_spec, config.seed)
    joint = store.copy()
    for name in clf.names():
        joint.add(name, clf[name])
    opt = Adam(joint, lr)
    shuffle_rng = derive_stream(config.seed, "shuffle", 1)

    x_train = images_to_input(train_images)
    n = len(train_images)
    batch = min(config.batch_size, n)
    steps = max(1, n // batch)
    curves = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for step in range(steps):
            idx = order[step * batch : step * batch + batch]
            feats, enc_cache = encoder_forward(joint, x_train[idx], encoder_config, want_cache=True)
            logits, head_cache = head_forward(joint, clf_spec, feats, want_cache=True)
            loss, dlogits = softmax_cross_entropy(logits, y_train[idx])
            if not math.isfinite(loss):
                raise NumericFailure(f"non-finite loss at epoch {epoch} step {step}")
            grads, dfeats = head_backward(joint, clf_spec, head_cache, dlogits)
            grads.update(encoder_backward(joint, encoder_config, enc_cache, dfeats))
            opt.step(grads)
        f_train = encode_in_batches(joint, train_images, encoder_config)
        f_val = encode_in_batches(joint, val_images, encoder_config)
        tr_loss, tr_acc = _eval_classifier(joint, clf_spec, f_train, y_train)
        va_loss, va_acc = _eval_classifier(joint, clf_spec, f_val, y_val)
        curves.append((epoch, tr_acc, tr_loss, va_acc, va_loss))

    return ProbeResult(
        curves=curves,
        classifier=joint.subset([n for n in joint.names() if n.startswith("head.")]),
        classifier_spec=clf_spec,
        encoder=joint,
        class_names=list(split.class_names),
        learning_rate=float(lr),
    )
