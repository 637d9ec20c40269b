"""Contrastive pretraining: NT-Xent, queue-based InfoNCE, and
bootstrap-style latent regression, with the shared momentum/EMA update,
an Adam optimizer, and the framework-dispatching training loop.

All losses take raw (unnormalized) projections and return analytic
gradients with respect to the gradient-bearing path only: both views for
NT-Xent, the query path for InfoNCE, the prediction path for the
bootstrap loss.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .augment import AugmentationPolicy, make_views
from .errors import (
    BatchTooLarge,
    ConfigError,
    EmptyQueue,
    IoFailure,
    NumericFailure,
    ShapeMismatch,
    ZeroVector,
)
from .image import Image, load_png
from .net import (
    EncoderConfig,
    HeadSpec,
    default_head_specs,
    encoder_backward,
    encoder_forward,
    head_backward,
    head_forward,
    images_to_input,
    init_params,
)
from .params import ParamStore, save_checkpoint
from .rng import derive_stream
from .synthgen import DatasetManifest

FRAMEWORKS = ("simclr", "moco", "byol")


@dataclass
class FrameworkConfig:
    framework: str = "simclr"
    temperature: float = 0.5
    momentum: float = 0.999
    queue_capacity: int = 256
    ema_decay: float = 0.99
    symmetrize_byol: bool = False
    independent_target_init: bool = False

    def __post_init__(self):
        if self.framework not in FRAMEWORKS:
            raise ConfigError(f"unknown framework {self.framework!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum must lie in [0, 1]")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must lie in [0, 1]")
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FrameworkConfig":
        return cls(**d)


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 192
    master_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("need epochs >= 1 and batch_size >= 2")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be positive, weight_decay non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# normalization helpers


def normalize_rows(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Unit-normalize each row; raises ZeroVector on an all-zero row."""
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVector(f"cannot normalize zero row(s) {np.flatnonzero(norms == 0.0).tolist()}")
    return x / norms[:, None], norms


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def _normalize_backward(dz_hat: np.ndarray, z_hat: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # d/dz of z/||z||: project out the radial component, scale by 1/||z||
    radial = np.sum(dz_hat * z_hat, axis=1, keepdims=True)
    return (dz_hat - z_hat * radial) / norms[:, None]


# ---------------------------------------------------------------------------
# losses


def nt_xent_loss(z: np.ndarray, temperature: float) -> Tuple[float, np.ndarray]:
    """Normalized-temperature cross entropy over an interleaved view batch.

    Rows 2i and 2i+1 are the two views of sample i. Every anchor row
    attracts its partner and repels all other 2N-1 rows. Returns the mean
    loss over all 2N anchors and d(loss)/dz.
    """
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2 != 0:
        raise ShapeMismatch(f"expected an even number (>= 2) of projection rows, got {z.shape}")
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    n_rows = z.shape[0]
    u, norms = normalize_rows(z)
    sims = (u @ u.T) / temperature
    np.fill_diagonal(sims, -np.inf)

    partner = np.arange(n_rows) ^ 1
    row_max = np.max(sims, axis=1, keepdims=True)
    shifted = sims - row_max
    exp = np.exp(shifted)
    np.fill_diagonal(exp, 0.0)
    denom = np.sum(exp, axis=1)
    log_prob_pos = shifted[np.arange(n_rows), partner] - np.log(denom)
    loss = float(-np.mean(log_prob_pos))

    probs = exp / denom[:, None]
    target = np.zeros_like(probs)
    target[np.arange(n_rows), partner] = 1.0
    dsims = (probs - target) / n_rows
    du = ((dsims + dsims.T) @ u) / temperature
    dz = _normalize_backward(du, u, norms)
    return loss, dz


def moco_info_nce(
    q: np.ndarray, k_pos: np.ndarray, negatives: np.ndarray, temperature: float
) -> Tuple[float, np.ndarray]:
    """InfoNCE over one positive key per query plus a bank of negatives.

    `negatives` holds unit-norm key vectors (e.g. KeyQueue.vectors()).
    Gradient flows to the queries only.
    """
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    if negatives.ndim != 2 or negatives.shape[0] == 0:
        raise EmptyQueue("InfoNCE needs at least one negative key")
    if q.shape != k_pos.shape or q.shape[1] != negatives.shape[1]:
        raise ShapeMismatch(
            f"queries {q.shape}, keys {k_pos.shape}, negatives {negatives.shape} disagree"
        )
    loss, dq, _ = _info_nce_core(q, k_pos, negatives, None, temperature)
    return loss, dq


def moco_info_nce_batch(
    q: np.ndarray,
    k_pos: np.ndarray,
    queue: "KeyQueue",
    own_positions: np.ndarray,
    temperature: float,
) -> Tuple[float, np.ndarray]:
    """InfoNCE against the queue buffer with each query's own slot masked.

    Used by the training loop after pushing the batch keys: the queue then
    contains each query's positive, which must not double as a negative.
    """
    negatives = queue._buffer_rows()
    loss, dq, _ = _info_nce_core(q, k_pos, negatives, own_positions, temperature)
    return loss, dq


def _info_nce_core(q, k_pos, negatives, mask_positions, temperature):
    q_hat, q_norms = normalize_rows(q)
    k_hat, _ = normalize_rows(k_pos)
    batch = q.shape[0]
    pos_logit = np.sum(q_hat * k_hat, axis=1, keepdims=True)
    neg_logits = q_hat @ negatives.T
    logits = np.concatenate([pos_logit, neg_logits], axis=1) / temperature
    if mask_positions is not None:
        logits[np.arange(batch), 1 + np.asarray(mask_positions)] = -np.inf
    row_max = np.max(logits, axis=1, keepdims=True)
    shifted = logits - row_max
    exp = np.exp(shifted)
    denom = np.sum(exp, axis=1)
    loss = float(-np.mean(shifted[:, 0] - np.log(denom)))

    probs = exp / denom[:, None]
    dlogits = probs.copy()
    dlogits[:, 0] -= 1.0
    dlogits /= batch * temperature
    dq_hat = dlogits[:, :1] * k_hat + dlogits[:, 1:] @ negatives
    dq = _normalize_backward(dq_hat, q_hat, q_norms)
    return loss, dq, logits


def byol_loss(p: np.ndarray, z_target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean normalized squared error 2 - 2*cos(p, z); gradient w.r.t. p only."""
    if p.shape != z_target.shape or p.ndim != 2:
        raise ShapeMismatch(f"prediction {p.shape} and target {z_target.shape} must match")
    p_hat, p_norms = normalize_rows(p)
    z_hat, _ = normalize_rows(z_target)
    batch = p.shape[0]
    cos = np.sum(p_hat * z_hat, axis=1)
    loss = float(np.mean(2.0 - 2.0 * cos))
    dp_hat = -2.0 * z_hat / batch
    dp = _normalize_backward(dp_hat, p_hat, p_norms)
    return loss, dp


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross entropy over integer labels; returns (loss, dlogits)."""
    if logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise ShapeMismatch(f"logits {logits.shape} vs labels {labels.shape}")
    batch = logits.shape[0]
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = np.sum(exp, axis=1)
    loss = float(-np.mean(shifted[np.arange(batch), labels] - np.log(denom)))
    dlogits = exp / denom[:, None]
    dlogits[np.arange(batch), labels] -= 1.0
    return loss, dlogits / batch


# ---------------------------------------------------------------------------
# key queue


class KeyQueue:
    """Fixed-capacity FIFO of unit-normalized key vectors."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ConfigError("queue capacity and dim must be positive")
        self._buf = np.zeros((capacity, dim), dtype=np.float32)
        self._head = 0
        self._count = 0

    def __len__(self) -> int:
        return self._count

    @property
    def capacity(self) -> int:
        return self._buf.shape[0]

    @property
    def dim(self) -> int:
        return self._buf.shape[1]

    def push(self, keys: np.ndarray) -> np.ndarray:
        """Insert a key batch (normalizing rows); returns their buffer slots.

        The oldest entries are evicted once the buffer is full. A batch
        larger than the capacity cannot be represented and raises.
        """
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        if keys.shape[1] != self.dim:
            raise ShapeMismatch(f"key dim {keys.shape[1]} != queue dim {self.dim}")
        if keys.shape[0] > self.capacity:
            raise BatchTooLarge(f"batch of {keys.shape[0]} exceeds queue capacity {self.capacity}")
        normalized, _ = normalize_rows(keys)
        positions = (self._head + np.arange(keys.shape[0])) % self.capacity
        self._buf[positions] = normalized.astype(np.float32)
        self._head = int((self._head + keys.shape[0]) % self.capacity)
        self._count = min(self.capacity, self._count + keys.shape[0])
        return positions

    def vectors(self) -> np.ndarray:
        """Current keys, oldest first."""
        if self._count < self.capacity:
            return self._buf[: self._count].copy()
        return np.concatenate([self._buf[self._head :], self._buf[: self._head]], axis=0)

    def _buffer_rows(self) -> np.ndarray:
        # Valid rows in slot order; slot indices match push() positions.
        # The buffer only wraps once full, so the prefix is always valid.
        return self._buf[: self._count]


# ---------------------------------------------------------------------------
# momentum / EMA updates


def _convex_update(target: ParamStore, source: ParamStore, keep: float) -> None:
    if not 0.0 <= keep <= 1.0:
        raise ConfigError(f"mixing coefficient must lie in [0, 1], got {keep}")
    t_names = target.names()
    s_names = source.names()
    if set(t_names) != set(s_names):
        missing = sorted(set(t_names) ^ set(s_names))
        raise ShapeMismatch(f"stores disagree on parameter names: {missing[:4]}")
    for name in t_names:
        tv = target[name]
        sv = source[name]
        if tv.shape != sv.shape:
            raise ShapeMismatch(f"{name}: target {tv.shape} vs source {sv.shape}")
        mixed = keep * tv.astype(np.float64) + (1.0 - keep) * sv.astype(np.float64)
        tv[...] = mixed.astype(tv.dtype)


def momentum_update(key_store: ParamStore, query_store: ParamStore, momentum: float) -> None:
    """Key-encoder update: theta_k <- m*theta_k + (1-m)*theta_q, in place."""
    _convex_update(key_store, query_store, momentum)


def ema_update(target_store: ParamStore, online_store: ParamStore, decay: float) -> None:
    """Target-network update: xi <- decay*xi + (1-decay)*theta, in place."""
    _convex_update(target_store, online_store, decay)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with decoupled-from-nothing L2: weight decay is added to gradients.

    Frozen entries are skipped entirely; they keep no moment state.
    """

    def __init__(
        self,
        params: ParamStore,
        learning_rate: float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        self.params = params
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {n: np.zeros_like(params[n]) for n in params.trainable_names()}
        self._v = {n: np.zeros_like(params[n]) for n in params.trainable_names()}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in self.params.trainable_names():
            if name not in grads:
                continue
            value = self.params[name]
            g = np.asarray(grads[name], dtype=value.dtype)
            if self.weight_decay:
                g = g + self.weight_decay * value
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            value -= self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class Sgd:
    """Plain gradient descent, used by the learning-rate sweep."""

    def __init__(self, params: ParamStore, learning_rate: float, weight_decay: float = 0.0):
        if learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        self.params = params
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        for name in self.params.trainable_names():
            if name not in grads:
                continue
            value = self.params[name]
            g = np.asarray(grads[name], dtype=value.dtype)
            if self.weight_decay:
                g = g + self.weight_decay * value
            value -= self.learning_rate * g


# ---------------------------------------------------------------------------
# training loop


@dataclass
class PretrainResult:
    framework: str
    loss_rows: List[Tuple[int, int, float]]
    epoch_means: List[Tuple[int, float]]
    params: ParamStore
    checkpoint_dir: Optional[Path] = None
    head_specs: List[HeadSpec] = field(default_factory=list)
    queue: Optional["KeyQueue"] = None  # moco only; final key dictionary


def write_loss_csv(path: Union[str, Path], rows: Sequence[Tuple[int, int, float]]) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "step", "loss"])
            for epoch, step, loss in rows:
                writer.writerow([epoch, step, f"{loss:.10g}"])
    except OSError as exc:
        raise IoFailure(f"cannot write loss log {path}: {exc}") from exc


def write_epoch_csv(path: Union[str, Path], means: Sequence[Tuple[int, float]]) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss"])
            for epoch, mean in means:
                writer.writerow([epoch, f"{mean:.10g}"])
    except OSError as exc:
        raise IoFailure(f"cannot write epoch log {path}: {exc}") from exc


def load_split_images(manifest: DatasetManifest, split: str) -> Tuple[List[Image], List[str]]:
    """Load all images of one split; returns (images, labels) in record order."""
    records = manifest.split_records(split)
    images = []
    labels = []
    for rec in records:
        images.append(load_png(manifest.resolve(rec)))
        labels.append(rec.class_label)
    return images, labels


def _batch_starts(n: int, batch_size: int) -> Tuple[int, int]:
    # Returns (steps, effective batch). A split smaller than one batch is
    # consumed whole, once per epoch.
    if n < batch_size:
        return 1, n
    return n // batch_size, batch_size


def _forward_encoder_head(params, x, enc_cfg, head_spec):
    feats, enc_cache = encoder_forward(params, x, enc_cfg, want_cache=True)
    out, head_cache = head_forward(params, head_spec, feats, want_cache=True)
    return out, (enc_cache, head_cache)


def _backward_encoder_head(params, enc_cfg, head_spec, cache, dout):
    enc_cache, head_cache = cache
    grads, dfeats = head_backward(params, head_spec, head_cache, dout)
    grads.update(encoder_backward(params, enc_cfg, enc_cache, dfeats))
    return grads


def _accumulate(total: Dict[str, np.ndarray], part: Dict[str, np.ndarray]) -> None:
    for name, g in part.items():
        if name in total:
            total[name] = total[name] + g
        else:
            total[name] = g


def pretrain(
    manifest: DatasetManifest,
    framework_config: FrameworkConfig,
    train_config: TrainConfig,
    encoder_config: EncoderConfig,
    policy: AugmentationPolicy,
    out_dir: Optional[Union[str, Path]] = None,
    images: Optional[List[Image]] = None,
) -> PretrainResult:
    """Self-supervised pretraining over the manifest's train split.

    Writes losses.csv, epochs.csv, and a checkpoint directory under
    out_dir when given. Preloaded `images` (in train-record order) skip
    the PNG reads.
    """
    fw = framework_config.framework
    if images is None:
        images, _ = load_split_images(manifest, "train")
    if len(images) < 2:
        raise ConfigError("pretraining needs at least two train images")
    if policy.output_size != encoder_config.input_size:
        raise ConfigError(
            f"augmentation output {policy.output_size} != encoder input {encoder_config.input_size}"
        )

    seed = train_config.master_seed
    shuffle_rng = derive_stream(seed, "shuffle")
    augment_rng = derive_stream(seed, "augment")
    init_rng = derive_stream(seed, "init")

    head_specs = default_head_specs(fw, encoder_config)
    params = init_params(encoder_config, head_specs, init_rng)
    opt = Adam(params, train_config.learning_rate, train_config.weight_decay)

    key_store = None
    queue = None
    target_store = None
    proj_spec = head_specs[0]
    pred_spec = head_specs[1] if fw == "byol" else None
    if fw == "moco":
        if train_config.batch_size > framework_config.queue_capacity:
            raise ConfigError("queue_capacity must be >= batch_size")
        key_store = params.copy()
        key_store.freeze_all()
        queue = KeyQueue(framework_config.queue_capacity, proj_spec.out_dim)
    elif fw == "byol":
        target_names = [n for n in params.names() if not n.startswith("head.byol_predictor.")]
        if framework_config.independent_target_init:
            fresh = init_params(encoder_config, [proj_spec], derive_stream(seed, "init", 1))
            target_store = fresh
        else:
            target_store = ParamStore()
            for name in target_names:
                target_store.add(name, params[name].copy())
        target_store.freeze_all()

    n = len(images)
    steps, batch = _batch_starts(n, train_config.batch_size)
    loss_rows: List[Tuple[int, int, float]] = []
    epoch_means: List[Tuple[int, float]] = []

    for epoch in range(train_config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_losses = []
        for step in range(steps):
            idx = order[step * batch : step * batch + batch]
            views_a, views_b = [], []
            for i in idx:
                pair = make_views(images[int(i)], policy, augment_rng)
                views_a.append(pair.view_a)
                views_b.append(pair.view_b)

            if fw == "simclr":
                interleaved = [v for pair in zip(views_a, views_b) for v in pair]
                x = images_to_input(interleaved)
                z, cache = _forward_encoder_head(params, x, encoder_config, proj_spec)
                loss, dz = nt_xent_loss(z, framework_config.temperature)
                grads = _backward_encoder_head(params, encoder_config, proj_spec, cache, dz)
            elif fw == "moco":
                momentum_update(key_store, params, framework_config.momentum)
                x_q = images_to_input(views_a)
                x_k = images_to_input(views_b)
                q, cache = _forward_encoder_head(params, x_q, encoder_config, proj_spec)
                k_feats, _ = encoder_forward(key_store, x_k, encoder_config, want_cache=False)
                k, _ = head_forward(key_store, proj_spec, k_feats, want_cache=False)
                positions = queue.push(k)
                loss, dq = moco_info_nce_batch(
                    q, k, queue, positions, framework_config.temperature
                )
                grads = _backward_encoder_head(params, encoder_config, proj_spec, cache, dq)
            else:
                loss, grads = _byol_step(
                    params,
                    target_store,
                    encoder_config,
                    proj_spec,
                    pred_spec,
                    views_a,
                    views_b,
                    framework_config.symmetrize_byol,
                )

            if not math.isfinite(loss):
                raise NumericFailure(f"non-finite loss at epoch {epoch} step {step}")
            opt.step(grads)
            if fw == "byol":
                online_view = params.subset(target_store.names())
                ema_update(target_store, online_view, framework_config.ema_decay)
            loss_rows.append((epoch, step, loss))
            epoch_losses.append(loss)
        epoch_means.append((epoch, float(np.mean(epoch_losses))))

    result = PretrainResult(
        framework=fw,
        loss_rows=loss_rows,
        epoch_means=epoch_means,
        params=params,
        head_specs=head_specs,
        queue=queue,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_loss_csv(out / "losses.csv", loss_rows)
        write_epoch_csv(out / "epochs.csv", epoch_means)
        meta = {
            "framework": fw,
            "epoch": train_config.epochs,
            "encoder": encoder_config.to_dict(),
            "heads": [h.to_dict() for h in head_specs],
            "framework_config": framework_config.to_dict(),
            "train_config": train_config.to_dict(),
            "classes": list(manifest.class_names),
        }
        ckpt = out / "checkpoint"
        save_checkpoint(params, ckpt, meta)
        result.checkpoint_dir = ckpt
    return result


def _byol_step(params, target_store, enc_cfg, proj_spec, pred_spec, views_a, views_b, symmetrize):
    x_a = images_to_input(views_a)
    x_b = images_to_input(views_b)

    def half(x_online, x_target):
        z_feats, _ = encoder_forward(target_store, x_target, enc_cfg, want_cache=False)
        z_t, _ = head_forward(target_store, proj_spec, z_feats, want_cache=False)
        feats, enc_cache = encoder_forward(params, x_online, enc_cfg, want_cache=True)
        z_o, proj_cache = head_forward(params, proj_spec, feats, want_cache=True)
        p, pred_cache = head_forward(params, pred_spec, z_o, want_cache=True)
        loss, dp = byol_loss(p, z_t)
        grads, dz_o = head_backward(params, pred_spec, pred_cache, dp)
        proj_grads, dfeats = head_backward(params, proj_spec, proj_cache, dz_o)
        _accumulate(grads, proj_grads)
        _accumulate(grads, encoder_backward(params, enc_cfg, enc_cache, dfeats))
        return loss, grads

    loss1, grads = half(x_b, x_a)
    if not symmetrize:
        return loss1, grads
    loss2, grads2 = half(x_a, x_b)
    _accumulate(grads, grads2)
    for name in grads:
        grads[name] = grads[name] * 0.5
    return 0.5 * (loss1 + loss2), grads
