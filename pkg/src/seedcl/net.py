"""Residual convolutional encoders, projection/prediction heads, parameter
initialization, head stripping/freezing, and the finite-difference gradient
harness.

Two encoder profiles: `compact` is a small group-normalized residual CNN that
trains end-to-end on CPU; `reference` is a bottleneck network with the
2048-dim feature width of the full-scale setup, kept for dimensional fidelity
rather than desk training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ShapeMismatch, UnknownHead
from .image import Image
from .layers import (
    conv2d_backward,
    conv2d_forward,
    global_avg_pool_backward,
    global_avg_pool_forward,
    group_norm_backward,
    group_norm_forward,
    linear_backward,
    linear_forward,
    max_pool_backward,
    max_pool_forward,
    relu_backward,
    relu_forward,
)
from .params import ParamStore

GROUP_SIZE = 8

HEAD_KINDS = (
    "simclr_projection",
    "moco_projection",
    "byol_projection",
    "byol_predictor",
    "linear_classifier",
)


@dataclass
class EncoderConfig:
    profile: str = "compact"  # "compact" | "reference"
    input_size: int = 32
    feature_dim: int = 128

    def __post_init__(self):
        if self.profile not in ("compact", "reference"):
            raise ConfigError(f"unknown encoder profile {self.profile!r}")
        if self.feature_dim <= 0:
            raise ConfigError("feature_dim must be positive")
        if self.profile == "compact":
            if self.feature_dim % GROUP_SIZE != 0 or self.feature_dim < 2 * GROUP_SIZE:
                raise ConfigError(f"compact feature_dim must be a multiple of {GROUP_SIZE} and >= 16")
            if self.input_size % 8 != 0 or self.input_size < 8:
                raise ConfigError("compact input_size must be a positive multiple of 8")
        else:
            if self.feature_dim != 2048:
                raise ConfigError("reference profile emits 2048-dim features")
            if self.input_size < 32:
                raise ConfigError("reference input_size must be >= 32")

    def to_dict(self) -> dict:
        return {"profile": self.profile, "input_size": self.input_size, "feature_dim": self.feature_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class HeadSpec:
    """An MLP head: Linear layers over layer_dims with ReLU between (none after last)."""

    kind: str
    layer_dims: List[int]

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.kind!r}")
        if len(self.layer_dims) < 2 or any(d <= 0 for d in self.layer_dims):
            raise ConfigError(f"layer_dims must be >= 2 positive entries, got {self.layer_dims}")
        if self.kind == "linear_classifier" and len(self.layer_dims) != 2:
            raise ConfigError("linear_classifier is a single layer: layer_dims must have exactly 2 entries")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def param_prefix(self) -> str:
        return f"head.{self.kind}."

    def to_dict(self) -> dict:
        return {"kind": self.kind, "layer_dims": list(self.layer_dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "HeadSpec":
        return cls(kind=d["kind"], layer_dims=list(d["layer_dims"]))


def default_head_specs(framework: str, config: EncoderConfig) -> List[HeadSpec]:
    """Standard head shapes for a framework at a given encoder width."""
    d = config.feature_dim
    if config.profile == "reference":
        table = {
            "simclr": [HeadSpec("simclr_projection", [2048, 2048, 128])],
            "moco": [HeadSpec("moco_projection", [2048, 2048, 128])],
            "byol": [
                HeadSpec("byol_projection", [2048, 4096, 256]),
                HeadSpec("byol_predictor", [256, 4096, 256]),
            ],
        }
    else:
        latent = min(128, d)
        byol_out = max(d // 2, 16)
        table = {
            "simclr": [HeadSpec("simclr_projection", [d, d, latent])],
            "moco": [HeadSpec("moco_projection", [d, d, latent])],
            "byol": [
                HeadSpec("byol_projection", [d, 2 * d, byol_out]),
                HeadSpec("byol_predictor", [byol_out, 2 * d, byol_out]),
            ],
        }
    if framework not in table:
        raise ConfigError(f"unknown framework {framework!r}")
    return table[framework]


def classifier_head_spec(config: EncoderConfig, num_classes: int) -> HeadSpec:
    if num_classes < 2:
        raise ConfigError("classifier needs at least 2 classes")
    return HeadSpec("linear_classifier", [config.feature_dim, num_classes])


@dataclass
class _BlockSpec:
    prefix: str
    kind: str  # "basic" | "bottleneck"
    c_in: int
    c_mid: int
    c_out: int
    stride: int

    @property
    def has_down(self) -> bool:
        return self.stride != 1 or self.c_in != self.c_out


def _build_arch(cfg: EncoderConfig) -> dict:
    if cfg.profile == "compact":
        d = cfg.feature_dim
        widths = [16, 32, 64, d]
        blocks = []
        for i in range(3):
            blocks.append(
                _BlockSpec(
                    prefix=f"enc.block{i + 1}.",
                    kind="basic",
                    c_in=widths[i],
                    c_mid=widths[i + 1],
                    c_out=widths[i + 1],
                    stride=2,
                )
            )
        return {"stem": {"out": widths[0], "k": 3, "stride": 1, "pad": 1}, "maxpool": False, "blocks": blocks}

    stage_out = [256, 512, 1024, 2048]
    counts = [3, 4, 6, 3]
    blocks = []
    c_in = 64
    for s, (out, n) in enumerate(zip(stage_out, counts)):
        for b in range(n):
            stride = 2 if (s > 0 and b == 0) else 1
            blocks.append(
                _BlockSpec(
                    prefix=f"enc.stage{s + 1}.block{b + 1}.",
                    kind="bottleneck",
                    c_in=c_in,
                    c_mid=out // 4,
                    c_out=out,
                    stride=stride,
                )
            )
            c_in = out
    return {"stem": {"out": 64, "k": 7, "stride": 2, "pad": 3}, "maxpool": True, "blocks": blocks}


# ---------------------------------------------------------------------------
# initialization


def _he_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def _init_conv(store: ParamStore, rng, name: str, c_in: int, c_out: int, k: int) -> None:
    store.add(f"{name}.w", _he_uniform(rng, (c_out, c_in, k, k), c_in * k * k))
    store.add(f"{name}.b", np.zeros(c_out, dtype=np.float32))


def _init_gn(store: ParamStore, rng, name: str, channels: int) -> None:
    store.add(f"{name}.g", np.ones(channels, dtype=np.float32))
    store.add(f"{name}.b", np.zeros(channels, dtype=np.float32))


def init_params(
    config: EncoderConfig, heads: Sequence[HeadSpec], rng: np.random.Generator
) -> ParamStore:
    """Fan-in-scaled uniform weights, zero biases, unit norm scales.

    Parameter insertion order is the checkpoint layout: stem, blocks, heads.
    """
    arch = _build_arch(config)
    store = ParamStore()
    stem = arch["stem"]
    _init_conv(store, rng, "enc.stem.conv", 3, stem["out"], stem["k"])
    _init_gn(store, rng, "enc.stem.gn", stem["out"])
    for blk in arch["blocks"]:
        p = blk.prefix
        if blk.kind == "basic":
            _init_conv(store, rng, f"{p}conv1", blk.c_in, blk.c_mid, 3)
            _init_gn(store, rng, f"{p}gn1", blk.c_mid)
            _init_conv(store, rng, f"{p}conv2", blk.c_mid, blk.c_out, 3)
            _init_gn(store, rng, f"{p}gn2", blk.c_out)
        else:
            _init_conv(store, rng, f"{p}conv1", blk.c_in, blk.c_mid, 1)
            _init_gn(store, rng, f"{p}gn1", blk.c_mid)
            _init_conv(store, rng, f"{p}conv2", blk.c_mid, blk.c_mid, 3)
            _init_gn(store, rng, f"{p}gn2", blk.c_mid)
            _init_conv(store, rng, f"{p}conv3", blk.c_mid, blk.c_out, 1)
            _init_gn(store, rng, f"{p}gn3", blk.c_out)
        if blk.has_down:
            _init_conv(store, rng, f"{p}down", blk.c_in, blk.c_out, 1)
            _init_gn(store, rng, f"{p}down_gn", blk.c_out)
    for spec in heads:
        prefix = spec.param_prefix()
        for i, (din, dout) in enumerate(zip(spec.layer_dims[:-1], spec.layer_dims[1:])):
            store.add(f"{prefix}fc{i}.w", _he_uniform(rng, (din, dout), din))
            store.add(f"{prefix}fc{i}.b", np.zeros(dout, dtype=np.float32))
    return store


# ---------------------------------------------------------------------------
# forward / backward


def images_to_input(batch: Union[Sequence[Image], np.ndarray], dtype=np.float32) -> np.ndarray:
    """Stack images into a (N, 3, H, W) float array scaled to [-1, 1]."""
    if isinstance(batch, np.ndarray):
        arr = batch
    else:
        arr = np.stack([im.pixels for im in batch])
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ShapeMismatch(f"expected (N, H, W, 3) pixel batch, got {arr.shape}")
    x = arr.astype(dtype) / 255.0
    return np.ascontiguousarray((x * 2.0 - 1.0).transpose(0, 3, 1, 2))


def _conv_gn(params: ParamStore, name_c: str, name_g: str, x, stride, pad, caches):
    a, c1 = conv2d_forward(x, params[f"{name_c}.w"], params[f"{name_c}.b"], stride, pad)
    n, c2 = group_norm_forward(a, params[f"{name_g}.g"], params[f"{name_g}.b"], GROUP_SIZE)
    caches.append((name_c, name_g, c1, c2))
    return n


def _conv_gn_backward(params, grads, cache, dn):
    name_c, name_g, c1, c2 = cache
    da, dgamma, dbeta = group_norm_backward(dn, c2)
    dx, dw, db = conv2d_backward(da, c1)
    grads[f"{name_g}.g"] = grads.get(f"{name_g}.g", 0) + dgamma
    grads[f"{name_g}.b"] = grads.get(f"{name_g}.b", 0) + dbeta
    grads[f"{name_c}.w"] = grads.get(f"{name_c}.w", 0) + dw
    grads[f"{name_c}.b"] = grads.get(f"{name_c}.b", 0) + db
    return dx


def _block_forward(params: ParamStore, blk: _BlockSpec, x):
    p = blk.prefix
    caches = []
    if blk.kind == "basic":
        n1 = _conv_gn(params, f"{p}conv1", f"{p}gn1", x, blk.stride, 1, caches)
        r1, m1 = relu_forward(n1)
        n2 = _conv_gn(params, f"{p}conv2", f"{p}gn2", r1, 1, 1, caches)
        relu_masks = [m1]
        branch = n2
    else:
        n1 = _conv_gn(params, f"{p}conv1", f"{p}gn1", x, 1, 0, caches)
        r1, m1 = relu_forward(n1)
        n2 = _conv_gn(params, f"{p}conv2", f"{p}gn2", r1, blk.stride, 1, caches)
        r2, m2 = relu_forward(n2)
        n3 = _conv_gn(params, f"{p}conv3", f"{p}gn3", r2, 1, 0, caches)
        relu_masks = [m1, m2]
        branch = n3
    if blk.has_down:
        sc = _conv_gn(params, f"{p}down", f"{p}down_gn", x, blk.stride, 0, caches)
    else:
        sc = x
    y, m_out = relu_forward(branch + sc)
    return y, (blk, caches, relu_masks, m_out)


def _block_backward(params: ParamStore, grads: Dict[str, np.ndarray], cache, dy):
    blk, caches, relu_masks, m_out = cache
    ds = relu_backward(dy, m_out)
    if blk.has_down:
        dsc = _conv_gn_backward(params, grads, caches[-1], ds)
        conv_caches = caches[:-1]
    else:
        dsc = ds
        conv_caches = caches
    if blk.kind == "basic":
        dr1 = _conv_gn_backward(params, grads, conv_caches[1], ds)
        dn1 = relu_backward(dr1, relu_masks[0])
        dx = _conv_gn_backward(params, grads, conv_caches[0], dn1)
    else:
        dr2 = _conv_gn_backward(params, grads, conv_caches[2], ds)
        dn2 = relu_backward(dr2, relu_masks[1])
        dr1 = _conv_gn_backward(params, grads, conv_caches[1], dn2)
        dn1 = relu_backward(dr1, relu_masks[0])
        dx = _conv_gn_backward(params, grads, conv_caches[0], dn1)
    return dx + dsc


def encoder_forward(params: ParamStore, x: np.ndarray, config: EncoderConfig, want_cache: bool = False):
    """Run the encoder on (N, 3, S, S) input; returns (features, cache)."""
    if x.shape[2] != config.input_size or x.shape[3] != config.input_size:
        raise ShapeMismatch(
            f"input is {x.shape[2]}x{x.shape[3]}, encoder expects {config.input_size}x{config.input_size}"
        )
    arch = _build_arch(config)
    caches = []
    stem_caches = []
    h = _conv_gn(params, "enc.stem.conv", "enc.stem.gn", x, arch["stem"]["stride"], arch["stem"]["pad"], stem_caches)
    h, stem_mask = relu_forward(h)
    pool_cache = None
    if arch["maxpool"]:
        h, pool_cache = max_pool_forward(h, 3, 2, 1)
    for blk in arch["blocks"]:
        h, c = _block_forward(params, blk, h)
        caches.append(c)
    feats, gap_cache = global_avg_pool_forward(h)
    if not want_cache:
        return feats, None
    return feats, (stem_caches, stem_mask, pool_cache, caches, gap_cache)


def encoder_backward(
    params: ParamStore, config: EncoderConfig, cache, dfeats: np.ndarray
) -> Dict[str, np.ndarray]:
    """Gradients of every encoder parameter given d(features)."""
    stem_caches, stem_mask, pool_cache, caches, gap_cache = cache
    grads: Dict[str, np.ndarray] = {}
    dh = global_avg_pool_backward(dfeats, gap_cache)
    for c in reversed(caches):
        dh = _block_backward(params, grads, c, dh)
    if pool_cache is not None:
        dh = max_pool_backward(dh, pool_cache)
    dh = relu_backward(dh, stem_mask)
    _conv_gn_backward(params, grads, stem_caches[0], dh)
    return grads


def encode(params: ParamStore, batch: Union[Sequence[Image], np.ndarray], config: EncoderConfig) -> np.ndarray:
    """Pure feature extraction: (params, images) -> (N, feature_dim) matrix."""
    dtype = params[params.names()[0]].dtype
    x = images_to_input(batch, dtype=dtype)
    feats, _ = encoder_forward(params, x, config, want_cache=False)
    return feats


def head_forward(params: ParamStore, spec: HeadSpec, feats: np.ndarray, want_cache: bool = False):
    if feats.ndim != 2 or feats.shape[1] != spec.in_dim:
        raise ShapeMismatch(f"{spec.kind}: expected (B, {spec.in_dim}) features, got {feats.shape}")
    prefix = spec.param_prefix()
    n_layers = len(spec.layer_dims) - 1
    caches = []
    h = feats
    for i in range(n_layers):
        h, c = linear_forward(h, params[f"{prefix}fc{i}.w"], params[f"{prefix}fc{i}.b"])
        mask = None
        if i < n_layers - 1:
            h, mask = relu_forward(h)
        caches.append((c, mask))
    return h, (caches if want_cache else None)


def head_backward(params: ParamStore, spec: HeadSpec, cache, dout: np.ndarray):
    prefix = spec.param_prefix()
    grads: Dict[str, np.ndarray] = {}
    dh = dout
    for i in reversed(range(len(cache))):
        lin_cache, mask = cache[i]
        if mask is not None:
            dh = relu_backward(dh, mask)
        dh, dw, db = linear_backward(dh, lin_cache)
        grads[f"{prefix}fc{i}.w"] = dw
        grads[f"{prefix}fc{i}.b"] = db
    return grads, dh


def apply_head(params: ParamStore, spec: HeadSpec, feats: np.ndarray) -> np.ndarray:
    """Map a feature batch through an MLP head (ReLU between layers only)."""
    out, _ = head_forward(params, spec, feats, want_cache=False)
    return out


def head_kinds_present(params: ParamStore) -> List[str]:
    kinds = []
    for kind in HEAD_KINDS:
        if any(n.startswith(f"head.{kind}.") for n in params.names()):
            kinds.append(kind)
    return kinds


def strip_head_and_freeze(params: ParamStore, head_kind: str) -> ParamStore:
    """Drop one head's parameters and freeze everything that remains."""
    prefix = f"head.{head_kind}."
    doomed = [n for n in params.names() if n.startswith(prefix)]
    if not doomed:
        raise UnknownHead(f"no parameters under {prefix!r}")
    out = params.copy()
    for n in doomed:
        out.remove(n)
    out.freeze_all()
    return out


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    num_checked: int
    tolerance: float
    worst_name: str = ""
    worst_index: int = -1
    worst_analytic: float = 0.0
    worst_numeric: float = 0.0
    frozen_zero: bool = True

    @property
    def passed(self) -> bool:
        return self.frozen_zero and self.max_rel_error <= self.tolerance


def gradient_check(
    loss_fn,
    params: ParamStore,
    rng: np.random.Generator,
    tolerance: float = 1e-4,
    sample_size: int = 200,
    step: float = 1e-5,
    abs_floor: float = 1e-10,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    loss_fn(params, want_grads) -> (loss, grads-dict-or-None); the check runs
    on a float64 copy of the store and samples `sample_size` trainable
    scalars. Frozen entries must have missing or exactly-zero gradients.
    """
    p64 = params.astype(np.float64)
    _, grads = loss_fn(p64, True)

    frozen_zero = True
    for name, entry in p64.items():
        if entry.trainable:
            continue
        g = grads.get(name)
        if g is not None and np.any(np.asarray(g) != 0):
            frozen_zero = False

    names = p64.trainable_names()
    sizes = np.array([p64[n].size for n in names], dtype=np.int64)
    total = int(sizes.sum())
    n_check = min(sample_size, total)
    picks = rng.choice(total, size=n_check, replace=False)
    bounds = np.cumsum(sizes)

    report = GradCheckReport(max_rel_error=0.0, num_checked=n_check, tolerance=tolerance, frozen_zero=frozen_zero)
    for flat in np.sort(picks):
        k = int(np.searchsorted(bounds, flat, side="right"))
        local = int(flat - (bounds[k - 1] if k > 0 else 0))
        name = names[k]
        vec = p64[name].reshape(-1)
        orig = vec[local]
        vec[local] = orig + step
        lp = loss_fn(p64, False)[0]
        vec[local] = orig - step
        lm = loss_fn(p64, False)[0]
        vec[local] = orig
        fd = (lp - lm) / (2.0 * step)
        ga = float(np.asarray(grads[name]).reshape(-1)[local])
        scale = max(abs(ga), abs(fd))
        rel = 0.0 if scale < abs_floor else abs(ga - fd) / scale
        if rel > report.max_rel_error:
            report.max_rel_error = rel
            report.worst_name = name
            report.worst_index = local
            report.worst_analytic = ga
            report.worst_numeric = fd
    return report
