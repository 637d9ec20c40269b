"""Encoder, heads, parameter store, and the gradient-check harness."""

import numpy as np
import pytest

from seedcl.errors import ConfigError, ShapeMismatch, UnknownHead
from seedcl.image import Image
from seedcl.layers import (
    conv2d_backward,
    conv2d_forward,
    group_norm_forward,
    linear_forward,
)
from seedcl.net import (
    EncoderConfig,
    HeadSpec,
    apply_head,
    classifier_head_spec,
    default_head_specs,
    encode,
    gradient_check,
    head_kinds_present,
    init_params,
    strip_head_and_freeze,
)
from seedcl.params import ParamStore, load_checkpoint, save_checkpoint
from seedcl.rng import derive_stream, stream_from_seed

ENC16 = EncoderConfig(profile="compact", input_size=16, feature_dim=16)


def rand_images(n, size, seed=0):
    rng = stream_from_seed(seed)
    return [Image(rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)) for _ in range(n)]


# ---------------------------------------------------------------------------
# init_params


def test_init_is_deterministic():
    heads = default_head_specs("simclr", ENC16)
    a = init_params(ENC16, heads, derive_stream(0, "init"))
    b = init_params(ENC16, heads, derive_stream(0, "init"))
    assert a.to_bytes() == b.to_bytes()


def test_init_biases_are_zero():
    store = init_params(ENC16, default_head_specs("byol", ENC16), derive_stream(1, "init"))
    bias_names = [n for n in store.names() if n.endswith(".b") or n.endswith(".beta")]
    assert bias_names
    for name in bias_names:
        assert np.all(store[name] == 0)


def test_compact_profile_feature_width():
    cfg = EncoderConfig(profile="compact", input_size=32, feature_dim=128)
    store = init_params(cfg, [], derive_stream(2, "init"))
    feats = encode(store, rand_images(2, 32), cfg)
    assert feats.shape == (2, 128)


def test_encoder_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(profile="compact", input_size=30, feature_dim=128)
    with pytest.raises(ConfigError):
        EncoderConfig(profile="compact", input_size=32, feature_dim=12)
    with pytest.raises(ConfigError):
        EncoderConfig(profile="reference", input_size=224, feature_dim=128)
    with pytest.raises(ConfigError):
        EncoderConfig(profile="resnet", input_size=32, feature_dim=128)


# ---------------------------------------------------------------------------
# encode


def test_encode_shape_and_purity():
    store = init_params(ENC16, [], derive_stream(3, "init"))
    imgs = rand_images(3, 16, seed=3)
    batch = [imgs[0], imgs[1], imgs[0], imgs[2]]
    feats = encode(store, batch, ENC16)
    assert feats.shape == (4, 16)
    assert np.array_equal(feats[0], feats[2])
    assert np.all(np.isfinite(feats))


def test_encode_rejects_wrong_image_size():
    store = init_params(ENC16, [], derive_stream(4, "init"))
    with pytest.raises(ShapeMismatch):
        encode(store, rand_images(1, 32), ENC16)


# ---------------------------------------------------------------------------
# apply_head


def test_classifier_head_logit_shape():
    spec = classifier_head_spec(ENC16, 5)
    store = ParamStore()
    rng = stream_from_seed(0)
    store.add("head.linear_classifier.fc0.w", rng.normal(size=(16, 5)).astype(np.float32))
    store.add("head.linear_classifier.fc0.b", np.zeros(5, dtype=np.float32))
    out = apply_head(store, spec, rng.normal(size=(7, 16)))
    assert out.shape == (7, 5)


def test_zero_input_zero_bias_gives_zero_output():
    spec = HeadSpec("simclr_projection", [4, 3, 2])
    store = ParamStore()
    rng = stream_from_seed(1)
    store.add("head.simclr_projection.fc0.w", rng.normal(size=(4, 3)).astype(np.float32))
    store.add("head.simclr_projection.fc0.b", np.zeros(3, dtype=np.float32))
    store.add("head.simclr_projection.fc1.w", rng.normal(size=(3, 2)).astype(np.float32))
    store.add("head.simclr_projection.fc1.b", np.zeros(2, dtype=np.float32))
    out = apply_head(store, spec, np.zeros((3, 4)))
    assert np.all(out == 0)


def test_single_layer_hand_matrix_multiply():
    spec = HeadSpec("linear_classifier", [2, 2])
    store = ParamStore()
    store.add("head.linear_classifier.fc0.w", np.array([[1.0, 0.0], [0.0, 2.0]], dtype=np.float32))
    store.add("head.linear_classifier.fc0.b", np.zeros(2, dtype=np.float32))
    out = apply_head(store, spec, np.array([[3.0, 4.0]]))
    assert np.allclose(out, [[3.0, 8.0]])


def test_head_spec_validation():
    with pytest.raises(ConfigError):
        HeadSpec("linear_classifier", [16, 8, 5])
    with pytest.raises(ConfigError):
        HeadSpec("mystery_head", [16, 8])
    with pytest.raises(ConfigError):
        HeadSpec("simclr_projection", [16])


# ---------------------------------------------------------------------------
# strip_head_and_freeze


def test_strip_removes_head_and_freezes_rest():
    heads = default_head_specs("simclr", ENC16)
    store = init_params(ENC16, heads, derive_stream(5, "init"))
    assert head_kinds_present(store) == ["simclr_projection"]
    stripped = strip_head_and_freeze(store, "simclr_projection")
    assert head_kinds_present(stripped) == []
    assert all(not e.trainable for _, e in stripped.items())
    assert all(not n.startswith("head.") for n in stripped.names())


def test_strip_twice_raises_unknown_head():
    heads = default_head_specs("simclr", ENC16)
    store = init_params(ENC16, heads, derive_stream(6, "init"))
    stripped = strip_head_and_freeze(store, "simclr_projection")
    with pytest.raises(UnknownHead):
        strip_head_and_freeze(stripped, "simclr_projection")


# ---------------------------------------------------------------------------
# gradient_check harness


def test_gradient_check_quadratic_is_exact():
    store = ParamStore()
    store.add("w", stream_from_seed(2).normal(size=(10,)).astype(np.float32))

    def loss_fn(params, want_grads):
        w = params["w"]
        loss = 0.5 * float(np.sum(w * w))
        return loss, ({"w": w.copy()} if want_grads else None)

    report = gradient_check(loss_fn, store, stream_from_seed(3), tolerance=1e-8, sample_size=10)
    assert report.passed
    assert report.max_rel_error <= 1e-8


def test_gradient_check_flags_frozen_gradients():
    store = ParamStore()
    store.add("w", np.ones(4, dtype=np.float32))
    store.add("frozen", np.ones(4, dtype=np.float32), trainable=False)

    def leaky(params, want_grads):
        loss = 0.5 * float(np.sum(params["w"] ** 2))
        grads = {"w": params["w"].copy(), "frozen": np.ones(4)} if want_grads else None
        return loss, grads

    report = gradient_check(leaky, store, stream_from_seed(4), sample_size=4)
    assert not report.frozen_zero and not report.passed

    def clean(params, want_grads):
        loss = 0.5 * float(np.sum(params["w"] ** 2))
        return loss, ({"w": params["w"].copy()} if want_grads else None)

    report = gradient_check(clean, store, stream_from_seed(4), sample_size=4)
    assert report.frozen_zero and report.passed


def test_gradient_check_catches_wrong_gradient():
    store = ParamStore()
    store.add("w", np.full(4, 2.0, dtype=np.float32))

    def wrong(params, want_grads):
        w = params["w"]
        return 0.5 * float(np.sum(w * w)), ({"w": 2.0 * w} if want_grads else None)

    report = gradient_check(wrong, store, stream_from_seed(5), sample_size=4)
    assert not report.passed


# ---------------------------------------------------------------------------
# layer primitives


def test_conv2d_matches_hand_computation():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 2.0  # pure center tap: y = 2x
    b = np.array([1.0])
    y, _ = conv2d_forward(x, w, b, stride=1, pad=1)
    assert np.allclose(y[0, 0], 2.0 * x[0, 0] + 1.0)


def test_conv2d_backward_matches_finite_difference():
    rng = stream_from_seed(6)
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    y, cache = conv2d_forward(x, w, b, stride=2, pad=1)
    dout = rng.normal(size=y.shape)
    dx, dw, db = conv2d_backward(dout, cache)
    eps = 1e-6
    idx = (1, 2, 1, 1)
    w2 = w.copy()
    w2[idx] += eps
    yp, _ = conv2d_forward(x, w2, b, stride=2, pad=1)
    w2[idx] -= 2 * eps
    ym, _ = conv2d_forward(x, w2, b, stride=2, pad=1)
    numeric = np.sum((yp - ym) * dout) / (2 * eps)
    assert abs(dw[idx] - numeric) < 1e-6 * max(1.0, abs(numeric))


def test_group_norm_normalizes_each_group():
    rng = stream_from_seed(7)
    x = rng.normal(loc=3.0, scale=2.0, size=(2, 16, 4, 4))
    gamma, beta = np.ones(16), np.zeros(16)
    y, _ = group_norm_forward(x, gamma, beta, group_size=8)
    groups = y.reshape(2, 2, 8 * 16)
    assert np.allclose(groups.mean(axis=2), 0.0, atol=1e-7)
    assert np.allclose(groups.var(axis=2), 1.0, atol=1e-4)


def test_linear_forward_is_affine():
    x = np.array([[1.0, 2.0]])
    w = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    b = np.array([10.0, 20.0, 30.0])
    y, _ = linear_forward(x, w, b)
    assert np.allclose(y, [[11.0, 22.0, 33.0]])


# ---------------------------------------------------------------------------
# checkpoint round trip


def test_checkpoint_round_trip_bit_exact(tmp_path):
    heads = default_head_specs("moco", ENC16)
    store = init_params(ENC16, heads, derive_stream(8, "init"))
    store.entry(store.names()[0]).trainable = False
    meta = {"framework": "moco", "epoch": 3}
    ckpt = save_checkpoint(store, tmp_path / "ckpt", meta)
    loaded, loaded_meta = load_checkpoint(ckpt)
    assert loaded.to_bytes() == store.to_bytes()
    assert loaded.names() == store.names()
    assert [e.trainable for _, e in loaded.items()] == [e.trainable for _, e in store.items()]
    assert loaded_meta["framework"] == "moco" and loaded_meta["epoch"] == 3
    # write -> read -> write is byte-stable
    again = save_checkpoint(loaded, tmp_path / "ckpt2", loaded_meta)
    assert (ckpt / "params.bin").read_bytes() == (again / "params.bin").read_bytes()


def test_param_store_shape_and_name_discipline():
    store = ParamStore()
    store.add("w", np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(ShapeMismatch):
        store.add("w", np.zeros(2, dtype=np.float32))
    with pytest.raises(ShapeMismatch):
        store.set_value("w", np.zeros(3, dtype=np.float32))
    assert store.subset(["w"]).names() == ["w"]
    assert store.subset(["w"])["w"] is store["w"]  # shared view
    assert store.copy()["w"] is not store["w"]  # deep copy
