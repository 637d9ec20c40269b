"""Command-line pipeline: generate, pretrain, probe, eval, utilities."""

import hashlib
import json

import pytest

from seedcl import cli
from seedcl.config import default_run_config, load_run_config
from seedcl.params import load_checkpoint
from seedcl.synthgen import read_manifest

GEN_FLAGS = ["--seeds-per-image", "12", "--base-size", "6"]


def run_cli(argv):
    return cli.main(argv)


def sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated dataset plus a short pretrain run shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    rc = run_cli(
        ["gen-synthetic", "--toy-classes", "3", "--per-class", "10", "--size", "32",
         "--seed", "0", "--out", str(data)] + GEN_FLAGS
    )
    assert rc == 0
    run = root / "pretrain"
    rc = run_cli(
        ["pretrain", "--framework", "simclr", "--data", str(data), "--out", str(run),
         "--epochs", "2", "--batch-size", "8", "--seed", "0"]
    )
    assert rc == 0
    return {"root": root, "data": data, "run": run, "ckpt": run / "checkpoint"}


# ---------------------------------------------------------------------------
# gen-synthetic


def test_gen_synthetic_toy_split_arithmetic(workspace):
    data = workspace["data"]
    manifest = read_manifest(data / "manifest.jsonl")
    assert len(manifest.records) == 30
    assert len(manifest.split_records("train")) == 24
    assert len(manifest.split_records("val")) == 6
    assert len(list(data.rglob("*.png"))) == 30


def test_gen_synthetic_same_seed_same_bytes(workspace, tmp_path):
    again = tmp_path / "again"
    rc = run_cli(
        ["gen-synthetic", "--toy-classes", "3", "--per-class", "10", "--size", "32",
         "--seed", "0", "--out", str(again)] + GEN_FLAGS
    )
    assert rc == 0
    assert sha256(again / "manifest.jsonl") == sha256(workspace["data"] / "manifest.jsonl")
    first = read_manifest(workspace["data"] / "manifest.jsonl").records[0]
    assert sha256(again / first.path) == sha256(workspace["data"] / first.path)


def test_gen_synthetic_bad_split_is_runtime_error(tmp_path):
    rc = run_cli(
        ["gen-synthetic", "--toy-classes", "2", "--per-class", "2", "--size", "32",
         "--split", "0.9,0.2", "--out", str(tmp_path / "x")] + GEN_FLAGS
    )
    assert rc == 1


def test_gen_synthetic_requires_out():
    with pytest.raises(SystemExit) as exc:
        run_cli(["gen-synthetic", "--toy-classes", "2"])
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# pretrain


def test_pretrain_artifacts_round_trip(workspace):
    run = workspace["run"]
    store, meta = load_checkpoint(workspace["ckpt"])
    assert meta["framework"] == "simclr"
    assert meta["train_config"]["epochs"] == 2
    assert len(store.names()) > 0
    losses = (run / "losses.csv").read_text().strip().splitlines()
    assert losses[0] == "epoch,step,loss"
    assert len(losses) - 1 == 2 * (24 // 8)  # epochs x steps_per_epoch
    record = json.loads((run / "run_record.json").read_text())
    assert record["status"] == "success"


def test_pretrain_unknown_framework_is_usage_error(workspace, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run_cli(["pretrain", "--framework", "deepcluster", "--data", str(workspace["data"]),
                 "--out", str(tmp_path / "x")])
    assert exc.value.code == 2


def test_pretrain_rejects_missing_data(tmp_path):
    rc = run_cli(["pretrain", "--framework", "simclr", "--data", str(tmp_path / "nope"),
                  "--out", str(tmp_path / "out")])
    assert rc == 1


# ---------------------------------------------------------------------------
# probe / eval


def test_probe_writes_curves_and_spares_the_encoder(workspace):
    ckpt = workspace["ckpt"]
    before = (sha256(ckpt / "params.bin"), sha256(ckpt / "meta.json"))
    out = workspace["root"] / "probe"
    rc = run_cli(
        ["probe", "--ckpt", str(ckpt), "--data", str(workspace["data"]), "--out", str(out),
         "--per-class", "4", "--per-class-val", "2", "--epochs", "5", "--lr", "0.01"]
    )
    assert rc == 0
    assert (sha256(ckpt / "params.bin"), sha256(ckpt / "meta.json")) == before
    curves = (out / "probe_curves.csv").read_text().strip().splitlines()
    assert curves[0] == "epoch,train_acc,train_loss,val_acc,val_loss"
    assert len(curves) - 1 == 5
    clf, meta = load_checkpoint(out / "probe_checkpoint")
    assert meta["kind"] == "linear_probe"
    assert clf[f"head.linear_classifier.fc0.w"].shape == (128, 3)


def test_eval_writes_report_text_and_json(workspace, capsys):
    out = workspace["root"] / "probe"
    report_dir = workspace["root"] / "report"
    rc = run_cli(
        ["eval", "--ckpt", str(workspace["ckpt"]), "--probe", str(out / "probe_checkpoint"),
         "--data", str(workspace["data"]), "--split", "val", "--report-out", str(report_dir)]
    )
    assert rc == 0
    text = capsys.readouterr().out
    assert "macro avg" in text and "accuracy" in text
    assert (report_dir / "report.txt").read_text() == text
    parsed = json.loads((report_dir / "report.json").read_text())
    assert 0.0 <= parsed["accuracy"] <= 1.0
    assert sorted(parsed["classes"]) == ["toy0", "toy1", "toy2"]


def test_lr_find_writes_sweep(workspace, capsys):
    out = workspace["root"] / "lrfind"
    rc = run_cli(
        ["lr-find", "--ckpt", str(workspace["ckpt"]), "--data", str(workspace["data"]),
         "--out", str(out), "--per-class", "4", "--per-class-val", "1", "--steps", "15"]
    )
    assert rc == 0
    assert "suggested learning rate:" in capsys.readouterr().out
    rows = (out / "lr_sweep.csv").read_text().strip().splitlines()
    assert rows[0] == "lr,loss,smoothed_loss"
    assert 2 <= len(rows) - 1 <= 15


# ---------------------------------------------------------------------------
# hist-compare


def test_hist_compare_self_is_zero(workspace, capsys):
    first = read_manifest(workspace["data"] / "manifest.jsonl").records[0]
    img = str(workspace["data"] / first.path)
    rc = run_cli(["hist-compare", img, img])
    assert rc == 0
    assert capsys.readouterr().out.strip() == "0.000000"


def test_hist_compare_missing_file(tmp_path):
    rc = run_cli(["hist-compare", str(tmp_path / "a.png"), str(tmp_path / "b.png")])
    assert rc == 1


# ---------------------------------------------------------------------------
# run config merging


def test_config_file_overrides_profile(tmp_path):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps({"framework": {"temperature": 0.1}, "train": {"epochs": 7}}))
    cfg = load_run_config(cfg_path, framework="moco", master_seed=5)
    assert cfg.framework.framework == "moco"
    assert cfg.framework.temperature == 0.1
    assert cfg.train.epochs == 7
    assert cfg.train.master_seed == 5
    base = default_run_config("moco", profile="desk")
    assert cfg.train.batch_size == base.train.batch_size
    assert cfg.policy.crop_scale_range == base.policy.crop_scale_range


def test_run_config_round_trips_via_dict():
    cfg = default_run_config("byol", profile="desk", master_seed=3)
    from seedcl.config import RunConfig

    clone = RunConfig.from_dict(cfg.to_dict())
    assert clone.to_dict() == cfg.to_dict()
