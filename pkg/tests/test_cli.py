import csv
import json
import warnings

import numpy as np
import pytest

from instaprompt.backbone import Backbone, checkpoint_load
from instaprompt.cli import main, read_config_file
from instaprompt.data import load_dataset
from instaprompt.phm import Dense
from instaprompt.trainer import TrainConfig, Tuner, load_model, param_hash
from instaprompt.vq import distances_and_logits, load_codebook_csv

SMALL = ["--nodes-min", "4", "--nodes-max", "8", "--dim", "6"]
TUNE = ["--hidden", "16", "--epochs", "4", "--shots", "10", "--codebook-size", "6", "--samples", "3",
        "--batch-size", "8"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A dataset, a pretrained backbone and one prompt_tune run shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "d.jsonl"), "--per-class", "30", *SMALL]) == 0
    assert main(["pretrain", "--data", str(root / "d.jsonl"), "--out", str(root / "pt"), "--hidden", "16",
                 "--epochs", "2"]) == 0
    assert main(["tune", "--data", str(root / "d.jsonl"), "--backbone", str(root / "pt"),
                 "--out", str(root / "pt_run"), *TUNE]) == 0
    return root


def test_synth_counts_and_balance(tmp_path, capsys):
    out = tmp_path / "d.jsonl"
    assert main(["synth", "--classes", "2", "--per-class", "100", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 200
    assert capsys.readouterr().out.splitlines() == ["class 0: 100 graphs", "class 1: 100 graphs"]


def test_synth_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--seed", "7", "--per-class", "10", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_exit_codes(tmp_path, run):
    assert main(["synth", "--classes", "0", "--out", str(tmp_path / "x")]) == 2
    assert main(["synth", "--no-such-flag"]) == 2
    assert main(["pretrain", "--out", str(tmp_path / "p")]) == 2
    assert main(["pretrain", "--data", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "p")]) == 2
    # checkpoint width 16 against a requested width of 32
    assert main(["tune", "--data", str(run / "d.jsonl"), "--backbone", str(run / "pt"),
                 "--out", str(tmp_path / "t"), *TUNE, "--hidden", "32"]) == 2
    assert main(["eval", "--model", str(tmp_path / "none.ckpt"), "--data", str(run / "d.jsonl")]) == 2
    assert main(["tune", "--mode", "zero_shot", "--data", str(run / "d.jsonl"), "--backbone", str(run / "pt"),
                 "--out", str(tmp_path / "t2")]) == 2


def test_numerical_abort_exit_three(tmp_path, run):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        code = main(["pretrain", "--data", str(run / "d.jsonl"), "--out", str(tmp_path / "p"), "--hidden", "16",
                     "--epochs", "3", "--pretrain-lr", "1e200"])
    assert code == 3
    diag = json.loads((tmp_path / "p" / "diagnostics.json").read_text())
    assert {"lr", "epoch", "batch", "grad_norms"} <= set(diag)


def test_pretrain_output_set(run):
    assert {p.name for p in (run / "pt").iterdir()} == {"backbone.ckpt", "metrics.json", "config.json"}
    metrics = json.loads((run / "pt" / "metrics.json").read_text())
    assert len(metrics["epoch_losses"]) == 2


def test_pretrain_zero_epochs_is_identity(tmp_path, run):
    assert main(["pretrain", "--data", str(run / "d.jsonl"), "--out", str(tmp_path / "p"), "--hidden", "16",
                 "--epochs", "0", "--seed", "4"]) == 0
    saved = checkpoint_load(tmp_path / "p" / "backbone.ckpt")
    fresh = Backbone.init(6, 16, 2, seed=4)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(saved.parameters(), fresh.parameters()))


def test_tune_outputs_and_shots(run):
    out = run / "pt_run"
    assert {p.name for p in out.iterdir()} == {"config.json", "split.json", "model.ckpt", "metrics.json",
                                               "trace.csv", "codebook.csv"}
    labels = load_dataset(run / "d.jsonl").labels()
    train = json.loads((out / "split.json").read_text())["train"]
    assert np.bincount(labels[train]).tolist() == [10, 10]
    with open(out / "trace.csv") as fh:
        assert len(list(csv.DictReader(fh))) == len(json.loads((out / "metrics.json").read_text())["train_loss"])


def test_linear_probe_trains_head_only(tmp_path, run):
    out = tmp_path / "lp"
    assert main(["tune", "--mode", "linear_probe", "--data", str(run / "d.jsonl"), "--backbone", str(run / "pt"),
                 "--out", str(out), *TUNE]) == 0
    tuned = load_model(out / "model.ckpt")
    bb = checkpoint_load(run / "pt" / "backbone.ckpt").freeze()
    assert param_hash(tuned.backbone.parameters()) == param_hash(bb.parameters())
    assert tuned.prompt_model is None and tuned.universal is None
    untrained = Tuner(bb, load_dataset(run / "d.jsonl"), TrainConfig(mode="linear_probe", hidden=16))
    assert param_hash(tuned.head.parameters()) != param_hash(untrained.head.parameters())
    assert "codebook.csv" not in {p.name for p in out.iterdir()}


def test_double_ablation_composes(tmp_path, run):
    out = tmp_path / "abl"
    assert main(["tune", "--no-vq", "--mlp-projector", "--data", str(run / "d.jsonl"),
                 "--backbone", str(run / "pt"), "--out", str(out), *TUNE]) == 0
    tuned = load_model(out / "model.ckpt")
    assert tuned.cfg.no_vq and tuned.cfg.mlp_projector
    assert tuned.prompt_model.no_vq and isinstance(tuned.prompt_model.projector.down, Dense)


def test_eval_twice_identical(tmp_path, run, capsys):
    args = ["eval", "--model", str(run / "pt_run"), "--data", str(run / "d.jsonl"),
            "--split", str(run / "pt_run" / "split.json"), "--eval-split", "test"]
    assert main(args + ["--out", str(tmp_path / "a.json")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.json")]) == 0
    a = (tmp_path / "a.json").read_text()
    assert a == (tmp_path / "b.json").read_text()
    report = json.loads(a)
    assert report["split"] == "test" and set(report) == {"split", "accuracy", "auc", "loss"}
    test_acc = json.loads((run / "pt_run" / "metrics.json").read_text())["test_accuracy"]
    assert report["accuracy"] == test_acc


def test_export_round_trip(tmp_path, run):
    out = tmp_path / "cb.csv"
    assert main(["export-codebook", "--model", str(run / "pt_run"), "--data", str(run / "d.jsonl"),
                 "--out", str(out)]) == 0
    tuned = load_model(run / "pt_run" / "model.ckpt")
    cb = tuned.prompt_model.codebook
    assert len(out.read_text().splitlines()) == cb.K + 1
    E, rate = load_codebook_csv(out)
    assert rate.sum() == pytest.approx(1.0)
    p_c = np.random.default_rng(0).normal(size=(7, cb.dim))
    d_ref, _ = distances_and_logits(cb, p_c)
    cb.E = E
    d_back, _ = distances_and_logits(cb, p_c)
    assert np.abs(d_back - d_ref).max() <= 1e-12


def test_export_refuses_linear_probe(tmp_path, run):
    out = tmp_path / "lp"
    main(["tune", "--mode", "linear_probe", "--data", str(run / "d.jsonl"), "--backbone", str(run / "pt"),
          "--out", str(out), *TUNE])
    assert main(["export-codebook", "--model", str(out), "--out", str(tmp_path / "x.csv")]) == 2


def test_config_precedence(tmp_path, run):
    conf = tmp_path / "run.conf"
    conf.write_text("# tuning settings\nmode = linear_probe\nepochs = 3\nlr = 0.01  # faster\nhidden = 16\n")
    assert read_config_file(conf) == {"mode": "linear_probe", "epochs": 3, "lr": 0.01, "hidden": 16}
    out = tmp_path / "prec"
    assert main(["tune", "--config", str(conf), "--epochs", "2", "--data", str(run / "d.jsonl"),
                 "--backbone", str(run / "pt"), "--out", str(out), "--shots", "10"]) == 0
    echoed = json.loads((out / "config.json").read_text())
    assert (echoed["mode"], echoed["epochs"], echoed["lr"], echoed["codebook_size"]) == ("linear_probe", 2, 0.01, 20)
    bad = tmp_path / "bad.conf"
    bad.write_text("learning_rate = 3\n")
    assert main(["tune", "--config", str(bad)]) == 2


def test_rerun_from_echoed_config_is_bitwise(tmp_path, run):
    again = tmp_path / "again"
    assert main(["tune", "--config", str(run / "pt_run" / "config.json"), "--out", str(again)]) == 0
    for name in ("metrics.json", "model.ckpt", "codebook.csv", "trace.csv"):
        assert (again / name).read_bytes() == (run / "pt_run" / name).read_bytes()
