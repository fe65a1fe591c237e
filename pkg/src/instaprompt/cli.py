"""Command-line entry points: synth, pretrain, tune, eval, export-codebook.

Every option can also come from a flat ``key = value`` config file passed
with ``--config``; command-line flags win over the file, the file wins over
built-in defaults. The fully resolved configuration is written to
``config.json`` in the output directory before any work starts.

Exit codes: 0 success, 2 usage or configuration problem, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import NumericalAbort
from .backbone import (
    Backbone,
    CheckpointError,
    PretrainError,
    checkpoint_load,
    checkpoint_save,
    edge_prediction_auc,
    pretrain_edge_prediction,
)
from .data import (
    InsufficientDataError,
    ParseError,
    SchemaError,
    SpecError,
    SplitSpec,
    SyntheticSpec,
    benchmark_spec,
    generate_synthetic,
    kshot_split,
    load_dataset,
    load_split,
    save_dataset,
    save_split,
)
from .trainer import TrainConfig, Tuner, load_model, save_model
from .vq import ConfigurationError, export_codebook, utilization_stats

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

BACKBONE_FILE = "backbone.ckpt"
MODEL_FILE = "model.ckpt"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Every knob a run can read. Trainer fields mirror ``TrainConfig``."""

    command: str = ""
    out: str = ""
    seed: int = 0
    # data
    data: str = ""
    split: str = ""
    classes: int = 2
    per_class: int = 100
    nodes_min: int = 8
    nodes_max: int = 16
    dim: int = 8
    sigma: float = 0.1
    clusters: int = 0
    benchmark: bool = False
    val_fraction: float = 0.5
    # backbone and pretraining
    backbone: str = ""
    layers: int = 2
    pretrain_epochs: int = 50
    pretrain_lr: float = 5e-3
    neg_ratio: float = 1.0
    # tuning
    mode: str = "prompt_tune"
    lr: float = 1e-3
    lam: float = 0.01
    epochs: int = 200
    batch_size: int = 32
    shots: int = 50
    patience: int = 30
    hidden: int = 64
    head_depth: int = 2
    phm_n: int = 4
    bottleneck: int = 0
    beta: float = 1.0
    codebook_size: int = 20
    samples: int = 10
    tau: float = 1.0
    alpha: float = 0.99
    codebook_init: str = "first-batch"
    ema_every: int = 1
    no_vq: bool = False
    mlp_projector: bool = False
    straight_through: bool = True
    # eval / export
    model: str = ""
    eval_split: str = "test"

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        kw["bottleneck"] = self.bottleneck or None
        kw["shots"] = self.shots or None
        return TrainConfig(**kw)


FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _coerce(key: str, raw):
    kind = FIELD_TYPES[key]
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise UsageError(f"{key}: expected {kind.__name__}, got {text!r}") from None


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped.

    A JSON object (such as a run's echoed ``config.json``) is accepted too, so
    a finished run can be repeated from its own record.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    if text.lstrip().startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON config: {exc}") from None
        obj.pop("command", None)
        unknown = sorted(set(obj) - set(FIELD_TYPES))
        if unknown:
            raise UsageError(f"{path}: unknown keys {unknown}")
        return {k: _coerce(k, v) for k, v in obj.items()}
    lines = text.splitlines()
    out = {}
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELD_TYPES or key == "command":
            raise UsageError(f"{path}:{no}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve(command: str, args: argparse.Namespace) -> RunConfig:
    """defaults < config file < flags."""
    merged = dataclasses.asdict(RunConfig())
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    for key, value in vars(args).items():
        if key in FIELD_TYPES and value is not None:
            merged[key] = _coerce(key, value)
    merged["command"] = command
    return RunConfig(**merged)


def echo_config(cfg: RunConfig, outdir: Path) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _need(value: str, flag: str) -> str:
    if not value:
        raise UsageError(f"{flag} is required")
    return value


def _load_data(path: str):
    p = Path(_need(path, "--data"))
    if not p.is_file():
        raise UsageError(f"dataset {p} does not exist")
    return load_dataset(p)


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> int:
    out = Path(_need(cfg.out, "--out"))
    if cfg.benchmark:
        spec = benchmark_spec(seed=cfg.seed)
    else:
        spec = SyntheticSpec(n_classes=cfg.classes, graphs_per_class=cfg.per_class,
                             nodes_range=(cfg.nodes_min, cfg.nodes_max), feature_dim=cfg.dim,
                             sigma=cfg.sigma, seed=cfg.seed, n_clusters=cfg.clusters or None)
    ds = generate_synthetic(spec)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    labels, counts = np.unique(ds.labels(), return_counts=True)
    for c, n in zip(labels, counts):
        print(f"class {int(c)}: {int(n)} graphs")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig) -> int:
    outdir = Path(_need(cfg.out, "--out"))
    ds = _load_data(cfg.data)
    echo_config(cfg, outdir)
    bb = Backbone.init(ds.feature_dim, cfg.hidden, cfg.layers, seed=cfg.seed)
    try:
        res = pretrain_edge_prediction(ds, bb, epochs=cfg.pretrain_epochs, neg_ratio=cfg.neg_ratio,
                                       lr=cfg.pretrain_lr, seed=cfg.seed, batch_size=cfg.batch_size)
    except NumericalAbort as exc:
        _write_json(outdir / "diagnostics.json", {"error": str(exc), **exc.diagnostics})
        raise
    checkpoint_save(outdir / BACKBONE_FILE, bb)
    _write_json(outdir / "metrics.json", {
        "epoch_losses": res.epoch_losses,
        "edge_auc": edge_prediction_auc(ds, bb, seed=cfg.seed),
    })
    return EXIT_OK


def _backbone_path(path: str) -> Path:
    p = Path(_need(path, "--backbone"))
    if p.is_dir():
        p = p / BACKBONE_FILE
    if not p.is_file():
        raise UsageError(f"backbone checkpoint {p} does not exist")
    return p


def _model_path(path: str) -> Path:
    p = Path(_need(path, "--model"))
    if p.is_dir():
        p = p / MODEL_FILE
    if not p.is_file():
        raise UsageError(f"model checkpoint {p} does not exist")
    return p


def cmd_tune(cfg: RunConfig) -> int:
    outdir = Path(_need(cfg.out, "--out"))
    ds = _load_data(cfg.data)
    tcfg = cfg.train_config()
    bb = checkpoint_load(_backbone_path(cfg.backbone), hidden=cfg.hidden, d_in=ds.feature_dim).freeze()
    if cfg.split:
        split = load_split(cfg.split)
        tr, va, te = split["train"], split["val"], split["test"]
    else:
        tr, va, te = kshot_split(ds, SplitSpec(shots=cfg.shots, seed=cfg.seed, val_fraction=cfg.val_fraction))
    echo_config(cfg, outdir)
    save_split({"train": tr, "val": va, "test": te}, outdir / "split.json")
    train, val, test = ds.subset(tr), ds.subset(va), ds.subset(te)
    tuner = Tuner(bb, train, tcfg)
    try:
        report = tuner.fit(train, val, test)
    except NumericalAbort as exc:
        _write_json(outdir / "diagnostics.json", {"error": str(exc), **exc.diagnostics})
        raise
    save_model(outdir / MODEL_FILE, tuner)
    (outdir / "metrics.json").write_text(report.to_json())
    rows = report.trace_rows()
    with open(outdir / "trace.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "val_auc", "prompt_variance"])
        w.writeheader()
        w.writerows(rows)
    if tuner.prompt_model is not None and not tcfg.no_vq:
        export_codebook(tuner.prompt_model.codebook, outdir / "codebook.csv", report.codebook_hit_rate)
    print(f"{tcfg.mode}: test accuracy {report.test_accuracy:.4f}"
          + (f", test auc {report.test_auc:.4f}" if report.test_auc is not None else ""))
    return EXIT_OK


def _eval_subset(cfg: RunConfig, ds):
    if not cfg.split:
        return ds
    split = load_split(cfg.split)
    if cfg.eval_split not in split:
        raise UsageError(f"split file has no {cfg.eval_split!r} part")
    return ds.subset(split[cfg.eval_split])


def cmd_eval(cfg: RunConfig) -> int:
    tuner = load_model(_model_path(cfg.model))
    ds = _load_data(cfg.data)
    ev = tuner.evaluate(_eval_subset(cfg, ds))
    text = json.dumps({"split": cfg.eval_split if cfg.split else "all", "accuracy": ev["accuracy"],
                       "auc": ev["auc"], "loss": ev["loss"]}, indent=2, sort_keys=True)
    if cfg.out:
        Path(cfg.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_export_codebook(cfg: RunConfig) -> int:
    tuner = load_model(_model_path(cfg.model))
    pm = tuner.prompt_model
    if pm is None or pm.no_vq:
        raise UsageError(f"model trained in mode {tuner.cfg.mode!r} has no codebook")
    rate = None
    if cfg.data:
        ev = tuner.evaluate(_eval_subset(cfg, _load_data(cfg.data)))
        rate = utilization_stats(pm.codebook, ev["indices"]).hit_rate
    out = Path(_need(cfg.out, "--out"))
    if out.is_dir():
        out = out / "codebook.csv"
    export_codebook(pm.codebook, out, rate)
    print(f"wrote {pm.codebook.K} codes to {out}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "tune": cmd_tune,
    "eval": cmd_eval,
    "export-codebook": cmd_export_codebook,
}


# ------------------------------------------------------------------ parser


def _flag(p, name, kind, help_text):
    """Every flag defaults to None so that unset flags fall through to the config file."""
    dest = name.replace("-", "_")
    if kind is bool:
        p.add_argument(f"--{name}", dest=dest, action="store_const", const=True, default=None, help=help_text)
    else:
        p.add_argument(f"--{name}", dest=dest, type=kind, default=None, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="instaprompt", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", default=None, help="flat key = value config file")
        _flag(p, "out", str, out_help)
        _flag(p, "seed", int, "master seed")

    p = sub.add_parser("synth", help="write a synthetic graph classification dataset")
    common(p, "output JSON Lines file")
    for name, kind, h in [("classes", int, "number of classes"), ("per-class", int, "graphs per class"),
                          ("nodes-min", int, "fewest nodes per graph"), ("nodes-max", int, "most nodes per graph"),
                          ("dim", int, "feature dimension"), ("sigma", float, "feature noise std"),
                          ("clusters", int, "feature clusters (default: one per class)"),
                          ("benchmark", bool, "write the seeded tuning benchmark instead")]:
        _flag(p, name, kind, h)

    p = sub.add_parser("pretrain", help="edge-prediction pretraining of a GCN backbone")
    common(p, "output directory")
    for name, kind, h in [("data", str, "dataset file"), ("hidden", int, "hidden width"),
                          ("layers", int, "GCN layers"), ("pretrain-epochs", int, "pretraining epochs"),
                          ("pretrain-lr", float, "pretraining learning rate"),
                          ("neg-ratio", float, "negatives per positive edge"), ("batch-size", int, "graphs per batch")]:
        _flag(p, name, kind, h)
    # --epochs is the natural spelling here; it maps onto pretrain_epochs
    p.add_argument("--epochs", dest="pretrain_epochs", type=int, default=None, help=argparse.SUPPRESS)

    p = sub.add_parser("tune", help="tune on a frozen backbone in one of four modes")
    common(p, "output directory")
    for name, kind, h in [
        ("data", str, "dataset file"), ("backbone", str, "backbone checkpoint or pretrain directory"),
        ("split", str, "split JSON (default: draw a k-shot split)"), ("mode", str, "prompt_tune, linear_probe, "
                                                                             "fine_tune or universal_prompt"),
        ("shots", int, "training graphs per class"), ("val-fraction", float, "share of the rest used for validation"),
        ("lr", float, "learning rate"), ("lam", float, "consistency weight"), ("epochs", int, "maximum epochs"),
        ("batch-size", int, "graphs per batch"), ("patience", int, "early-stopping patience"),
        ("hidden", int, "backbone hidden width"), ("head-depth", int, "affine layers in the head"),
        ("phm-n", int, "Kronecker factors per PHM layer"), ("bottleneck", int, "projector bottleneck width"),
        ("beta", float, "static prompt weight"), ("codebook-size", int, "codes K"),
        ("samples", int, "draws per prompt M"), ("tau", float, "sampling temperature"),
        ("alpha", float, "EMA decay"), ("codebook-init", str, "gaussian or first-batch"),
        ("ema-every", int, "EMA update every this many steps"), ("no-vq", bool, "skip quantisation"),
        ("mlp-projector", bool, "dense projector instead of PHM"),
    ]:
        _flag(p, name, kind, h)
    p.add_argument("--no-straight-through", dest="straight_through", action="store_const", const=False,
                   default=None, help="block gradients through the quantiser")

    for name, h in [("eval", "evaluate a tuned model"), ("export-codebook", "write the codebook with hit rates")]:
        p = sub.add_parser(name, help=h)
        common(p, "output file")
        _flag(p, "model", str, "model checkpoint or tune directory")
        _flag(p, "data", str, "dataset file")
        _flag(p, "split", str, "split JSON written by tune")
        _flag(p, "eval-split", str, "train, val or test")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ParseError, SchemaError, SpecError, InsufficientDataError, CheckpointError,
            PretrainError, ConfigurationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
