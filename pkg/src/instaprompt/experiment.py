"""Seeded desk-scale experiments on the synthetic benchmark.

One seed fixes the dataset, the k-shot split, the backbone initialisation
and pretraining, and every tuning run on top of it. Variants differ only in
their :class:`TrainConfig` overrides, so toggling an ablation never shifts
the data or the backbone.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, pretrain_edge_prediction
from .data import Dataset, SplitSpec, benchmark_spec, generate_synthetic, kshot_split
from .trainer import MetricsReport, TrainConfig, Tuner

# tuning settings shared by every benchmark variant; lr 5e-3 is one of the
# per-dataset rates of the reference hyperparameter table
BENCHMARK_TRAIN = {"lr": 5e-3}
PRETRAIN_EPOCHS = 30

BASELINES = {
    "linear_probe": {"mode": "linear_probe"},
    "universal_prompt": {"mode": "universal_prompt"},
    "prompt_tune": {"mode": "prompt_tune"},
}
ABLATIONS = {
    "prompt_tune": {"mode": "prompt_tune"},
    "no_vq": {"mode": "prompt_tune", "no_vq": True},
    "mlp_projector": {"mode": "prompt_tune", "mlp_projector": True},
}


@dataclass
class SeedSetup:
    seed: int
    dataset: Dataset
    backbone: Backbone
    train: Dataset
    val: Dataset
    test: Dataset


def prepare(seed: int, shots: int = 50, pretrain_epochs: int = PRETRAIN_EPOCHS, **spec_overrides) -> SeedSetup:
    """Benchmark data, 50-shot split and a frozen edge-prediction backbone for one seed."""
    ds = generate_synthetic(benchmark_spec(seed=seed, **spec_overrides))
    bb = Backbone.init(ds.feature_dim, 64, 2, seed=seed)
    pretrain_edge_prediction(ds, bb, epochs=pretrain_epochs, seed=seed)
    bb.freeze()
    tr, va, te = kshot_split(ds, SplitSpec(shots=shots, seed=seed))
    return SeedSetup(seed, ds, bb, ds.subset(tr), ds.subset(va), ds.subset(te))


@dataclass
class BenchmarkResult:
    reports: dict[str, list[MetricsReport]] = field(default_factory=dict)
    tuners: dict[str, list[Tuner]] = field(default_factory=dict)
    setups: list[SeedSetup] = field(default_factory=list)
    seconds: float = 0.0

    def accuracy(self, name: str) -> np.ndarray:
        return np.array([r.test_accuracy for r in self.reports[name]])

    def mean_accuracy(self) -> dict[str, float]:
        return {k: float(self.accuracy(k).mean()) for k in self.reports}

    def to_json(self) -> str:
        """Everything a rerun must reproduce; wall-clock time is left out."""
        body = {name: [json.loads(r.to_json()) for r in reps] for name, reps in self.reports.items()}
        body["mean_test_accuracy"] = self.mean_accuracy()
        return json.dumps(body, indent=2, sort_keys=True)


def run_benchmark(variants: dict[str, dict] | None = None, seeds=range(5), keep_tuners: bool = False,
                  setups: list[SeedSetup] | None = None, **train_overrides) -> BenchmarkResult:
    variants = variants or BASELINES
    start = time.perf_counter()
    out = BenchmarkResult()
    for i, seed in enumerate(seeds):
        setup = setups[i] if setups is not None else prepare(seed)
        out.setups.append(setup)
        for name, overrides in variants.items():
            kw = {**BENCHMARK_TRAIN, **train_overrides, **overrides, "seed": seed}
            tuner = Tuner(setup.backbone, setup.train, TrainConfig(**kw))
            out.reports.setdefault(name, []).append(tuner.fit(setup.train, setup.val, setup.test))
            if keep_tuners:
                out.tuners.setdefault(name, []).append(tuner)
    out.seconds = time.perf_counter() - start
    return out


@dataclass
class ClusterWitness:
    gaps: np.ndarray
    stds: np.ndarray
    spreads: np.ndarray
    cluster_means: np.ndarray
    collapse: bool

    @property
    def ratios(self) -> np.ndarray:
        """gap(a, b) / max(std_a, std_b) for every cluster pair (diagonal is inf)."""
        worst = np.maximum(self.stds[:, None], self.stds[None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(worst > 0, self.gaps / worst, np.inf)
        np.fill_diagonal(r, np.inf)
        return r

    @property
    def ratio(self) -> float:
        return float(self.ratios.min())


def cluster_witness(tuner: Tuner, ds: Dataset) -> ClusterWitness:
    """Compare quantised prompts grouped by each node's generating cluster.

    ``gaps`` holds L2 distances between cluster means. ``stds`` is the pooled
    per-coordinate standard deviation of the prompts in each cluster;
    ``spreads`` is the RMS distance to the cluster mean (sqrt(d) times larger),
    kept for reporting.
    """
    from .trainer import collapse_diagnostic

    pred = tuner.predict(ds)
    p_q = pred["p_q"]
    if p_q is None:
        raise ValueError(f"mode {tuner.cfg.mode!r} produces no per-node prompts")
    labels = np.concatenate(ds.meta["node_clusters"])
    ids = np.unique(labels)
    groups = [p_q[labels == c] for c in ids]
    means = np.stack([g.mean(axis=0) for g in groups])
    stds = np.array([np.sqrt(g.var(axis=0).mean()) for g in groups])
    spreads = np.array([np.sqrt(((g - m) ** 2).sum(axis=1).mean()) for g, m in zip(groups, means)])
    gaps = np.sqrt(((means[:, None, :] - means[None, :, :]) ** 2).sum(-1))
    return ClusterWitness(gaps, stds, spreads, means, collapse_diagnostic(p_q, tuner._codes()).collapsed)
