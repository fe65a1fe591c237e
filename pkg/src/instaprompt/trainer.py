"""Tuning regimes on top of a pretrained backbone, the combined objective,
evaluation and collapse checks."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalAbort, Tensor
from .backbone import Backbone, backbone_forward, backbone_from_state, backbone_state, readout_mean
from .data import MULTITASK, Dataset, collate
from .metrics import UndefinedMetricError, macro_roc_auc, roc_auc
from .phm import BottleneckProjector, Dense
from .prompt import ContractError, PromptedBatch, PromptModel, apply_prompts, generate_prompts
from .rng import stream
from .vq import Codebook, ema_update, init_codebook, utilization_stats

logger = logging.getLogger(__name__)

MODES = ("prompt_tune", "linear_probe", "fine_tune", "universal_prompt")
MODEL_FORMAT = "instaprompt.model"
MODEL_VERSION = 1

__all__ = [
    "MODES", "TrainConfig", "ProjectionHead", "MetricsReport", "CollapseStatus", "NumericalAbort",
    "Tuner", "loss_total", "consistency_loss", "collapse_diagnostic", "roc_auc",
]


@dataclass
class TrainConfig:
    mode: str = "prompt_tune"
    lr: float = 1e-3
    lam: float = 0.01
    epochs: int = 200
    batch_size: int = 32
    shots: int | None = 50
    seed: int = 0
    patience: int = 30
    hidden: int = 64
    head_depth: int = 2
    phm_n: int = 4
    bottleneck: int | None = None
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

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 1 <= self.head_depth <= 4:
            raise ValueError("head depth must lie in 1..4")
        if self.ema_every < 1:
            raise ValueError("ema_every must be >= 1")

    @property
    def bottleneck_dim(self) -> int:
        return self.bottleneck or self.hidden // 4

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class ProjectionHead:
    """MLP from graph embedding to logits; ``depth`` counts affine layers."""

    def __init__(self, d: int, out: int, depth: int = 2, rng=None, layers: list[Dense] | None = None):
        if layers is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            sizes = [d] * depth + [out]
            layers = [Dense.init(a, b, rng, f"head{i}") for i, (a, b) in enumerate(zip(sizes, sizes[1:]))]
        self.layers = layers

    def __call__(self, z: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            z = layer(z)
            if i < len(self.layers) - 1:
                z = ad.relu(z)
        return z

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


@dataclass
class CollapseStatus:
    collapsed: bool
    variance: float
    suppressed: bool = False


def collapse_diagnostic(p_q, K: int, threshold: float = 1e-8) -> CollapseStatus:
    """Flag prompts that no longer vary across nodes. K = 1 is expected to be constant."""
    q = np.asarray(p_q, dtype=np.float64)
    var = float(q.reshape(len(q), -1).var(axis=0).mean()) if len(q) > 1 else 0.0
    if K <= 1:
        return CollapseStatus(False, var, suppressed=True)
    return CollapseStatus(var < threshold, var)


@dataclass
class MetricsReport:
    mode: str
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_auc: list[float | None] = field(default_factory=list)
    prompt_variance: list[float] = field(default_factory=list)
    test_accuracy: float | None = None
    test_auc: float | None = None
    best_epoch: int | None = None
    codebook_hit_rate: list[float] | None = None
    trainable_params: int = 0
    collapse: bool = False

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    def trace_rows(self) -> list[dict]:
        return [{"epoch": i, "train_loss": t, "val_loss": v, "val_auc": a, "prompt_variance": p}
                for i, (t, v, a, p) in enumerate(zip(self.train_loss, self.val_loss, self.val_auc,
                                                     self.prompt_variance or [None] * len(self.train_loss)))]


# ---------------------------------------------------------------------- losses


def consistency_loss(batch: PromptedBatch) -> Tensor:
    """Summed squared gap between quantised and intermediate prompts, per graph.

    p_q enters as a constant, so the gradient reaches only p_c.
    """
    num_graphs = getattr(batch.graph, "num_graphs", 1)
    return ad.scale(ad.sum_sq_diff(batch.p_c, ad.constant(batch.p_q)), 1.0 / num_graphs)


def loss_total(logits: Tensor, targets, batch: PromptedBatch | None, lam: float, mask=None,
               needs_prompts: bool = True) -> Tensor:
    """Cross-entropy plus ``lam`` times the prompt consistency term."""
    ce = ad.softmax_cross_entropy(logits, targets, mask)
    if not needs_prompts or lam == 0:
        return ce
    if batch is None:
        raise ContractError("consistency term needs prompt bookkeeping (p_c, p_q)")
    return ad.add(ce, ad.scale(consistency_loss(batch), lam))


# ---------------------------------------------------------------------- tuner


def param_hash(params: Sequence[Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


class Tuner:
    """One tuning run: owns the head, prompt parameters and optimizer state.

    The supplied backbone is frozen and never modified; ``fine_tune`` works
    on an unfrozen copy.
    """

    def __init__(self, backbone: Backbone, train: Dataset, cfg: TrainConfig):
        self.cfg = cfg
        self.task = train.task
        self.num_outputs = train.num_outputs
        self.backbone = backbone.copy().freeze()
        if cfg.mode == "fine_tune":
            self.backbone.unfreeze()
        d = self.backbone.hidden
        self.head = ProjectionHead(d, self.num_outputs, cfg.head_depth, stream(cfg.seed, "init/head"))
        self.prompt_model: PromptModel | None = None
        self.universal: Tensor | None = None
        if cfg.mode == "prompt_tune":
            self.prompt_model = self._build_prompt_model(train)
        elif cfg.mode == "universal_prompt":
            self.universal = ad.parameter(np.zeros(d), "universal_prompt")
        self.optimizer = ad.Adam(self.trainable_parameters(), lr=cfg.lr)
        self.shuffle_rng = stream(cfg.seed, "shuffle")
        self.sample_rng = stream(cfg.seed, "sampling")
        self.step_count = 0

    def _build_prompt_model(self, train: Dataset) -> PromptModel:
        cfg, d = self.cfg, self.backbone.hidden
        proj = BottleneckProjector.init(d, cfg.bottleneck_dim, cfg.phm_n, stream(cfg.seed, "init/projector"),
                                        mlp=cfg.mlp_projector)
        kw = dict(alpha=cfg.alpha, tau=cfg.tau, samples=cfg.samples)
        if cfg.codebook_init == "first-batch":
            H = backbone_forward(collate(train.graphs), self.backbone).data
            cb = init_codebook(cfg.codebook_size, d, "first-batch", cfg.seed, first_batch=proj(ad.constant(H)).data, **kw)
        else:
            cb = init_codebook(cfg.codebook_size, d, cfg.codebook_init, cfg.seed, **kw)
        # warm-start counts at the expected per-code hits of one batch; from 1.0
        # the first ~1/(1-alpha) updates divide hit sums by a lagging count and
        # inflate the codes
        nodes = np.mean([g.num_nodes for g in train.graphs]) * min(cfg.batch_size, len(train))
        cb.counts = np.full(cb.K, max(nodes * cfg.samples / cb.K, cb.floor))
        return PromptModel(proj, cb, ad.parameter(np.zeros(d), "static_prompt"), cfg.beta,
                           no_vq=cfg.no_vq, straight_through=cfg.straight_through)

    # parameters --------------------------------------------------------------

    def prompt_parameters(self) -> list[Tensor]:
        if self.prompt_model is not None:
            return self.prompt_model.parameters()
        if self.universal is not None:
            return [self.universal]
        return []

    def trainable_parameters(self) -> list[Tensor]:
        ps = self.head.parameters() + self.prompt_parameters()
        if self.cfg.mode == "fine_tune":
            ps = self.backbone.parameters() + ps
        return ps

    def parameter_counts(self) -> dict[str, int]:
        count = lambda ps: int(sum(p.data.size for p in ps))  # noqa: E731
        return {
            "head": count(self.head.parameters()),
            "prompt": count(self.prompt_parameters()),
            "backbone": count(self.backbone.parameters()) if self.cfg.mode == "fine_tune" else 0,
            "total": count(self.trainable_parameters()),
        }

    # forward -----------------------------------------------------------------

    def forward(self, batch, rng) -> tuple[Tensor, PromptedBatch | None]:
        mode = self.cfg.mode
        if mode == "prompt_tune":
            pb = generate_prompts(batch, self.backbone, self.prompt_model, rng)
            return self.head(apply_prompts(batch, self.backbone, pb)), pb
        if mode == "universal_prompt":
            return self.head(apply_prompts(batch, self.backbone, self.universal)), None
        z = readout_mean(backbone_forward(batch, self.backbone), batch)
        return self.head(z), None

    def _loss(self, logits, batch, pb) -> Tensor:
        needs = self.cfg.mode == "prompt_tune" and not self.cfg.no_vq
        return loss_total(logits, batch.labels, pb, self.cfg.lam, batch.mask, needs_prompts=needs)

    # training ----------------------------------------------------------------

    def train_epoch(self, ds: Dataset, epoch: int = 0) -> float:
        cfg = self.cfg
        order = self.shuffle_rng.permutation(len(ds))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = collate([ds.graphs[i] for i in order[start:start + cfg.batch_size]])
            self.optimizer.zero_grad()
            logits, pb = self.forward(batch, self.sample_rng)
            loss = self._loss(logits, batch, pb)
            ad.backward(loss)
            if not np.isfinite(loss.data):
                raise NumericalAbort(f"non-finite loss at epoch {epoch}, batch {b}", {
                    "lr": cfg.lr, "epoch": epoch, "batch": b, "loss": float(loss.data),
                    "grad_norms": {p.name or str(i): float(np.linalg.norm(p.grad))
                                   for i, p in enumerate(self.optimizer.params) if p.grad is not None},
                })
            self.optimizer.step()
            self.step_count += 1
            if pb is not None and pb.indices is not None and self.step_count % cfg.ema_every == 0:
                ema_update(self.prompt_model.codebook, pb.p_c.data, pb.indices)
            losses.append(float(loss.data))
        return float(np.mean(losses))

    # evaluation --------------------------------------------------------------

    def predict(self, ds: Dataset) -> dict:
        """Logits, targets and quantised prompts for ``ds`` without touching state."""
        rng = stream(self.cfg.seed, "eval")
        logits, p_q, indices, losses, sizes = [], [], [], [], []
        for start in range(0, len(ds), self.cfg.batch_size):
            batch = collate(ds.graphs[start:start + self.cfg.batch_size])
            out, pb = self.forward(batch, rng)
            losses.append(float(self._loss(out, batch, pb).data))
            sizes.append(batch.num_graphs)
            logits.append(out.data)
            if pb is not None:
                p_q.append(pb.p_q)
                if pb.indices is not None:
                    indices.append(pb.indices)
        return {
            "logits": np.concatenate(logits),
            "loss": float(np.average(losses, weights=sizes)),
            "p_q": np.concatenate(p_q) if p_q else None,
            "indices": np.concatenate(indices) if indices else None,
        }

    def evaluate(self, ds: Dataset) -> dict:
        pred = self.predict(ds)
        Z = pred["logits"]
        if self.task == MULTITASK:
            y = ds.labels()
            mask = ~np.isnan(y)
            scores = 1.0 / (1.0 + np.exp(-Z))
            acc = float(((scores > 0.5) == (y > 0.5))[mask].mean())
            try:
                auc = macro_roc_auc(scores, np.nan_to_num(y), mask)
            except UndefinedMetricError:
                auc = None
        else:
            y = ds.labels()
            e = np.exp(Z - Z.max(axis=1, keepdims=True))
            scores = e / e.sum(axis=1, keepdims=True)
            acc = float((Z.argmax(axis=1) == y).mean())
            try:
                auc = macro_roc_auc(scores, y)
            except UndefinedMetricError:
                auc = None
        return {"accuracy": acc, "auc": auc, "loss": pred["loss"], "p_q": pred["p_q"],
                "indices": pred["indices"]}

    # state -------------------------------------------------------------------

    def snapshot(self) -> dict:
        snap = {"params": [p.data.copy() for p in self.trainable_parameters()]}
        if self.prompt_model is not None:
            snap["codebook"] = self.prompt_model.codebook.copy()
        return snap

    def restore(self, snap: dict) -> None:
        for p, v in zip(self.trainable_parameters(), snap["params"]):
            p.data = v.copy()
        if "codebook" in snap:
            self.prompt_model.codebook = snap["codebook"].copy()

    def fit(self, train: Dataset, val: Dataset | None = None, test: Dataset | None = None) -> MetricsReport:
        """Train with early stopping on validation ROC-AUC (accuracy if AUC is undefined)."""
        cfg = self.cfg
        report = MetricsReport(cfg.mode, trainable_params=self.parameter_counts()["total"])
        best, best_score, since = None, -np.inf, 0
        for epoch in range(cfg.epochs):
            report.train_loss.append(self.train_epoch(train, epoch))
            if val is None or len(val) == 0:
                continue
            ev = self.evaluate(val)
            report.val_loss.append(ev["loss"])
            report.val_auc.append(ev["auc"])
            if ev["p_q"] is not None:
                report.prompt_variance.append(collapse_diagnostic(ev["p_q"], self._codes()).variance)
            score = (ev["auc"] if ev["auc"] is not None else ev["accuracy"], -ev["loss"])
            if best is None or score > best_score:
                best, best_score, since = self.snapshot(), score, 0
                report.best_epoch = epoch
            else:
                since += 1
                if since >= cfg.patience:
                    break
        if best is not None:
            self.restore(best)
        if test is not None and len(test):
            ev = self.evaluate(test)
            report.test_accuracy = ev["accuracy"]
            report.test_auc = ev["auc"]
            if ev["indices"] is not None:
                report.codebook_hit_rate = utilization_stats(self.prompt_model.codebook, ev["indices"]).hit_rate.tolist()
            if ev["p_q"] is not None:
                report.collapse = collapse_diagnostic(ev["p_q"], self._codes()).collapsed
        return report

    def _codes(self) -> int:
        pm = self.prompt_model
        return 0 if pm is None or pm.no_vq else pm.codebook.K

    # persistence ---------------------------------------------------------------

    def state(self) -> dict:
        body = {
            "config": self.cfg.to_dict(),
            "task": self.task,
            "num_outputs": self.num_outputs,
            "backbone": backbone_state(self.backbone),
            "head": [{"weight": l.weight.data.tolist(), "bias": l.bias.data.tolist()} for l in self.head.layers],
        }
        if self.universal is not None:
            body["universal_prompt"] = self.universal.data.tolist()
        if self.prompt_model is not None:
            pm = self.prompt_model
            cb = pm.codebook
            body["prompt_model"] = {
                "projector": {p.name: p.data.tolist() for p in pm.projector.parameters()},
                "static_prompt": pm.static_prompt.data.tolist(),
                "codebook": {"E": cb.E.tolist(), "counts": cb.counts.tolist(), "alpha": cb.alpha,
                             "tau": cb.tau, "samples": cb.samples, "floor": cb.floor},
            }
        return body

    @classmethod
    def from_state(cls, body: dict) -> "Tuner":
        cfg = TrainConfig(**body["config"])
        bb = backbone_from_state(body["backbone"])
        self = cls.__new__(cls)
        self.cfg = cfg
        self.task = body["task"]
        self.num_outputs = body["num_outputs"]
        self.backbone = bb.freeze()
        if cfg.mode == "fine_tune":
            self.backbone.unfreeze()
        self.head = ProjectionHead(0, 0, layers=[
            Dense(ad.parameter(np.array(l["weight"]), f"head{i}.weight"), ad.parameter(np.array(l["bias"]), f"head{i}.bias"))
            for i, l in enumerate(body["head"])])
        self.universal = None
        self.prompt_model = None
        if "universal_prompt" in body:
            self.universal = ad.parameter(np.array(body["universal_prompt"]), "universal_prompt")
        if "prompt_model" in body:
            pmb = body["prompt_model"]
            d = bb.hidden
            proj = BottleneckProjector.init(d, cfg.bottleneck_dim, cfg.phm_n, np.random.default_rng(0),
                                            mlp=cfg.mlp_projector)
            for p in proj.parameters():
                p.data = np.array(pmb["projector"][p.name], dtype=np.float64)
            c = pmb["codebook"]
            cb = Codebook(np.array(c["E"]), np.array(c["counts"]), c["alpha"], c["tau"], c["samples"], c["floor"])
            self.prompt_model = PromptModel(proj, cb, ad.parameter(np.array(pmb["static_prompt"]), "static_prompt"),
                                            cfg.beta, no_vq=cfg.no_vq, straight_through=cfg.straight_through)
        self.optimizer = ad.Adam(self.trainable_parameters(), lr=cfg.lr)
        self.shuffle_rng = stream(cfg.seed, "shuffle")
        self.sample_rng = stream(cfg.seed, "sampling")
        self.step_count = 0
        return self


def save_model(path, tuner: Tuner) -> None:
    from .backbone import write_container

    write_container(path, MODEL_FORMAT, MODEL_VERSION, tuner.state())


def load_model(path) -> Tuner:
    from .backbone import read_container

    return Tuner.from_state(read_container(path, MODEL_FORMAT, MODEL_VERSION))
