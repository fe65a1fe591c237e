"""Mean-aggregation message-passing encoder and edge-prediction pretraining."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, GraphInstance, SchemaError, collate
from .metrics import roc_auc
from .rng import stream

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "instaprompt.backbone"
CHECKPOINT_VERSION = 1


class PretrainError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class GcnLayer:
    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        d = self.weight.shape[0]
        if self.weight.shape != (d, d) or self.bias.shape != (d,):
            raise SchemaError(f"GcnLayer needs a square weight and matching bias, got "
                              f"{self.weight.shape} and {self.bias.shape}")


@dataclass
class Backbone:
    w_in: Tensor
    b_in: Tensor
    layers: list[GcnLayer]
    frozen: bool = False

    def __post_init__(self):
        if not self.layers:
            raise SchemaError("a backbone needs at least one message-passing layer")

    @classmethod
    def init(cls, d_in: int, hidden: int = 64, num_layers: int = 2, seed: int = 0,
             gain: float = 0.5) -> "Backbone":
        rng = stream(seed, "init/backbone")

        def w(fan_in, fan_out):
            return rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out))

        layers = [GcnLayer(ad.parameter(w(hidden, hidden), f"gcn{i}.weight"),
                           ad.parameter(np.zeros(hidden), f"gcn{i}.bias"))
                  for i in range(num_layers)]
        return cls(ad.parameter(w(d_in, hidden), "encoder.weight"),
                   ad.parameter(np.zeros(hidden), "encoder.bias"), layers)

    @property
    def d_in(self) -> int:
        return self.w_in.shape[0]

    @property
    def hidden(self) -> int:
        return self.w_in.shape[1]

    def parameters(self) -> list[Tensor]:
        ps = [self.w_in, self.b_in]
        for layer in self.layers:
            ps += [layer.weight, layer.bias]
        return ps

    def freeze(self) -> "Backbone":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def unfreeze(self) -> "Backbone":
        for p in self.parameters():
            p.requires_grad = True
        self.frozen = False
        return self

    def copy(self) -> "Backbone":
        clone = Backbone(
            Tensor(self.w_in.data, self.w_in.requires_grad, self.w_in.name),
            Tensor(self.b_in.data, self.b_in.requires_grad, self.b_in.name),
            [GcnLayer(Tensor(l.weight.data, l.weight.requires_grad, l.weight.name),
                      Tensor(l.bias.data, l.bias.requires_grad, l.bias.name)) for l in self.layers],
            self.frozen,
        )
        return clone


def encode_inputs(g: GraphInstance, bb: Backbone) -> Tensor:
    """Lift raw node features to the hidden width: relu(X W_in + b_in)."""
    if g.features.shape[1] != bb.d_in:
        raise SchemaError(f"graph has {g.features.shape[1]} features, backbone expects {bb.d_in}")
    return ad.relu(ad.add(ad.matmul(ad.constant(g.features), bb.w_in), bb.b_in))


def gcn_forward(h: Tensor, g: GraphInstance, layer: GcnLayer, activate: bool = True) -> Tensor:
    """Average each node with its neighbours, then apply the layer's affine map."""
    if h.shape[0] != g.num_nodes:
        raise SchemaError(f"{h.shape[0]} embedding rows for {g.num_nodes} nodes")
    out = ad.add(ad.matmul(ad.spmm(g.mean_adjacency, h), layer.weight), layer.bias)
    return ad.relu(out) if activate else out


def propagate(h: Tensor, g: GraphInstance, bb: Backbone) -> Tensor:
    """Run all message-passing layers over already-embedded features."""
    last = len(bb.layers) - 1
    for i, layer in enumerate(bb.layers):
        h = gcn_forward(h, g, layer, activate=i < last)
    return h


def backbone_forward(g: GraphInstance, bb: Backbone) -> Tensor:
    return propagate(encode_inputs(g, bb), g, bb)


def readout_mean(H: Tensor, g=None) -> Tensor:
    """Column mean of node embeddings.

    A single graph gives a ``(1, d)`` row; a :class:`GraphBatch` gives one row
    per member graph.
    """
    if H.shape[0] == 0:
        raise ValueError("readout of a graph with no nodes")
    if g is not None and hasattr(g, "pool"):
        return ad.spmm(g.pool, H)
    return ad.mean_rows(H)


# ------------------------------------------------------------------ pretraining


def _negative_pairs(n: int, edges: np.ndarray, count: int, rng) -> np.ndarray:
    iu, ju = np.triu_indices(n, k=1)
    taken = set(map(tuple, edges.tolist()))
    cand = [(a, b) for a, b in zip(iu.tolist(), ju.tolist()) if (a, b) not in taken]
    if not cand or count == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pick = rng.integers(0, len(cand), size=count)
    return np.asarray(cand, dtype=np.int64)[pick]


def edge_batch(graphs, neg_ratio: float, rng):
    """Collate graphs and return (batch, pairs, targets) for edge prediction."""
    batch = collate(graphs)
    pairs, targets = [], []
    offset = 0
    for g in graphs:
        if len(g.edges):
            pos = g.edges + offset
            neg = _negative_pairs(g.num_nodes, g.edges, int(round(neg_ratio * len(g.edges))), rng) + offset
            pairs += [pos, neg]
            targets += [np.ones(len(pos)), np.zeros(len(neg))]
        offset += g.num_nodes
    if not pairs:
        return batch, np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    return batch, np.concatenate(pairs), np.concatenate(targets)


def edge_logits(H: Tensor, pairs: np.ndarray) -> Tensor:
    return ad.row_sum(ad.mul(ad.take_rows(H, pairs[:, 0]), ad.take_rows(H, pairs[:, 1])))


@dataclass
class PretrainResult:
    backbone: Backbone
    epoch_losses: list[float] = field(default_factory=list)
    initial_loss: float | None = None


def pretrain_edge_prediction(ds: Dataset, bb: Backbone, epochs: int = 50, neg_ratio: float = 1.0,
                             lr: float = 5e-3, seed: int = 0, batch_size: int = 32) -> PretrainResult:
    """Fit the backbone so sigmoid(H_u . H_v) predicts whether (u, v) is an edge."""
    if bb.frozen:
        raise PretrainError("cannot pretrain a frozen backbone")
    if neg_ratio <= 0:
        raise PretrainError("neg_ratio must be positive; without negatives the objective is degenerate")
    graphs = [g for g in ds if g.num_nodes >= 2]
    if not any(len(g.edges) for g in graphs):
        raise PretrainError("dataset has no edges to predict")
    rng = stream(seed, "pretrain")
    opt = ad.Adam(bb.parameters(), lr=lr)
    result = PretrainResult(bb)
    for epoch in range(epochs):
        order = rng.permutation(len(graphs))
        losses = []
        for start in range(0, len(order), batch_size):
            chunk = [graphs[i] for i in order[start:start + batch_size]]
            batch, pairs, targets = edge_batch(chunk, neg_ratio, rng)
            if len(pairs) == 0:
                continue
            opt.zero_grad()
            H = backbone_forward(batch, bb)
            loss = ad.softmax_cross_entropy(edge_logits(H, pairs), targets[:, None],
                                            mask=np.ones((len(pairs), 1), dtype=bool))
            ad.backward(loss)
            if not np.isfinite(loss.data):
                raise ad.NumericalAbort(f"non-finite pretraining loss at epoch {epoch}", {
                    "lr": lr, "epoch": epoch, "batch": start // batch_size, "loss": float(loss.data),
                    "grad_norms": {p.name or str(i): float(np.linalg.norm(p.grad))
                                   for i, p in enumerate(bb.parameters()) if p.grad is not None},
                })
            opt.step()
            losses.append(float(loss.data))
        result.epoch_losses.append(float(np.mean(losses)))
        logger.debug("pretrain epoch %d loss %.4f", epoch, result.epoch_losses[-1])
    return result


def edge_prediction_loss(ds: Dataset, bb: Backbone, neg_ratio: float = 1.0, seed: int = 0,
                         batch_size: int = 32) -> float:
    """Mean edge-prediction loss over batches without updating anything."""
    rng = stream(seed, "edge-eval")
    graphs = [g for g in ds if g.num_nodes >= 2 and len(g.edges)]
    losses = []
    for start in range(0, len(graphs), batch_size):
        batch, pairs, targets = edge_batch(graphs[start:start + batch_size], neg_ratio, rng)
        H = backbone_forward(batch, bb)
        loss = ad.softmax_cross_entropy(edge_logits(H, pairs).detach(), targets[:, None],
                                        mask=np.ones((len(pairs), 1), dtype=bool))
        losses.append(float(loss.data))
    return float(np.mean(losses))


def edge_prediction_auc(ds: Dataset, bb: Backbone, seed: int = 0) -> float:
    """ROC-AUC of edge scores: every edge vs. an equal number of sampled non-edges."""
    rng = stream(seed, "edge-eval")
    graphs = [g for g in ds if g.num_nodes >= 2 and len(g.edges)]
    batch, pairs, targets = edge_batch(graphs, 1.0, rng)
    H = backbone_forward(batch, bb)
    return roc_auc(edge_logits(H, pairs).data.ravel(), targets)


# ------------------------------------------------------------------ checkpoints


def _checksum(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def backbone_state(bb: Backbone) -> dict:
    return {
        "d_in": bb.d_in,
        "hidden": bb.hidden,
        "num_layers": len(bb.layers),
        "params": {
            "encoder.weight": bb.w_in.data.ravel().tolist(),
            "encoder.bias": bb.b_in.data.tolist(),
            **{f"gcn{i}.weight": l.weight.data.ravel().tolist() for i, l in enumerate(bb.layers)},
            **{f"gcn{i}.bias": l.bias.data.tolist() for i, l in enumerate(bb.layers)},
        },
    }


def backbone_from_state(state: dict, expect_hidden: int | None = None,
                        expect_d_in: int | None = None) -> Backbone:
    d_in, d, n = state["d_in"], state["hidden"], state["num_layers"]
    if expect_hidden is not None and d != expect_hidden:
        raise CheckpointError(f"checkpoint hidden dim {d} != expected {expect_hidden}")
    if expect_d_in is not None and d_in != expect_d_in:
        raise CheckpointError(f"checkpoint input dim {d_in} != expected {expect_d_in}")
    p = state["params"]

    def arr(key, shape):
        a = np.asarray(p[key], dtype=np.float64)
        if a.size != int(np.prod(shape)):
            raise CheckpointError(f"{key}: {a.size} values for shape {shape}")
        return ad.parameter(a.reshape(shape), key)

    layers = [GcnLayer(arr(f"gcn{i}.weight", (d, d)), arr(f"gcn{i}.bias", (d,))) for i in range(n)]
    return Backbone(arr("encoder.weight", (d_in, d)), arr("encoder.bias", (d,)), layers)


def write_container(path, kind: str, version: int, body: dict) -> None:
    payload = {"format": kind, "version": version, "body": body}
    payload["checksum"] = _checksum(payload)
    Path(path).write_text(json.dumps(payload))


def read_container(path, kind: str, version: int) -> dict:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != kind:
        raise CheckpointError(f"{path} is not a {kind} container")
    if payload.get("version") != version:
        raise CheckpointError(f"{path}: version {payload.get('version')} != supported {version}")
    stored = payload.pop("checksum", None)
    if stored != _checksum(payload):
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted)")
    return payload["body"]


def checkpoint_save(path, bb: Backbone) -> None:
    write_container(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION, backbone_state(bb))


def checkpoint_load(path, hidden: int | None = None, d_in: int | None = None) -> Backbone:
    state = read_container(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)
    return backbone_from_state(state, hidden, d_in)
