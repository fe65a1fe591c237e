"""Graph datasets: containers, JSON Lines I/O, a synthetic generator,
k-shot splits, ego subgraphs and batching by disjoint union."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .rng import stream

MULTICLASS = "multiclass"
MULTITASK = "multitask"


class ParseError(ValueError):
    """Malformed dataset record; carries the 1-based line number."""

    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class SchemaError(ValueError):
    """Records disagree on feature dimension or task arity."""


class SpecError(ValueError):
    """Invalid generator or split specification."""


class InsufficientDataError(ValueError):
    """A class has fewer instances than requested shots."""


def _canonical_edges(edges, num_nodes: int) -> np.ndarray:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= num_nodes):
        bad = e[(e < 0).any(axis=1) | (e >= num_nodes).any(axis=1)][0]
        raise IndexError(f"edge {tuple(int(v) for v in bad)} outside 0..{num_nodes - 1}")
    e = e[e[:, 0] != e[:, 1]]
    e = np.sort(e, axis=1)
    if len(e) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class GraphInstance:
    """One labeled undirected graph.

    ``label`` is an ``int`` for single-label tasks, or a float array of 0/1
    targets with ``nan`` marking missing entries for multi-task data.
    """

    features: np.ndarray
    edges: np.ndarray
    label: int | np.ndarray = 0

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise SchemaError(f"features must be a matrix, got shape {x.shape}")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "edges", _canonical_edges(self.edges, x.shape[0]))
        if not isinstance(self.label, (int, np.integer)):
            object.__setattr__(self, "label", np.asarray(self.label, dtype=np.float64))
        else:
            object.__setattr__(self, "label", int(self.label))

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_multitask(self) -> bool:
        return isinstance(self.label, np.ndarray)

    @cached_property
    def mean_adjacency(self) -> sp.csr_matrix:
        """Row-normalised (A + I): row v averages v and its neighbours."""
        return mean_adjacency(self.num_nodes, self.edges)

    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.edges:
            nbrs[u].append(int(v))
            nbrs[v].append(int(u))
        return nbrs

    def to_record(self) -> dict:
        if self.is_multitask:
            label = [None if math.isnan(v) else int(v) for v in self.label]
        else:
            label = self.label
        return {
            "features": self.features.tolist(),
            "edges": self.edges.tolist(),
            "label": label,
        }


def mean_adjacency(num_nodes: int, edges: np.ndarray) -> sp.csr_matrix:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    loops = np.arange(num_nodes)
    rows = np.concatenate([e[:, 0], e[:, 1], loops])
    cols = np.concatenate([e[:, 1], e[:, 0], loops])
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(num_nodes, num_nodes))
    deg = np.asarray(a.sum(axis=1)).ravel()
    return sp.diags(1.0 / deg) @ a


@dataclass
class Dataset:
    graphs: list[GraphInstance] = field(default_factory=list)
    task: str = MULTICLASS
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.graphs[i], self.task, self.meta)
        return self.graphs[i]

    def __iter__(self):
        return iter(self.graphs)

    @property
    def feature_dim(self) -> int:
        if not self.graphs:
            raise SchemaError("feature dimension is undefined for an empty dataset")
        return self.graphs[0].feature_dim

    @property
    def num_outputs(self) -> int:
        """Number of classes (multiclass) or binary tasks (multitask)."""
        if not self.graphs:
            raise SchemaError("task arity is undefined for an empty dataset")
        if self.task == MULTITASK:
            return len(self.graphs[0].label)
        return max(2, max(g.label for g in self.graphs) + 1)

    def labels(self) -> np.ndarray:
        if self.task == MULTITASK:
            return np.stack([g.label for g in self.graphs])
        return np.array([g.label for g in self.graphs], dtype=np.int64)

    def subset(self, idx: Iterable[int]) -> "Dataset":
        idx = list(idx)
        meta = dict(self.meta)
        if "node_clusters" in meta:
            meta["node_clusters"] = [meta["node_clusters"][i] for i in idx]
        return Dataset([self.graphs[i] for i in idx], self.task, meta)

    def validate(self) -> None:
        if not self.graphs:
            return
        d = self.graphs[0].feature_dim
        arity = len(self.graphs[0].label) if self.task == MULTITASK else None
        for i, g in enumerate(self.graphs):
            if g.feature_dim != d:
                raise SchemaError(f"graph {i} has feature dim {g.feature_dim}, expected {d}")
            if (self.task == MULTITASK) != g.is_multitask:
                raise SchemaError(f"graph {i} label kind does not match task {self.task!r}")
            if arity is not None and len(g.label) != arity:
                raise SchemaError(f"graph {i} has {len(g.label)} tasks, expected {arity}")


# ------------------------------------------------------------------------- I/O


def _parse_record(obj, lineno: int) -> GraphInstance:
    if not isinstance(obj, dict) or not {"features", "edges", "label"} <= obj.keys():
        raise ParseError(lineno, "record needs keys 'features', 'edges' and 'label'")
    feats = obj["features"]
    if not isinstance(feats, list) or not all(isinstance(r, list) for r in feats):
        raise ParseError(lineno, "'features' must be an array of arrays")
    widths = {len(r) for r in feats}
    if len(widths) > 1:
        raise ParseError(lineno, "feature rows have unequal lengths")
    try:
        x = np.array(feats, dtype=np.float64).reshape(len(feats), widths.pop() if widths else 0)
    except (TypeError, ValueError) as exc:
        raise ParseError(lineno, f"non-numeric feature: {exc}") from None
    edges = obj["edges"]
    if not isinstance(edges, list) or not all(
        isinstance(e, list) and len(e) == 2 and all(isinstance(v, int) for v in e) for e in edges
    ):
        raise ParseError(lineno, "'edges' must be an array of [u, v] integer pairs")
    label = obj["label"]
    if isinstance(label, list):
        if not all(v in (0, 1, None) for v in label):
            raise ParseError(lineno, "multi-task labels must be 0, 1 or null")
        label = np.array([np.nan if v is None else float(v) for v in label])
    elif not isinstance(label, int) or isinstance(label, bool) or label < 0:
        raise ParseError(lineno, f"label must be a non-negative integer or an array, got {label!r}")
    try:
        return GraphInstance(x, edges, label)
    except IndexError as exc:
        raise ParseError(lineno, str(exc)) from None


def load_dataset(path) -> Dataset:
    graphs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, f"invalid JSON: {exc.msg}") from None
            graphs.append(_parse_record(obj, lineno))
    task = MULTITASK if graphs and graphs[0].is_multitask else MULTICLASS
    ds = Dataset(graphs, task)
    ds.validate()
    return ds


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in ds.graphs:
            fh.write(json.dumps(g.to_record()) + "\n")


def save_split(split: dict[str, Sequence[int]], path) -> None:
    Path(path).write_text(json.dumps({k: [int(i) for i in v] for k, v in split.items()}))


def load_split(path) -> dict[str, list[int]]:
    obj = json.loads(Path(path).read_text())
    missing = {"train", "val", "test"} - obj.keys()
    if missing:
        raise SchemaError(f"split file lacks {sorted(missing)}")
    return {k: list(map(int, obj[k])) for k in ("train", "val", "test")}


# ------------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for :func:`generate_synthetic`.

    Each cluster has a centroid; each class has a mixture recipe (one weight
    vector over clusters). A graph of class ``c`` draws a node count, then
    assigns every node a cluster from the class recipe and sets its features
    to the centroid plus N(0, sigma^2) noise. Edges join same-cluster pairs
    with probability ``p_in`` and other pairs with ``p_out``.

    ``recipes=None`` gives every class its own pure cluster. Mixed recipes
    make classes differ only in which clusters co-occur; see
    :func:`benchmark_spec`. ``jitter > 0`` perturbs each graph's recipe with
    a Dirichlet draw.
    """

    n_classes: int = 2
    graphs_per_class: int = 100
    nodes_range: tuple[int, int] = (8, 16)
    feature_dim: int = 8
    sigma: float = 0.1
    seed: int = 0
    n_clusters: int | None = None
    recipes: tuple[tuple[float, ...], ...] | None = None
    centroids: tuple[tuple[float, ...], ...] | None = None
    p_in: float = 0.5
    p_out: float = 0.05
    jitter: float = 0.0


def _unit_centroids(k: int, dim: int) -> np.ndarray:
    # scaled one-hots: every pair is exactly distance 1 apart
    if dim < k:
        raise SpecError(f"feature_dim {dim} < clusters {k}: cannot place unit-separated centroids")
    c = np.zeros((k, dim))
    c[np.arange(k), np.arange(k)] = 1.0 / math.sqrt(2.0)
    return c


def generate_synthetic(spec: SyntheticSpec | None = None, **kwargs) -> Dataset:
    spec = spec or SyntheticSpec(**kwargs)
    if spec.n_classes < 1 or spec.graphs_per_class < 1:
        raise SpecError("need at least one class and one graph per class")
    lo, hi = spec.nodes_range
    if not 1 <= lo <= hi:
        raise SpecError(f"bad nodes_range {spec.nodes_range}")
    if spec.sigma < 0:
        raise SpecError("sigma must be non-negative")

    if spec.centroids is not None:
        centroids = np.asarray(spec.centroids, dtype=np.float64)
        if centroids.shape[1] != spec.feature_dim:
            raise SpecError("centroid width differs from feature_dim")
    else:
        centroids = _unit_centroids(spec.n_clusters or spec.n_classes, spec.feature_dim)
    k = len(centroids)
    if spec.recipes is None:
        if k < spec.n_classes:
            raise SpecError("pure recipes need at least one cluster per class")
        recipes = np.eye(k)[: spec.n_classes]
    else:
        recipes = np.asarray(spec.recipes, dtype=np.float64)
        if recipes.shape != (spec.n_classes, k) or (recipes < 0).any():
            raise SpecError(f"recipes must be a non-negative {spec.n_classes}x{k} matrix")
        recipes = recipes / recipes.sum(axis=1, keepdims=True)

    rng = stream(spec.seed, "data")
    graphs, clusters = [], []
    for c in range(spec.n_classes):
        for _ in range(spec.graphs_per_class):
            n = int(rng.integers(lo, hi + 1))
            w = recipes[c]
            if spec.jitter > 0:
                # per-graph perturbation of the recipe, renormalised
                w = rng.dirichlet(w * (1.0 / spec.jitter) + 1e-3)
            assign = rng.choice(k, size=n, p=w)
            x = centroids[assign] + spec.sigma * rng.standard_normal((n, spec.feature_dim))
            same = assign[:, None] == assign[None, :]
            prob = np.where(same, spec.p_in, spec.p_out)
            draw = rng.random((n, n)) < prob
            iu, ju = np.triu_indices(n, k=1)
            keep = draw[iu, ju]
            edges = np.stack([iu[keep], ju[keep]], axis=1)
            graphs.append(GraphInstance(x, edges, c))
            clusters.append(assign)
    # per-node cluster ids are kept in memory only; files hold features, edges, label
    meta = {"centroids": centroids.tolist(), "recipes": recipes.tolist(), "seed": spec.seed,
            "node_clusters": clusters}
    return Dataset(graphs, MULTICLASS, meta)


def benchmark_spec(seed: int = 0, **overrides) -> SyntheticSpec:
    """The two-class benchmark used for the tuning experiments.

    Four clusters: two node types (A, B) crossed with a sign attribute (+, -).
    Class 0 graphs mix A+ with B- nodes, class 1 graphs mix A- with B+. Both
    classes have the same expected node feature and the same type and sign
    proportions, so the label lives in the pairing of a node's type with its
    sign. Centroids sit 0.5 apart against sigma = 0.1, so a single node's type
    is reliable but its sign is noisy enough that neighbourhood context helps.
    """
    dim = overrides.pop("feature_dim", 8)
    scale = overrides.pop("scale", 0.25)
    centroids = []
    for t in (0, 1):
        for sign in (1.0, -1.0):
            c = np.zeros(dim)
            c[t] = math.sqrt(2.0) * scale
            c[2] = sign * scale
            centroids.append(tuple(c))
    # cluster order: A+, A-, B+, B-
    params = dict(
        n_classes=2,
        graphs_per_class=100,
        nodes_range=(8, 16),
        feature_dim=dim,
        sigma=0.1,
        seed=seed,
        centroids=tuple(centroids),
        recipes=((0.5, 0.0, 0.0, 0.5), (0.0, 0.5, 0.5, 0.0)),
    )
    params.update(overrides)
    return SyntheticSpec(**params)


# ----------------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitSpec:
    shots: int | None = None
    fractions: tuple[float, float, float] | None = None
    seed: int = 0
    val_fraction: float = 0.5

    def __post_init__(self):
        if self.shots is None and self.fractions is None:
            raise SpecError("give either shots or fractions")
        if self.shots is not None and self.shots < 1:
            raise SpecError(f"shots must be >= 1, got {self.shots}")
        if self.fractions is not None and abs(math.fsum(self.fractions) - 1.0) > 1e-9:
            raise SpecError(f"fractions must sum to 1, got {self.fractions}")


def _class_keys(ds: Dataset) -> np.ndarray:
    if ds.task == MULTITASK:
        # stratify multi-task data by its first task (missing -> own bucket)
        first = ds.labels()[:, 0]
        return np.where(np.isnan(first), -1, first).astype(np.int64)
    return ds.labels()


def kshot_split(ds: Dataset, spec: SplitSpec) -> tuple[list[int], list[int], list[int]]:
    """Index lists (train, val, test), disjoint and covering ``ds``.

    In k-shot mode the train split holds exactly ``shots`` graphs per class
    and the remainder is divided into val/test by ``val_fraction``.
    """
    rng = stream(spec.seed, "split")
    n = len(ds)
    if spec.shots is not None:
        keys = _class_keys(ds)
        train = []
        for c in np.unique(keys):
            members = np.flatnonzero(keys == c)
            if len(members) < spec.shots:
                raise InsufficientDataError(
                    f"class {int(c)} has {len(members)} instances, fewer than {spec.shots} shots"
                )
            train.extend(rng.choice(members, size=spec.shots, replace=False).tolist())
        rest = np.setdiff1d(np.arange(n), train)
        rest = rng.permutation(rest)
        n_val = int(round(spec.val_fraction * len(rest)))
        return sorted(train), sorted(rest[:n_val].tolist()), sorted(rest[n_val:].tolist())
    perm = rng.permutation(n)
    f_train, f_val, _ = spec.fractions
    a = int(round(f_train * n))
    b = a + int(round(f_val * n))
    return sorted(perm[:a].tolist()), sorted(perm[a:b].tolist()), sorted(perm[b:].tolist())


# -------------------------------------------------------------------- subgraphs


def ego_subgraph(g: GraphInstance, center: int, hops: int = 2, label=None) -> GraphInstance:
    """Induced subgraph on the ``hops``-ball around ``center``; node 0 is the center.

    ``label`` overrides the inherited label (useful when the source graph
    carries per-node labels elsewhere).
    """
    if not 0 <= center < g.num_nodes:
        raise IndexError(f"center {center} outside 0..{g.num_nodes - 1}")
    if hops < 0:
        raise ValueError("hops must be >= 0")
    nbrs = g.neighbors()
    order = [center]
    dist = {center: 0}
    queue = deque([center])
    while queue:
        u = queue.popleft()
        if dist[u] == hops:
            continue
        for v in nbrs[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                order.append(v)
                queue.append(v)
    remap = {old: new for new, old in enumerate(order)}
    edges = [(remap[u], remap[v]) for u, v in g.edges if u in remap and v in remap]
    return GraphInstance(g.features[order], edges, g.label if label is None else label)


def node_task_to_graphs(g: GraphInstance, node_labels: Sequence[int], hops: int = 2) -> Dataset:
    """One ego subgraph per labelled node (label < 0 means unlabelled)."""
    graphs = [ego_subgraph(g, v, hops, label=int(y)) for v, y in enumerate(node_labels) if y >= 0]
    return Dataset(graphs, MULTICLASS)


# ---------------------------------------------------------------------- batching


@dataclass(eq=False)
class GraphBatch:
    """Disjoint union of several graphs, usable wherever a graph is expected."""

    features: np.ndarray
    edges: np.ndarray
    graph_index: np.ndarray
    num_graphs: int
    labels: np.ndarray
    mask: np.ndarray | None = None

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @cached_property
    def mean_adjacency(self) -> sp.csr_matrix:
        return mean_adjacency(self.num_nodes, self.edges)

    @cached_property
    def pool(self) -> sp.csr_matrix:
        """(num_graphs x num_nodes) matrix averaging each graph's rows."""
        counts = np.bincount(self.graph_index, minlength=self.num_graphs).astype(np.float64)
        vals = 1.0 / counts[self.graph_index]
        return sp.csr_matrix(
            (vals, (self.graph_index, np.arange(self.num_nodes))),
            shape=(self.num_graphs, self.num_nodes),
        )


def collate(graphs: Sequence[GraphInstance]) -> GraphBatch:
    if not graphs:
        raise ValueError("cannot collate an empty list of graphs")
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
    feats = np.concatenate([g.features for g in graphs], axis=0)
    edges = np.concatenate([g.edges + o for g, o in zip(graphs, offsets)], axis=0)
    gi = np.repeat(np.arange(len(graphs)), [g.num_nodes for g in graphs])
    if graphs[0].is_multitask:
        labels = np.stack([g.label for g in graphs])
        mask = ~np.isnan(labels)
    else:
        labels = np.array([g.label for g in graphs], dtype=np.int64)
        mask = None
    return GraphBatch(feats, edges.reshape(-1, 2), gi, len(graphs), labels, mask)
