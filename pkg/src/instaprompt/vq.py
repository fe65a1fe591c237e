"""Stochastic vector quantisation against an EMA-trained codebook.

Each prompt is compared to all K codes by squared distance; the negated,
temperature-scaled distances are softmax logits, M codes are drawn with
replacement, and the quantised prompt is their average. Codes never see a
gradient: they track the prompts that sampled them via an exponential
moving average of hit counts and hit-weighted prompt sums.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import stream

COUNT_FLOOR = 1e-3


class ConfigurationError(ValueError):
    pass


@dataclass
class Codebook:
    E: np.ndarray
    counts: np.ndarray
    alpha: float = 0.99
    tau: float = 1.0
    samples: int = 10
    floor: float = COUNT_FLOOR

    def __post_init__(self):
        self.E = np.asarray(self.E, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.E.ndim != 2 or self.E.shape[0] < 1:
            raise ConfigurationError(f"codebook must be a non-empty K x d matrix, got {self.E.shape}")
        if self.counts.shape != (self.E.shape[0],):
            raise ConfigurationError("one count per code is required")
        if self.tau <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.tau}")
        if self.samples < 1:
            raise ConfigurationError(f"need at least one sample per prompt, got {self.samples}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"EMA decay must lie in [0, 1], got {self.alpha}")
        self.counts = np.maximum(self.counts, self.floor)

    @property
    def K(self) -> int:
        return self.E.shape[0]

    @property
    def dim(self) -> int:
        return self.E.shape[1]

    def copy(self) -> "Codebook":
        return Codebook(self.E.copy(), self.counts.copy(), self.alpha, self.tau, self.samples, self.floor)


def init_codebook(K: int, d: int, strategy: str = "gaussian", seed: int = 0, first_batch=None,
                  **kwargs) -> Codebook:
    """``gaussian``: entries N(0, 0.1^2). ``first-batch``: rows drawn from ``first_batch``."""
    if K <= 0:
        raise ConfigurationError(f"codebook size must be positive, got {K}")
    rng = stream(seed, "init/codebook")
    if strategy == "gaussian":
        E = rng.normal(0.0, 0.1, size=(K, d))
    elif strategy == "first-batch":
        if first_batch is None:
            raise ConfigurationError("first-batch initialisation needs a batch of prompts")
        rows = np.asarray(first_batch, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != d:
            raise ConfigurationError(f"first batch must be n x {d}, got {rows.shape}")
        E = rows[rng.choice(len(rows), size=K, replace=len(rows) < K)].copy()
    else:
        raise ConfigurationError(f"unknown codebook init strategy {strategy!r}")
    return Codebook(E, np.ones(K), **kwargs)


def distances_and_logits(cb: Codebook, p_c) -> tuple[np.ndarray, np.ndarray]:
    """Squared distances to every code and logits ``-distance / tau``.

    ``p_c`` may be one prompt (d,) or a stack (n, d); outputs follow suit.
    """
    if cb.tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {cb.tau}")
    p = np.asarray(p_c, dtype=np.float64)
    if p.shape[-1] != cb.dim:
        raise ConfigurationError(f"prompt width {p.shape[-1]} != codebook width {cb.dim}")
    diff = p[..., None, :] - cb.E
    d = np.einsum("...kd,...kd->...k", diff, diff)
    return d, -d / cb.tau


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_indices(cb: Codebook, logits, rng: np.random.Generator, samples: int | None = None) -> np.ndarray:
    """Draw ``samples`` (default ``cb.samples``) code indices with replacement.

    Inverse-CDF sampling from softmax(logits); works row-wise on a stack of
    logits, returning (n, M).
    """
    m = cb.samples if samples is None else samples
    probs = softmax(np.asarray(logits, dtype=np.float64))
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = 1.0
    u = rng.random(probs.shape[:-1] + (m,))
    # number of cdf entries <= u, i.e. searchsorted(side="right") per row
    return (cdf[..., None, :] <= u[..., None]).sum(axis=-1)


def quantize(cb: Codebook, p_c, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Average of M sampled codes per prompt; returns (p_q, indices)."""
    _, logits = distances_and_logits(cb, p_c)
    idx = sample_indices(cb, logits, rng)
    return cb.E[idx].mean(axis=-2), idx


def ema_update(cb: Codebook, prompts, indices) -> bool:
    """One EMA step from a batch of (p_c, sampled indices).

    Counts are updated first; the code update divides by the new counts.
    Returns ``False`` (and warns) for an empty batch.
    """
    P = np.asarray(prompts, dtype=np.float64).reshape(-1, cb.dim)
    idx = np.asarray(indices, dtype=np.intp)
    if len(P) == 0 or idx.size == 0:
        warnings.warn("ema_update called with an empty batch; codebook unchanged", RuntimeWarning)
        return False
    idx = idx.reshape(len(P), -1)
    if idx.min() < 0 or idx.max() >= cb.K:
        raise IndexError(f"code index outside 0..{cb.K - 1}")
    # hits[i, j]: how many of prompt i's draws landed on code j
    hits = np.zeros((len(P), cb.K))
    np.add.at(hits, (np.repeat(np.arange(len(P)), idx.shape[1]), idx.ravel()), 1.0)
    a = cb.alpha
    cb.counts = np.maximum(a * cb.counts + (1.0 - a) * hits.sum(axis=0), cb.floor)
    cb.E = a * cb.E + (1.0 - a) * (hits.T @ P) / cb.counts[:, None]
    return True


# ------------------------------------------------------------------ diagnostics


@dataclass
class UtilizationStats:
    hit_rate: np.ndarray
    dead_codes: list[int]
    prompt_variance: float


def utilization_stats(cb: Codebook, indices, p_q=None) -> UtilizationStats:
    """Hit frequencies over a window of sampled indices and spread of p_q."""
    idx = np.asarray(indices, dtype=np.intp).ravel()
    counts = np.bincount(idx, minlength=cb.K).astype(np.float64)
    rate = counts / max(idx.size, 1)
    var = 0.0
    if p_q is not None:
        q = np.asarray(p_q, dtype=np.float64).reshape(-1, cb.dim)
        var = float(q.var(axis=0).mean()) if len(q) else 0.0
    return UtilizationStats(rate, np.flatnonzero(counts == 0).tolist(), var)


def export_codebook(cb: Codebook, path, hit_rate=None) -> None:
    """CSV with columns code_id, hit_rate, v0..v{d-1}; floats at 17 significant digits."""
    rate = np.zeros(cb.K) if hit_rate is None else np.asarray(hit_rate, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["code_id", "hit_rate"] + [f"v{i}" for i in range(cb.dim)])
        for j in range(cb.K):
            w.writerow([j, f"{rate[j]:.17g}"] + [f"{v:.17g}" for v in cb.E[j]])


def load_codebook_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an exported codebook back as (E, hit_rate)."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:2] != ["code_id", "hit_rate"]:
        raise ValueError(f"unexpected codebook header {header[:2]}")
    E = np.array([[float(v) for v in r[2:]] for r in body]).reshape(len(body), len(header) - 2)
    rate = np.array([float(r[1]) for r in body])
    return E, rate
