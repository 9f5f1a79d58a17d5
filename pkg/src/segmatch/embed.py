"""Unit-norm embedding table trained with a mean-embedding contrastive loss.

Each row stands for a group of pixels that share one embedding (a 3D segment seen
across the frames of one scene). A row's pixel count is its weight, so the batch
loss below is exactly the per-pixel loss averaged over foreground pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .types import FEATURE_DIM, derive_rng, normalize

DEFAULT_TAU = 0.07

Key = tuple[int, int]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EmbeddingTable:
    keys: list[Key]
    matrix: np.ndarray
    history: list[float] = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.keys = [(int(a), int(b)) for a, b in self.keys]
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(len(self.keys), -1)
        self._index = {k: i for i, k in enumerate(self.keys)}
        if len(self._index) != len(self.keys):
            raise ValueError("duplicate table keys")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __contains__(self, key) -> bool:
        return tuple(key) in self._index

    def index(self, key: Key) -> int:
        return self._index[tuple(key)]

    def row(self, key: Key) -> np.ndarray:
        return self.matrix[self._index[tuple(key)]]

    def to_json(self) -> dict:
        return {"dim": self.dim, "rows": {f"{s}:{i}": self.matrix[n].tolist() for n, (s, i) in enumerate(self.keys)}}

    @classmethod
    def from_json(cls, d: dict) -> EmbeddingTable:
        keys, rows = [], []
        for k, v in d["rows"].items():
            s, i = k.split(":")
            keys.append((int(s), int(i)))
            rows.append(v)
        return cls(keys, np.array(rows, dtype=np.float64).reshape(len(keys), int(d["dim"])))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> EmbeddingTable:
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ContrastiveBatch:
    """Anchors of one scene: table rows, label per anchor (0..N-1) and pixel weight."""

    anchors: np.ndarray
    labels: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=np.int64)
        lab = np.asarray(self.labels, dtype=np.int64)
        w = np.asarray(self.weights, dtype=np.float64)
        if not (len(a) == len(lab) == len(w)) or len(a) == 0:
            raise ValueError("batch needs matching, non-empty anchors/labels/weights")
        if np.any(w <= 0):
            raise ValueError("anchor weights must be positive")
        n = lab.max() + 1
        if lab.min() < 0 or len(np.unique(lab)) != n:
            raise ValueError("labels must cover 0..N-1")
        object.__setattr__(self, "anchors", a)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "weights", w)

    @property
    def n_labels(self) -> int:
        return int(self.labels.max()) + 1


def mean_embedding(members, weights=None) -> np.ndarray:
    """Renormalised (weighted) arithmetic mean of unit vectors."""
    Z = np.asarray(members, dtype=np.float64)
    if Z.ndim != 2 or len(Z) == 0:
        raise ValueError("mean of an empty member list")
    w = np.ones(len(Z)) if weights is None else np.asarray(weights, dtype=np.float64)
    m = (w[:, None] * Z).sum(axis=0) / w.sum()
    n = np.linalg.norm(m)
    if n < 1e-12:
        raise ValueError("degenerate mean embedding (members cancel out)")
    return m / n


def batch_means(batch: ContrastiveBatch, matrix: np.ndarray) -> np.ndarray:
    rows = matrix[batch.anchors]
    return np.array([mean_embedding(rows[batch.labels == j], batch.weights[batch.labels == j]) for j in range(batch.n_labels)])


def _neg_log_softmax(scores: np.ndarray, target: int) -> float:
    d = scores - scores[target]
    m = d.max()
    if m > 0:
        return float(m + math.log(np.exp(d - m).sum()))
    # target holds the max: log1p keeps precision when the loss is tiny
    rest = np.delete(d, target)
    return float(math.log1p(np.exp(rest).sum())) if len(rest) else 0.0


def contrastive_loss(z: np.ndarray, label: int, means: np.ndarray, tau: float = DEFAULT_TAU) -> float:
    """-log softmax_label(z . mean_j / tau)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    means = np.asarray(means, dtype=np.float64)
    if not 0 <= label < len(means):
        raise ValueError("label outside 0..N-1")
    return _neg_log_softmax(means @ np.asarray(z, dtype=np.float64) / tau, label)


def batch_loss(batch: ContrastiveBatch, matrix: np.ndarray, means: np.ndarray, tau: float = DEFAULT_TAU) -> float:
    rows = matrix[batch.anchors]
    losses = [contrastive_loss(z, int(i), means, tau) for z, i in zip(rows, batch.labels)]
    return float(np.dot(batch.weights, losses) / batch.weights.sum())


def loss_gradient(batch: ContrastiveBatch, matrix: np.ndarray, tau: float = DEFAULT_TAU, means: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the weighted mean batch loss w.r.t. each anchor row, means held fixed."""
    if means is None:
        means = batch_means(batch, matrix)
    rows = matrix[batch.anchors]
    s = rows @ means.T / tau
    s -= s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    g = (p @ means - means[batch.labels]) / tau
    return g * (batch.weights / batch.weights.sum())[:, None]


def tangent_component(grad: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Projection of row gradients onto the sphere's tangent space at each row."""
    return grad - np.sum(grad * rows, axis=1, keepdims=True) * rows


@dataclass
class PixelGroups:
    """Training rows: key (scene, group id), label and pixel weight per row."""

    keys: list[Key]
    labels: list[int]
    weights: list[float]

    def batches(self, table: EmbeddingTable) -> list[ContrastiveBatch]:
        by_scene: dict[int, list[int]] = {}
        for n, (k, w) in enumerate(zip(self.keys, self.weights)):
            if w > 0:
                by_scene.setdefault(k[0], []).append(n)
        out = []
        for scene in sorted(by_scene):
            idx = by_scene[scene]
            raw = [self.labels[n] for n in idx]
            remap = {v: j for j, v in enumerate(sorted(set(raw)))}
            out.append(
                ContrastiveBatch(
                    np.array([table.index(self.keys[n]) for n in idx]),
                    np.array([remap[v] for v in raw]),
                    np.array([self.weights[n] for n in idx], dtype=np.float64),
                )
            )
        return out


def scratch_init(keys, dim: int, seed: int, spread: float = 0.1) -> np.ndarray:
    """Nearly collapsed rows around one random direction, like an untrained network's output."""
    rng = derive_rng(seed, 17)
    base = normalize(rng.standard_normal(dim))
    return normalize(base + spread * rng.standard_normal((len(keys), dim)) / math.sqrt(dim))


def train(groups: PixelGroups, epochs: int = 50, lr: float = 0.5, tau: float = DEFAULT_TAU, seed: int = 0,
          init: EmbeddingTable | dict | None = None, dim: int = FEATURE_DIM, init_spread: float = 0.1) -> EmbeddingTable:
    """Projected gradient descent on the contrastive loss; means are refreshed every step."""
    if tau <= 0 or lr <= 0 or epochs < 0:
        raise ValueError("need tau > 0, lr > 0, epochs >= 0")
    keys = list(dict.fromkeys(tuple(k) for k in groups.keys))
    if isinstance(init, EmbeddingTable):
        dim = init.dim
    matrix = scratch_init(keys, dim, seed, init_spread)
    if init is not None:
        for n, k in enumerate(keys):
            if k in init:
                v = init.row(k) if isinstance(init, EmbeddingTable) else np.asarray(init[k], dtype=np.float64)
                matrix[n] = normalize(v)
    table = EmbeddingTable(keys, matrix)
    batches = groups.batches(table)
    history: list[float] = []

    def step_losses(M):
        total = 0.0
        grad = np.zeros_like(M)
        for b in batches:
            means = batch_means(b, M)
            total += batch_loss(b, M, means, tau)
            grad[b.anchors] += loss_gradient(b, M, tau, means)
        return total / max(len(batches), 1), grad

    M = table.matrix
    for epoch in range(epochs + 1):
        loss, grad = step_losses(M)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch} (lr={lr}, tau={tau})")
        history.append(loss)
        if epoch == epochs:
            break
        M = normalize(M - lr * grad)
    return EmbeddingTable(keys, M, history)
