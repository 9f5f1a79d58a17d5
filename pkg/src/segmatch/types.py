"""Shared domain types: rigid transforms, labeled point clouds, segment graphs."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_DIM = 16
UNIT_TOL = 1e-6
ROTATION_TOL = 1e-9


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for a (seed, key path) pair; same inputs give the same stream."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)).generate_state(1, np.uint64)[0] >> 1)


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("cannot normalize a (near-)zero vector")
    return v / n


def as_feature(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or not np.all(np.isfinite(v)):
        raise ValueError("feature must be a finite 1-d vector")
    if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
        raise ValueError(f"feature is not unit norm (|z|={np.linalg.norm(v):.3g})")
    return v


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - a.b for unit vectors, clipped into [0, 2]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite feature values")
    return float(min(2.0, max(0.0, 1.0 - float(a @ b))))


def cosine_distance_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ValueError("non-finite feature values")
    return np.clip(1.0 - A @ B.T, 0.0, 2.0)


def yaw_rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite transform")
        if np.abs(R.T @ R - np.eye(3)).max() > ROTATION_TOL or abs(np.linalg.det(R) - 1.0) > ROTATION_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, theta: float, translation) -> RigidTransform:
        return cls(yaw_rotation(theta), translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: RigidTransform) -> RigidTransform:
        """self after other."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> RigidTransform:
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def to_json(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> RigidTransform:
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    segment_id: np.ndarray
    object_id: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        seg = np.array(self.segment_id, dtype=np.int64).reshape(-1)
        if len(seg) != len(pts):
            raise ValueError("segment_id length does not match points")
        if len(seg) and seg.min() < 0:
            raise ValueError("segment ids must be >= 0")
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite points")
        pts.flags.writeable = False
        seg.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "segment_id", seg)
        if self.object_id is not None:
            obj = np.array(self.object_id, dtype=np.int64).reshape(-1)
            if len(obj) != len(pts):
                raise ValueError("object_id length does not match points")
            obj.flags.writeable = False
            object.__setattr__(self, "object_id", obj)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def segments(self) -> list[int]:
        return sorted(int(s) for s in np.unique(self.segment_id))

    @property
    def is_contiguous(self) -> bool:
        """Segment ids are exactly 0..S-1, each with at least one point."""
        segs = self.segments
        return segs == list(range(len(segs)))

    def segment_points(self, seg: int) -> np.ndarray:
        return self.points[self.segment_id == seg]

    def select(self, segments) -> PointCloud:
        mask = np.isin(self.segment_id, np.asarray(list(segments), dtype=np.int64))
        obj = None if self.object_id is None else self.object_id[mask]
        return PointCloud(self.points[mask], self.segment_id[mask], obj)

    def transformed(self, T: RigidTransform) -> PointCloud:
        return PointCloud(T.apply(self.points), self.segment_id, self.object_id)

    def save_txt(self, path) -> None:
        lines = []
        for idx, (p, s) in enumerate(zip(self.points, self.segment_id)):
            row = f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {int(s)}"
            if self.object_id is not None:
                row += f" {int(self.object_id[idx])}"
            lines.append(row)
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def load_txt(cls, path) -> PointCloud:
        rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
        if not rows:
            return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
        widths = {len(r) for r in rows}
        if widths not in ({4}, {5}):
            raise ValueError(f"{path}: expected 'x y z segment_id [object_id]' rows")
        pts = np.array([[float(v) for v in r[:3]] for r in rows])
        seg = np.array([int(r[3]) for r in rows])
        obj = np.array([int(r[4]) for r in rows]) if widths == {5} else None
        return cls(pts, seg, obj)


@dataclass(frozen=True)
class SegmentGraph:
    """Undirected segment adjacency graph; nodes are keyed by segment id."""

    scene_id: int
    node_ids: tuple[int, ...]
    features: np.ndarray
    point_counts: tuple[int, ...]
    edges: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self):
        ids = tuple(int(i) for i in self.node_ids)
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        raw = np.array(self.features, dtype=np.float64)
        if ids:
            feats = raw.reshape(len(ids), -1)
        else:
            feats = np.zeros((0, raw.shape[1] if raw.ndim == 2 else FEATURE_DIM))
        if len(ids) and not np.all(np.abs(np.linalg.norm(feats, axis=1) - 1.0) <= UNIT_TOL):
            raise ValueError("node features must be unit norm")
        counts = tuple(int(c) for c in self.point_counts)
        if len(counts) != len(ids):
            raise ValueError("point_counts length does not match nodes")
        idset = set(ids)
        edges = set()
        for a, b in self.edges:
            a, b = int(a), int(b)
            if a == b:
                raise ValueError(f"self-loop on node {a}")
            if a not in idset or b not in idset:
                raise ValueError(f"edge ({a}, {b}) references a missing node")
            edges.add((min(a, b), max(a, b)))
        feats.flags.writeable = False
        object.__setattr__(self, "node_ids", ids)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "point_counts", counts)
        object.__setattr__(self, "edges", frozenset(edges))

    def __len__(self) -> int:
        return len(self.node_ids)

    @property
    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def index(self, node: int) -> int:
        return self.node_ids.index(node)

    def feature(self, node: int) -> np.ndarray:
        return self.features[self.index(node)]

    def adjacency(self) -> dict[int, set[int]]:
        adj = {i: set() for i in self.node_ids}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return adj

    def subgraph(self, nodes) -> SegmentGraph:
        keep = set(int(n) for n in nodes)
        ids = [i for i in self.node_ids if i in keep]
        idx = [self.index(i) for i in ids]
        return SegmentGraph(
            self.scene_id,
            tuple(ids),
            self.features[idx] if idx else np.zeros((0, self.features.shape[1])),
            tuple(self.point_counts[i] for i in idx),
            frozenset(e for e in self.edges if e[0] in keep and e[1] in keep),
        )

    def with_features(self, features: np.ndarray) -> SegmentGraph:
        return SegmentGraph(self.scene_id, self.node_ids, features, self.point_counts, self.edges)

    def is_connected_subset(self, nodes) -> bool:
        nodes = set(nodes)
        if len(nodes) <= 1:
            return True
        adj = self.adjacency()
        start = next(iter(nodes))
        seen = {start}
        todo = deque([start])
        while todo:
            u = todo.popleft()
            for v in adj[u]:
                if v in nodes and v not in seen:
                    seen.add(v)
                    todo.append(v)
        return seen == nodes

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "nodes": [
                {"id": i, "feature": self.features[n].tolist(), "point_count": self.point_counts[n]}
                for n, i in enumerate(self.node_ids)
            ],
            "edges": [list(e) for e in self.sorted_edges],
        }

    @classmethod
    def from_json(cls, d: dict) -> SegmentGraph:
        nodes = d["nodes"]
        dim = len(nodes[0]["feature"]) if nodes else FEATURE_DIM
        feats = np.array([n["feature"] for n in nodes], dtype=np.float64).reshape(len(nodes), dim)
        return cls(
            int(d["scene_id"]),
            tuple(int(n["id"]) for n in nodes),
            feats,
            tuple(int(n["point_count"]) for n in nodes),
            frozenset((int(a), int(b)) for a, b in d["edges"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> SegmentGraph:
        return cls.from_json(json.loads(Path(path).read_text()))


def weakly_connected_components(g: SegmentGraph) -> list[set[int]]:
    """Node-id sets of the connected components, ordered by smallest member."""
    adj = g.adjacency()
    seen: set[int] = set()
    comps = []
    for start in sorted(g.node_ids):
        if start in seen:
            continue
        comp = {start}
        todo = deque([start])
        seen.add(start)
        while todo:
            u = todo.popleft()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    comp.add(v)
                    todo.append(v)
        comps.append(comp)
    return comps
