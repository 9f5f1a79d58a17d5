"""Synthetic multi-scene datasets of rigid multi-part objects.

Parts stand in for over-segments: every part of every object instance becomes one
3D segment (optionally split in two, or dropped to mimic occlusion). Each part
keeps one canonical point sample that is rigidly moved into every scene, so the
same object seen twice registers exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .types import (
    FEATURE_DIM,
    PointCloud,
    RigidTransform,
    SegmentGraph,
    derive_rng,
    derive_seed,
    normalize,
)

MIN_PART_POINTS = 200


class PlacementError(RuntimeError):
    pass


@dataclass
class GeneratorConfig:
    k_objects: int = 5
    m_scenes: int = 8
    min_parts: int = 2
    max_parts: int = 4
    min_objects_per_scene: int = 2
    max_objects_per_scene: int = 4
    occlusion_drop_prob: float = 0.0
    feature_noise_sigma: float = 0.0
    part_split_prob: float = 0.0
    clutter_prob: float = 0.3
    impostor_prob: float = 0.0
    adjacency_eps: float = 0.01
    point_spacing: float = 0.01
    feature_dim: int = FEATURE_DIM
    table_radius: float = 0.3
    frames_per_scene: int = 8
    test_frames_per_scene: int = 20
    image_width: int = 160
    image_height: int = 120
    focal: float = 160.0
    splat: int = 1

    def validate(self) -> None:
        if self.k_objects < 1 or self.m_scenes < 2:
            raise ValueError("need k_objects >= 1 and m_scenes >= 2")
        if not 1 <= self.min_parts <= self.max_parts:
            raise ValueError("bad part count range")
        if not 0.0 <= self.occlusion_drop_prob < 1.0 or not 0.0 <= self.part_split_prob <= 1.0:
            raise ValueError("probabilities out of range")
        if self.feature_noise_sigma < 0 or self.adjacency_eps <= 0:
            raise ValueError("noise sigma must be >= 0 and adjacency_eps > 0")


# ---------------------------------------------------------------- primitives


@dataclass(frozen=True)
class Primitive:
    kind: str  # box (sx, sy, sz) | cylinder (r, h) | cap (base radius, h)
    dims: tuple[float, ...]

    @property
    def height(self) -> float:
        return self.dims[2] if self.kind == "box" else self.dims[1]

    @property
    def area(self) -> float:
        if self.kind == "box":
            sx, sy, sz = self.dims
            return 2 * (sx * sy + sx * sz + sy * sz)
        if self.kind == "cylinder":
            r, h = self.dims
            return 2 * math.pi * r * h + 2 * math.pi * r * r
        a, h = self.dims
        return math.pi * (a * a + h * h) + math.pi * a * a


def _jitter_grid(u: float, v: float, step: float, rng) -> np.ndarray:
    nu = max(1, math.ceil(u / step))
    nv = max(1, math.ceil(v / step))
    iu, iv = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    cells = np.stack([iu.ravel(), iv.ravel()], axis=1).astype(np.float64)
    jitter = rng.random(cells.shape)
    return (cells + jitter) * np.array([u / nu, v / nv])


def _disc(radius: float, z: float, step: float, rng) -> np.ndarray:
    uv = _jitter_grid(2 * radius, 2 * radius, step, rng) - radius
    uv = uv[np.hypot(uv[:, 0], uv[:, 1]) <= radius]
    return np.column_stack([uv, np.full(len(uv), z)])


def _sample_once(prim: Primitive, step: float, rng) -> np.ndarray:
    if prim.kind == "box":
        sx, sy, sz = prim.dims
        faces = []
        for z in (0.0, sz):
            g = _jitter_grid(sx, sy, step, rng)
            faces.append(np.column_stack([g[:, 0] - sx / 2, g[:, 1] - sy / 2, np.full(len(g), z)]))
        for y in (-sy / 2, sy / 2):
            g = _jitter_grid(sx, sz, step, rng)
            faces.append(np.column_stack([g[:, 0] - sx / 2, np.full(len(g), y), g[:, 1]]))
        for x in (-sx / 2, sx / 2):
            g = _jitter_grid(sy, sz, step, rng)
            faces.append(np.column_stack([np.full(len(g), x), g[:, 0] - sy / 2, g[:, 1]]))
        return np.vstack(faces)
    if prim.kind == "cylinder":
        r, h = prim.dims
        g = _jitter_grid(2 * math.pi * r, h, step, rng)
        th = g[:, 0] / r
        side = np.column_stack([r * np.cos(th), r * np.sin(th), g[:, 1]])
        return np.vstack([side, _disc(r, 0.0, step, rng), _disc(r, h, step, rng)])
    if prim.kind == "cap":
        a, h = prim.dims
        R = (a * a + h * h) / (2 * h)
        zc = h - R
        # sphere zones: area is uniform in (azimuth arc, height)
        g = _jitter_grid(2 * math.pi * R, h, step, rng)
        phi = g[:, 0] / R
        rho = np.sqrt(np.maximum(R * R - (g[:, 1] - zc) ** 2, 0.0))
        dome = np.column_stack([rho * np.cos(phi), rho * np.sin(phi), g[:, 1]])
        return np.vstack([dome, _disc(a, 0.0, step, rng)])
    raise ValueError(f"unknown primitive {prim.kind!r}")


def sample_surface(prim: Primitive, spacing: float, rng, min_points: int = MIN_PART_POINTS) -> np.ndarray:
    """Jittered-grid surface sample in the part frame (base on z=0, centred on the z axis)."""
    step = spacing
    while True:
        pts = _sample_once(prim, step, rng)
        if len(pts) >= min_points:
            return pts
        step *= 0.9


def random_primitive(rng, kind: str | None = None) -> Primitive:
    kind = kind or ["box", "cylinder", "cap"][int(rng.integers(3))]
    if kind == "box":
        return Primitive("box", tuple(float(v) for v in rng.uniform(0.04, 0.10, size=3)))
    if kind == "cylinder":
        return Primitive("cylinder", (float(rng.uniform(0.02, 0.045)), float(rng.uniform(0.04, 0.10))))
    a = float(rng.uniform(0.03, 0.055))
    return Primitive("cap", (a, float(rng.uniform(0.015, a))))


# ----------------------------------------------------------------- templates


@dataclass(frozen=True)
class PartTemplate:
    primitive: Primitive
    points: np.ndarray  # object frame
    true_feature: np.ndarray

    def to_json(self) -> dict:
        return {
            "kind": self.primitive.kind,
            "dims": list(self.primitive.dims),
            "feature": self.true_feature.tolist(),
            "points": self.points.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> PartTemplate:
        return cls(Primitive(d["kind"], tuple(d["dims"])), np.array(d["points"]), np.array(d["feature"]))


@dataclass(frozen=True)
class ObjectTemplate:
    template_id: int
    parts: tuple[PartTemplate, ...]
    adjacency: frozenset[tuple[int, int]]

    @property
    def radius(self) -> float:
        pts = np.vstack([p.points for p in self.parts])
        return float(np.hypot(pts[:, 0], pts[:, 1]).max())

    def points(self) -> np.ndarray:
        return np.vstack([p.points for p in self.parts])

    def to_json(self) -> dict:
        return {
            "id": self.template_id,
            "parts": [p.to_json() for p in self.parts],
            "adjacency": [list(e) for e in sorted(self.adjacency)],
        }

    @classmethod
    def from_json(cls, d: dict) -> ObjectTemplate:
        return cls(
            int(d["id"]),
            tuple(PartTemplate.from_json(p) for p in d["parts"]),
            frozenset((int(a), int(b)) for a, b in d["adjacency"]),
        )


def min_distance(a: np.ndarray, b: np.ndarray, tree_b: cKDTree | None = None) -> float:
    if len(a) == 0 or len(b) == 0:
        return math.inf
    tree_b = tree_b or cKDTree(b)
    return float(tree_b.query(a, k=1)[0].min())


def contact_graph(clouds: list[np.ndarray], eps: float) -> set[tuple[int, int]]:
    """Pairs of point sets whose closest points are nearer than eps."""
    lo = [c.min(axis=0) for c in clouds]
    hi = [c.max(axis=0) for c in clouds]
    trees = [cKDTree(c) for c in clouds]
    edges = set()
    for i in range(len(clouds)):
        for j in range(i + 1, len(clouds)):
            if np.any(lo[i] - hi[j] > eps) or np.any(lo[j] - hi[i] > eps):
                continue
            d, _ = trees[j].query(clouds[i], k=1, distance_upper_bound=eps)
            if np.any(d < eps):
                edges.add((i, j))
    return edges


def _is_connected(n: int, edges) -> bool:
    adj = {i: set() for i in range(n)}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    seen, todo = {0}, [0]
    while todo:
        u = todo.pop()
        for v in adj[u] - seen:
            seen.add(v)
            todo.append(v)
    return len(seen) == n


def approach_until_contact(moving: np.ndarray, fixed_tree: cKDTree, direction: np.ndarray, start: float, eps: float):
    """Slide `moving` from `start` metres out along -direction until it comes within eps of the fixed set.

    Steps of eps/2 stop at the first contact, so the surfaces never pass through each other.
    Returns the offset vector, or None if no contact happens.
    """
    step = eps / 2
    s = start
    while s > -start:
        off = direction * s
        d = fixed_tree.query(moving + off, k=1)[0].min()
        if d < eps:
            return off
        s -= max(step, min(d - eps, 0.05))  # coarse jumps while far away
    return None


def _place_part(parts_pts, prim, pts_local, mode, rng, eps):
    """Offset for a new part: stacked on the highest part or pressed against the side of one."""
    if mode == "stack":
        top = max(p[:, 2].max() for p in parts_pts)
        top_part = max(range(len(parts_pts)), key=lambda i: parts_pts[i][:, 2].max())
        c = parts_pts[top_part].mean(axis=0)
        jitter = rng.uniform(-0.01, 0.01, size=2)
        return np.array([c[0] + jitter[0], c[1] + jitter[1], top])
    parent = int(rng.integers(len(parts_pts)))
    ppts = parts_pts[parent]
    zlo, zhi = ppts[:, 2].min(), ppts[:, 2].max()
    h = pts_local[:, 2].max()
    if zhi - zlo < h:
        return None
    z = float(rng.uniform(zlo, zhi - h))
    phi = float(rng.uniform(0, 2 * math.pi))
    d = np.array([math.cos(phi), math.sin(phi), 0.0])
    c = ppts.mean(axis=0)
    base = np.array([c[0], c[1], z])
    off = approach_until_contact(pts_local + base, cKDTree(np.vstack(parts_pts)), d, 0.4, eps)
    return None if off is None else base + off


def make_object_template(template_id: int, n_parts: int, features: list[np.ndarray], rng, cfg: GeneratorConfig, kinds=None) -> ObjectTemplate:
    for _ in range(200):
        parts_pts: list[np.ndarray] = []
        prims: list[Primitive] = []
        ok = True
        for p in range(n_parts):
            kind = kinds[p] if kinds else None
            if kind is None and p < n_parts - 1:
                kind = ["box", "cylinder"][int(rng.integers(2))]  # domes only on top
            prim = random_primitive(rng, kind)
            local = sample_surface(prim, cfg.point_spacing, rng)
            if p == 0:
                offset = np.zeros(3)
            else:
                mode = "stack" if (prims[-1].kind != "cap" and rng.random() < 0.6) else "side"
                if prim.kind == "cap":
                    mode = "stack"
                if mode == "stack" and any(q.kind == "cap" for q in prims):
                    mode = "side"
                offset = _place_part(parts_pts, prim, local, mode, rng, cfg.adjacency_eps)
                if offset is None:
                    ok = False
                    break
            parts_pts.append(local + offset)
            prims.append(prim)
        if not ok:
            continue
        adjacency = contact_graph(parts_pts, cfg.adjacency_eps)
        if not _is_connected(n_parts, adjacency):
            continue
        centre = np.vstack(parts_pts).mean(axis=0)
        shift = np.array([centre[0], centre[1], 0.0])
        parts = tuple(PartTemplate(pr, pts - shift, f) for pr, pts, f in zip(prims, parts_pts, features))
        return ObjectTemplate(template_id, parts, frozenset(adjacency))
    raise PlacementError(f"could not assemble a connected template with {n_parts} parts")


def _draw_features(n: int, dim: int, rng, existing: list[np.ndarray], max_cos: float = 0.5) -> list[np.ndarray]:
    out = []
    for _ in range(n):
        for _ in range(10_000):
            f = normalize(rng.standard_normal(dim))
            if all(f @ e < max_cos for e in existing + out):
                out.append(f)
                break
        else:
            raise PlacementError("could not draw a distinct part feature")
    return out


def make_templates(cfg: GeneratorConfig, seed: int) -> list[ObjectTemplate]:
    rng = derive_rng(seed, 0)
    templates: list[ObjectTemplate] = []
    pool: list[np.ndarray] = []
    for t in range(cfg.k_objects):
        n_parts = int(rng.integers(cfg.min_parts, cfg.max_parts + 1))
        feats = _draw_features(n_parts, cfg.feature_dim, rng, pool)
        kinds = [None] * n_parts
        if templates and cfg.impostor_prob > 0:
            for p in range(n_parts):
                if rng.random() < cfg.impostor_prob:
                    src_t = templates[int(rng.integers(len(templates)))]
                    src_p = src_t.parts[int(rng.integers(len(src_t.parts)))]
                    feats[p] = normalize(src_p.true_feature + 0.02 * rng.standard_normal(cfg.feature_dim))
                    choices = [k for k in ("box", "cylinder") if k != src_p.primitive.kind]
                    kinds[p] = choices[int(rng.integers(len(choices)))]
        tmpl = make_object_template(t, n_parts, feats, rng, cfg, kinds if any(kinds) else None)
        pool.extend(feats)
        templates.append(tmpl)
    return templates


# -------------------------------------------------------------------- scenes


@dataclass(frozen=True)
class SceneSpec:
    scene_id: int
    instances: tuple[tuple[int, RigidTransform], ...]
    occlusion_drop_prob: float = 0.0
    feature_noise_sigma: float = 0.0
    part_split_prob: float = 0.0
    seed: int = 0

    @property
    def template_ids(self) -> list[int]:
        return [t for t, _ in self.instances]

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "seed": self.seed,
            "occlusion_drop_prob": self.occlusion_drop_prob,
            "feature_noise_sigma": self.feature_noise_sigma,
            "part_split_prob": self.part_split_prob,
            "instances": [{"template_id": t, "pose": T.to_json()} for t, T in self.instances],
        }

    @classmethod
    def from_json(cls, d: dict) -> SceneSpec:
        return cls(
            int(d["scene_id"]),
            tuple((int(i["template_id"]), RigidTransform.from_json(i["pose"])) for i in d["instances"]),
            float(d["occlusion_drop_prob"]),
            float(d["feature_noise_sigma"]),
            float(d["part_split_prob"]),
            int(d["seed"]),
        )


def _assign_objects(cfg: GeneratorConfig, rng) -> list[list[int]]:
    k, m = cfg.k_objects, cfg.m_scenes
    lo = min(cfg.min_objects_per_scene, k)
    hi = min(max(cfg.max_objects_per_scene, lo), k)
    scenes = [sorted(rng.choice(k, size=int(rng.integers(lo, hi + 1)), replace=False).tolist()) for _ in range(m)]
    for obj in range(k):
        while sum(obj in s for s in scenes) < 2:
            free = [i for i, s in enumerate(scenes) if obj not in s]
            target = min(free, key=lambda i: (len(scenes[i]), rng.random()))
            scenes[target] = sorted(scenes[target] + [obj])
    return scenes


def _place_scene(template_ids, templates, cfg: GeneratorConfig, rng) -> list[RigidTransform]:
    n = len(template_ids)
    radius = cfg.table_radius * math.sqrt(max(1.0, n / 4))
    eps = cfg.adjacency_eps
    for _ in range(50):
        poses: list[RigidTransform] = []
        placed: list[np.ndarray] = []
        footprint: list[tuple[np.ndarray, float]] = []
        for tid in template_ids:
            tmpl = templates[tid]
            r = tmpl.radius
            local = tmpl.points()
            pose = None
            for _ in range(200):
                yaw = float(rng.uniform(0, 2 * math.pi))
                if placed and rng.random() < cfg.clutter_prob:
                    anchor, ra = footprint[int(rng.integers(len(footprint)))]
                    phi = float(rng.uniform(0, 2 * math.pi))
                    d = np.array([math.cos(phi), math.sin(phi), 0.0])
                    T0 = RigidTransform.from_yaw(yaw, [anchor[0], anchor[1], 0.0])
                    off = approach_until_contact(T0.apply(local), cKDTree(np.vstack(placed)), d, ra + r + 0.05, eps)
                    if off is None:
                        continue
                    xy = anchor[:2] + off[:2]
                    if np.hypot(*xy) > radius + r:
                        continue
                    pose = RigidTransform.from_yaw(yaw, [xy[0], xy[1], 0.0])
                else:
                    rho = radius * math.sqrt(rng.random())
                    phi = float(rng.uniform(0, 2 * math.pi))
                    xy = np.array([rho * math.cos(phi), rho * math.sin(phi)])
                    if any(np.hypot(*(xy - c[:2])) < r + rc + 2 * eps for c, rc in footprint):
                        continue
                    pose = RigidTransform.from_yaw(yaw, [xy[0], xy[1], 0.0])
                break
            if pose is None:
                break
            poses.append(pose)
            placed.append(pose.apply(local))
            footprint.append((pose.translation.copy(), r))
        if len(poses) == n:
            return poses
    raise PlacementError(f"could not place {n} objects without interpenetration")


def generate_dataset(k_objects: int, m_scenes: int, seed: int, config: GeneratorConfig | None = None):
    """Object templates plus scene layouts; every object appears in at least two scenes."""
    cfg = GeneratorConfig(**{**asdict(config or GeneratorConfig()), "k_objects": k_objects, "m_scenes": m_scenes})
    cfg.validate()
    templates = make_templates(cfg, seed)
    rng = derive_rng(seed, 1)
    scenes = []
    for s, objs in enumerate(_assign_objects(cfg, rng)):
        order = [int(o) for o in rng.permutation(objs)]
        poses = _place_scene(order, templates, cfg, derive_rng(seed, 2, s))
        scenes.append(
            SceneSpec(
                s,
                tuple(zip(order, poses)),
                cfg.occlusion_drop_prob,
                cfg.feature_noise_sigma,
                cfg.part_split_prob,
                derive_seed(seed, 3, s),
            )
        )
    return templates, scenes


@dataclass(frozen=True)
class SegmentSource:
    """Where a scene segment came from."""

    instance: int
    template_id: int
    part: int
    half: int  # -1 unless the part was split


def instantiate_scene(scene: SceneSpec, templates) -> list[tuple[SegmentSource, np.ndarray, np.ndarray]]:
    """Surviving segments as (source, world points, observed feature), in segment-id order."""
    drop_rng = derive_rng(scene.seed, 1)
    noise_rng = derive_rng(scene.seed, 2)
    split_rng = derive_rng(scene.seed, 3)
    out = []
    for inst, (tid, pose) in enumerate(scene.instances):
        tmpl = templates[tid]
        for p, part in enumerate(tmpl.parts):
            dropped = drop_rng.random() < scene.occlusion_drop_prob
            split = split_rng.random() < scene.part_split_prob
            if dropped:
                continue
            pts = pose.apply(part.points)
            pieces = [(-1, pts)]
            if split:
                c = pts.mean(axis=0)
                _, _, vt = np.linalg.svd(pts - c, full_matrices=False)
                side = (pts - c) @ vt[0] >= 0
                pieces = [(0, pts[~side]), (1, pts[side])]
            for half, piece in pieces:
                f = part.true_feature
                if scene.feature_noise_sigma > 0:
                    # isotropic noise whose expected norm is sigma
                    f = f + noise_rng.standard_normal(f.shape) * scene.feature_noise_sigma / math.sqrt(len(f))
                out.append((SegmentSource(inst, tid, p, half), piece, normalize(f)))
    return out


def build_segment_graph(scene: SceneSpec, templates, adjacency_eps: float = 0.01):
    """Segment graph and labeled cloud of one scene."""
    if adjacency_eps <= 0:
        raise ValueError("adjacency_eps must be positive")
    segs = instantiate_scene(scene, templates)
    clouds = [pts for _, pts, _ in segs]
    edges = contact_graph(clouds, adjacency_eps) if segs else set()
    dim = templates[0].parts[0].true_feature.shape[0] if templates else FEATURE_DIM
    graph = SegmentGraph(
        scene.scene_id,
        tuple(range(len(segs))),
        np.array([f for _, _, f in segs]) if segs else np.zeros((0, dim)),
        tuple(len(p) for p in clouds),
        frozenset(edges),
    )
    if segs:
        cloud = PointCloud(
            np.vstack(clouds),
            np.concatenate([np.full(len(p), i) for i, p in enumerate(clouds)]),
            np.concatenate([np.full(len(p), src.template_id) for src, p, _ in segs]),
        )
    else:
        cloud = PointCloud(np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    return graph, cloud


# ---------------------------------------------------------------- projection


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 160.0
    fy: float = 160.0
    cx: float = 80.0
    cy: float = 60.0
    width: int = 160
    height: int = 120

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")


@dataclass(frozen=True)
class LabeledImage:
    width: int
    height: int
    segment: np.ndarray  # -1 = background
    object: np.ndarray  # -1 = background / unknown
    depth: np.ndarray  # inf = background
    scene_id: int = -1
    frame: int = -1

    @property
    def foreground(self) -> np.ndarray:
        return self.segment >= 0

    def to_json(self) -> dict:
        depth = [None if not np.isfinite(d) else float(d) for d in self.depth.ravel()]
        return {
            "scene_id": self.scene_id,
            "frame": self.frame,
            "width": self.width,
            "height": self.height,
            "segment": rle_encode(self.segment.ravel().tolist()),
            "object": rle_encode(self.object.ravel().tolist()),
            "depth": rle_encode(depth),
        }

    @classmethod
    def from_json(cls, d: dict) -> LabeledImage:
        shape = (d["height"], d["width"])
        depth = np.array([np.inf if v is None else v for v in rle_decode(d["depth"])], dtype=np.float64)
        return cls(
            d["width"],
            d["height"],
            np.array(rle_decode(d["segment"]), dtype=np.int64).reshape(shape),
            np.array(rle_decode(d["object"]), dtype=np.int64).reshape(shape),
            depth.reshape(shape),
            d.get("scene_id", -1),
            d.get("frame", -1),
        )


def rle_encode(values: list) -> list[list]:
    runs: list[list] = []
    for v in values:
        if runs and runs[-1][0] == v:
            runs[-1][1] += 1
        else:
            runs.append([v, 1])
    return runs


def rle_decode(runs) -> list:
    out: list = []
    for v, n in runs:
        out.extend([v] * n)
    return out


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world pose; camera axes x right, y down, z forward."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = normalize(np.asarray(target, dtype=np.float64) - eye)
    right = normalize(np.cross(fwd, up))
    down = np.cross(fwd, right)
    return RigidTransform(np.column_stack([right, down, fwd]), eye)


def camera_ring(n: int, radius: float, height: float, center=(0.0, 0.0, 0.05), phase: float = 0.0) -> list[RigidTransform]:
    c = np.asarray(center, dtype=np.float64)
    poses = []
    for i in range(n):
        a = phase + 2 * math.pi * i / n
        eye = c + np.array([radius * math.cos(a), radius * math.sin(a), height])
        poses.append(look_at(eye, c))
    return poses


def project_scene(cloud: PointCloud, camera: RigidTransform, intrinsics: Intrinsics, splat: int = 0,
                  scene_id: int = -1, frame: int = -1) -> LabeledImage:
    """Z-buffered projection; each point covers a (2*splat+1)^2 pixel square."""
    W, H = intrinsics.width, intrinsics.height
    seg_img = np.full((H, W), -1, dtype=np.int64)
    obj_img = np.full((H, W), -1, dtype=np.int64)
    depth = np.full((H, W), np.inf)
    if len(cloud):
        pc = camera.inverse().apply(cloud.points)
        front = pc[:, 2] > 1e-6
        pc = pc[front]
        seg = cloud.segment_id[front]
        obj = cloud.object_id[front] if cloud.object_id is not None else np.full(len(seg), -1)
        u = np.floor(intrinsics.fx * pc[:, 0] / pc[:, 2] + intrinsics.cx + 0.5).astype(np.int64)
        v = np.floor(intrinsics.fy * pc[:, 1] / pc[:, 2] + intrinsics.cy + 0.5).astype(np.int64)
        z = pc[:, 2]
        idx = np.arange(len(z))
        if splat > 0:
            du, dv = np.meshgrid(np.arange(-splat, splat + 1), np.arange(-splat, splat + 1))
            du, dv = du.ravel(), dv.ravel()
            u = (u[:, None] + du[None, :]).ravel()
            v = (v[:, None] + dv[None, :]).ravel()
            idx = np.repeat(idx, len(du))
        inside = (u >= 0) & (u < W) & (v >= 0) & (v < H)
        u, v, idx = u[inside], v[inside], idx[inside]
        order = np.lexsort((idx, z[idx]))
        pix = (v * W + u)[order]
        _, first = np.unique(pix, return_index=True)
        winners = order[first]
        flat = (v * W + u)[winners]
        seg_img.ravel()[flat] = seg[idx[winners]]
        obj_img.ravel()[flat] = obj[idx[winners]]
        depth.ravel()[flat] = z[idx[winners]]
    return LabeledImage(W, H, seg_img, obj_img, depth, scene_id, frame)


def default_intrinsics(cfg: GeneratorConfig) -> Intrinsics:
    return Intrinsics(cfg.focal, cfg.focal, cfg.image_width / 2, cfg.image_height / 2, cfg.image_width, cfg.image_height)


def train_cameras(cfg: GeneratorConfig) -> list[RigidTransform]:
    return camera_ring(cfg.frames_per_scene, 0.65, 0.85)


def test_cameras(cfg: GeneratorConfig) -> list[RigidTransform]:
    n = cfg.test_frames_per_scene
    return camera_ring(n, 0.4, 1.0, phase=math.pi / max(n, 1) + 0.1)


# ------------------------------------------------------------------- dataset


@dataclass
class Dataset:
    templates: list[ObjectTemplate]
    scenes: list[SceneSpec]
    graphs: list[SegmentGraph]
    clouds: list[PointCloud]
    frames: dict[int, list[LabeledImage]] = field(default_factory=dict)

    def scene_index(self, scene_id: int) -> int:
        return next(i for i, s in enumerate(self.scenes) if s.scene_id == scene_id)


def render_frames(cloud: PointCloud, cameras, intr: Intrinsics, splat: int, scene_id: int) -> list[LabeledImage]:
    return [project_scene(cloud, cam, intr, splat, scene_id, t) for t, cam in enumerate(cameras)]


def build_dataset(cfg: GeneratorConfig, seed: int) -> Dataset:
    templates, scenes = generate_dataset(cfg.k_objects, cfg.m_scenes, seed, cfg)
    graphs, clouds, frames = [], [], {}
    intr = default_intrinsics(cfg)
    for sc in scenes:
        g, c = build_segment_graph(sc, templates, cfg.adjacency_eps)
        graphs.append(g)
        clouds.append(c)
        frames[sc.scene_id] = render_frames(c, train_cameras(cfg), intr, cfg.splat, sc.scene_id)
    return Dataset(templates, scenes, graphs, clouds, frames)


def save_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "templates.json").write_text(json.dumps({"templates": [t.to_json() for t in ds.templates]}))
    for sc, g, c in zip(ds.scenes, ds.graphs, ds.clouds):
        d = root / f"scene_{sc.scene_id}"
        (d / "frames").mkdir(parents=True, exist_ok=True)
        (d / "scene.json").write_text(json.dumps(sc.to_json()))
        c.save_txt(d / "cloud.txt")
        g.save(d / "graph.json")
        for img in ds.frames.get(sc.scene_id, []):
            (d / "frames" / f"{img.frame}.img.json").write_text(json.dumps(img.to_json()))
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    templates = [ObjectTemplate.from_json(t) for t in json.loads((root / "templates.json").read_text())["templates"]]
    scene_dirs = sorted(root.glob("scene_*"), key=lambda p: int(p.name.split("_")[1]))
    scenes, graphs, clouds, frames = [], [], [], {}
    for d in scene_dirs:
        sc = SceneSpec.from_json(json.loads((d / "scene.json").read_text()))
        scenes.append(sc)
        graphs.append(SegmentGraph.load(d / "graph.json"))
        clouds.append(PointCloud.load_txt(d / "cloud.txt"))
        imgs = sorted((d / "frames").glob("*.img.json"), key=lambda p: int(p.name.split(".")[0]))
        frames[sc.scene_id] = [LabeledImage.from_json(json.loads(p.read_text())) for p in imgs]
    return Dataset(templates, scenes, graphs, clouds, frames)
