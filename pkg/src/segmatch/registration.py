"""Rigid registration of segment point clouds and precision/recall scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .types import PointCloud, RigidTransform, derive_rng

DEFAULT_DELTA = 0.005
DEFAULT_ITERS = 512


class DegenerateCorrespondences(ValueError):
    pass


@dataclass(frozen=True)
class RegistrationScore:
    transform: RigidTransform
    precision: float
    recall: float
    inlier_rms: float


@dataclass(frozen=True)
class PairScore:
    """Registration score of one matched node pair (source segment i, target segment k)."""

    i: int
    k: int
    precision: float
    recall: float

    def to_json(self) -> dict:
        return {"i": self.i, "k": self.k, "precision": self.precision, "recall": self.recall}

    @classmethod
    def from_json(cls, d: dict) -> PairScore:
        return cls(int(d["i"]), int(d["k"]), float(d["precision"]), float(d["recall"]))


def kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares R, t with R @ src + t ~ dst and det(R) = +1."""
    P = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    Q = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(P) != len(Q) or len(P) < 3:
        raise DegenerateCorrespondences("need >= 3 paired points")
    cp, cq = P.mean(axis=0), Q.mean(axis=0)
    A, B = P - cp, Q - cq
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] < 1e-12 or sv[1] < 1e-9 * sv[0]:
        raise DegenerateCorrespondences("correspondences are collinear")
    U, _, Vt = np.linalg.svd(A.T @ B)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    # re-orthonormalise away the last few ulps
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return RigidTransform(R, cq - R @ cp)


def alignment_score(src_pts: np.ndarray, dst_pts: np.ndarray, T: RigidTransform, delta: float = DEFAULT_DELTA,
                    dst_tree: cKDTree | None = None) -> RegistrationScore:
    moved = T.apply(src_pts)
    tree = dst_tree if dst_tree is not None else cKDTree(dst_pts)
    d_src, _ = tree.query(moved)
    d_dst, _ = cKDTree(moved).query(dst_pts)
    inl = d_src <= delta
    rms = float(np.sqrt(np.mean(d_src[inl] ** 2))) if inl.any() else float("inf")
    return RegistrationScore(T, float(inl.mean()), float(np.mean(d_dst <= delta)), rms)


def _descriptors(cloud: PointCloud, landmarks: list[np.ndarray]) -> np.ndarray:
    """Rigid-invariant per-point descriptor: distance to the own segment centroid, then to each landmark."""
    cols = [np.empty(len(cloud))]
    for s in cloud.segments:
        m = cloud.segment_id == s
        cols[0][m] = np.linalg.norm(cloud.points[m] - cloud.points[m].mean(axis=0), axis=1)
    cols += [np.linalg.norm(cloud.points - c, axis=1) for c in landmarks]
    return np.stack(cols, axis=1)


def _rigid_landmarks(cP: np.ndarray, cQ: np.ndarray, tol: float) -> list[int]:
    """Largest set of landmarks whose mutual distances agree with one member's.

    Paired segments from several independently placed objects do not share one
    rigid motion; descriptors built from all of them would match nothing.
    """
    n = len(cP)
    if n < 3:
        return list(range(n))
    dP = np.linalg.norm(cP[:, None] - cP[None], axis=2)
    dQ = np.linalg.norm(cQ[:, None] - cQ[None], axis=2)
    ok = np.abs(dP - dQ) <= tol
    best = max(range(n), key=lambda j: (int(ok[j].sum()), -j))
    return np.flatnonzero(ok[best]).tolist()


def ransac_register(src: PointCloud, dst: PointCloud, iters: int = DEFAULT_ITERS, delta: float = DEFAULT_DELTA,
                    seed: int = 0, pairs=None, max_score_points: int = 256, refine_rounds: int = 10,
                    n_refine: int = 8, early_stop: float = 0.9) -> RegistrationScore:
    """Best 3-point hypothesis, refined by Kabsch on nearest-neighbour inliers.

    Correspondence candidates for a source point are destination points in the
    segments `pairs` maps its segment to (any segment when `pairs` is None) whose
    descriptor agrees within delta. With one-to-one pairs the centroids of paired
    segments serve as shared landmarks, which pins candidates down sharply.
    """
    if len(src) < 3 or len(dst) < 3:
        raise ValueError("registration needs >= 3 points in each cloud")
    rng = derive_rng(seed, 23)
    P, Q = src.points, dst.points
    allowed: dict[int, list[int]] = {}
    if pairs is None:
        allowed = {s: dst.segments for s in src.segments}
    else:
        for i, k in pairs:
            allowed.setdefault(int(i), []).append(int(k))
    one_to_one = all(len(v) == 1 for v in allowed.values()) and len({v[0] for v in allowed.values()}) == len(allowed)
    src_segs, dst_segs = set(src.segments), set(dst.segments)
    marks = sorted((i, v[0]) for i, v in allowed.items() if i in src_segs and v[0] in dst_segs) if one_to_one else []
    cP = [src.segment_points(i).mean(axis=0) for i, _ in marks]
    cQ = [dst.segment_points(k).mean(axis=0) for _, k in marks]
    keep = _rigid_landmarks(np.array(cP).reshape(-1, 3), np.array(cQ).reshape(-1, 3), 6 * delta)
    dP = _descriptors(src, [cP[j] for j in keep])
    dQ = _descriptors(dst, [cQ[j] for j in keep])
    dst_by_seg = {}
    for k in dst.segments:
        idx = np.flatnonzero(dst.segment_id == k)
        dst_by_seg[k] = (idx, cKDTree(dQ[idx]))

    def candidates(p: int) -> np.ndarray:
        out = []
        for k in allowed.get(int(src.segment_id[p]), ()):
            if k in dst_by_seg:
                idx, dtree = dst_by_seg[k]
                out.append(idx[sorted(dtree.query_ball_point(dP[p], delta, p=np.inf))])
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    usable = np.array([int(s) in allowed for s in src.segment_id])
    if not usable.any():
        raise ValueError("no source segment has a registration partner")
    # anchor points far from their centroid constrain rotation best
    far = usable & (dP[:, 0] >= np.quantile(dP[usable, 0], 0.75))
    far_idx, use_idx = np.flatnonzero(far), np.flatnonzero(usable)
    spread = float(np.sqrt(np.mean(np.sum((P[usable] - P[usable].mean(axis=0)) ** 2, axis=1))))
    min_sep = max(4 * delta, 0.3 * spread)
    # a 3-point fit from noisy samples is only roughly right: vote with a looser radius
    coarse = 3 * delta

    tree = cKDTree(Q)
    score_idx = P if len(P) <= max_score_points else P[rng.choice(len(P), max_score_points, replace=False)]
    # near-symmetric shapes give wrong hypotheses with high coarse support, so
    # several of the best are refined and compared at the fine radius
    top: list[tuple[float, float, int, RigidTransform]] = []

    for it in range(iters):
        chosen_p = [int(rng.choice(far_idx))]
        for _ in range(2):
            cand = use_idx[np.all(np.linalg.norm(P[use_idx][:, None] - P[chosen_p][None], axis=2) >= min_sep, axis=1)]
            if len(cand) == 0:
                break
            chosen_p.append(int(rng.choice(cand)))
        if len(chosen_p) < 3:
            continue
        chosen_q: list[int] = []
        for p in chosen_p:
            c = candidates(p)
            if len(c) == 0:
                break
            if not chosen_q:
                chosen_q.append(int(rng.choice(c)))
                continue
            # later points: the most length-consistent candidate (jitter breaks shape symmetry)
            err = np.abs(dQ[c] - dP[p]).sum(axis=1)
            for prev_p, prev_q in zip(chosen_p, chosen_q):
                err += np.abs(np.linalg.norm(Q[c] - Q[prev_q], axis=1) - np.linalg.norm(P[p] - P[prev_p]))
            j = int(np.argmin(err))
            if err[j] > 2 * delta * len(chosen_q):
                break
            chosen_q.append(int(c[j]))
        if len(chosen_q) < 3:
            continue
        try:
            T = kabsch(P[chosen_p], Q[chosen_q])
        except DegenerateCorrespondences:
            continue
        d, _ = tree.query(T.apply(score_idx), distance_upper_bound=coarse)
        fine = float(np.mean(d <= delta))
        top.append((-fine, -float(np.mean(np.isfinite(d))), it, T))
        top.sort(key=lambda t: t[:3])
        del top[n_refine:]
        if fine >= early_stop:
            break

    if not top:
        top = [(0.0, 0.0, 0, RigidTransform.identity())]
    best_prec, best_T = -1.0, top[0][3]
    for *_, T in top:
        prec, T = _refine(P, Q, T, delta, tree, refine_rounds)
        if prec > best_prec:
            best_prec, best_T = prec, T
        if prec == 1.0:
            break
    best = alignment_score(P, Q, best_T, delta, tree)
    return best


def _refine(P, Q, T, delta, tree, rounds) -> tuple[float, RigidTransform]:
    """Kabsch on nearest-neighbour inliers with a shrinking radius; returns the best (precision, T) seen."""
    d, nn = tree.query(T.apply(P))
    best = (float(np.mean(d <= delta)), T)
    for r in range(rounds):
        inl = d <= delta * max(1.0, 3.0 - r)
        if inl.sum() < 3:
            break
        try:
            T_new = kabsch(P[inl], Q[nn[inl]])
        except DegenerateCorrespondences:
            break
        moved_far = np.abs(T_new.apply(P) - T.apply(P)).max()
        T = T_new
        d, nn = tree.query(T.apply(P))
        prec = float(np.mean(d <= delta))
        if prec >= best[0]:
            best = (prec, T)
        if moved_far < 1e-9:
            break
    return best


def _check_segments(cloud: PointCloud, segs, which: str):
    present = set(cloud.segments)
    missing = sorted(set(segs) - present)
    if missing:
        raise KeyError(f"{which} cloud has no points for segments {missing}")


def score_matched_nodes(match, src_cloud: PointCloud, dst_cloud: PointCloud, mode: str = "component",
                        iters: int = DEFAULT_ITERS, delta: float = DEFAULT_DELTA, seed: int = 0) -> tuple[PairScore, ...]:
    """Precision/recall of every matched node pair.

    "component": one transform for the union of matched segments, every pair scored under it.
    "pair": each node pair registered on its own.
    """
    if mode not in ("component", "pair"):
        raise ValueError(f"unknown registration mode {mode!r}")
    x = list(match.x)
    if not x:
        return ()
    _check_segments(src_cloud, [i for i, _ in x], "source")
    _check_segments(dst_cloud, [k for _, k in x], "target")
    out = []
    if mode == "component":
        src = src_cloud.select(i for i, _ in x)
        dst = dst_cloud.select(k for _, k in x)
        T = ransac_register(src, dst, iters, delta, seed, pairs=x).transform
        for i, k in x:
            s = alignment_score(src_cloud.segment_points(i), dst_cloud.segment_points(k), T, delta)
            out.append(PairScore(i, k, s.precision, s.recall))
    else:
        for n, (i, k) in enumerate(x):
            a, b = src_cloud.select([i]), dst_cloud.select([k])
            if len(a) < 3 or len(b) < 3:
                out.append(PairScore(i, k, 0.0, 0.0))
                continue
            s = ransac_register(a, b, iters, delta, seed + n, pairs=[(i, k)])
            out.append(PairScore(i, k, s.precision, s.recall))
    return tuple(out)
