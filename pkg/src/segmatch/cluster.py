"""Mean-shift over unit pixel features with a von Mises-Fisher feature kernel and a Gaussian
spatial kernel, followed by a connected-component split."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .synth import rle_decode, rle_encode


@dataclass(frozen=True)
class ClusterConfig:
    kappa: float = 20.0
    sigma_px: float = 15.0
    max_iters: int = 50
    mode_merge_cos: float = 0.95
    seed_stride: int = 4
    tol: float = 1e-6
    min_island_px: int = 10  # smaller 4-connected pieces join the neighbouring cluster they touch most

    def __post_init__(self):
        if not (self.kappa > 0 and self.sigma_px > 0):
            raise ValueError("kappa and sigma_px must be positive")
        if self.max_iters < 1 or self.seed_stride < 1 or self.min_island_px < 0:
            raise ValueError("max_iters and seed_stride must be >= 1, min_island_px >= 0")
        if not -1.0 <= self.mode_merge_cos <= 1.0:
            raise ValueError("mode_merge_cos must be a cosine")


def _log_weights(modes: np.ndarray, seed_uv: np.ndarray, feats: np.ndarray, uvs: np.ndarray, cfg: ClusterConfig) -> np.ndarray:
    d2 = ((seed_uv[:, None, :] - uvs[None, :, :]) ** 2).sum(axis=2)
    return cfg.kappa * (modes @ feats.T) - d2 / (2.0 * cfg.sigma_px**2)


def _shift(modes, seed_uv, feats, uvs, cfg):
    lw = _log_weights(modes, seed_uv, feats, uvs, cfg)
    w = np.exp(lw - lw.max(axis=1, keepdims=True))
    m = w @ feats
    n = np.linalg.norm(m, axis=1, keepdims=True)
    ok = n[:, 0] > 1e-12
    out = modes.copy()
    out[ok] = m[ok] / n[ok]
    return out, ok


def meanshift_step(mode, uv, features, uvs, cfg: ClusterConfig = ClusterConfig()) -> tuple[np.ndarray, bool]:
    """One update of a single mode; the spatial centre stays at the seed pixel.

    Returns (new mode, ok). When the weighted mean vanishes the old mode is kept and ok is False.
    """
    F = np.asarray(features, dtype=np.float64)
    if len(F) == 0:
        raise ValueError("mean-shift needs at least one sample")
    out, ok = _shift(np.asarray(mode, dtype=np.float64)[None], np.asarray(uv, dtype=np.float64)[None],
                     F, np.asarray(uvs, dtype=np.float64), cfg)
    return out[0], bool(ok[0])


def _merge_modes(modes: np.ndarray, thr: float) -> np.ndarray:
    """Single-linkage groups of modes with cosine >= thr (order independent)."""
    adj = (modes @ modes.T) >= thr
    n, lab = _components(adj)
    return lab


def _components(adj: np.ndarray):
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import connected_components

    return connected_components(csr_matrix(adj), directed=False)


def cluster_samples(features, uvs, cfg: ClusterConfig = ClusterConfig(), return_info: bool = False):
    """Cluster ids for pixel samples (features (n, D) unit rows, uvs (n, 2) pixel coordinates).

    Seeds are every seed_stride-th sample in row-major pixel order, so the result does
    not depend on the order the samples are given in.
    """
    F = np.asarray(features, dtype=np.float64)
    UV = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
    n = len(F)
    if n == 0:
        return (np.zeros(0, dtype=np.int64), {"n_iters": 0, "unconverged": 0}) if return_info else np.zeros(0, dtype=np.int64)
    if len(UV) != n:
        raise ValueError("features and uvs differ in length")
    order = np.lexsort((UV[:, 0], UV[:, 1]))  # row-major: v then u
    F, UV = F[order], UV[order]
    seeds = np.arange(0, n, cfg.seed_stride)
    modes = F[seeds].copy()
    seed_uv = UV[seeds]
    active = np.ones(len(seeds), dtype=bool)
    failed = np.zeros(len(seeds), dtype=bool)
    it = 0
    for it in range(1, cfg.max_iters + 1):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            it -= 1
            break
        new, ok = _shift(modes[idx], seed_uv[idx], F, UV, cfg)
        moved = np.sum(new * modes[idx], axis=1)
        modes[idx] = new
        failed[idx[~ok]] = True
        active[idx[(moved > 1.0 - cfg.tol) | ~ok]] = False
    seed_lab = _merge_modes(modes, cfg.mode_merge_cos)
    # canonical ids: first appearance in row-major seed order
    _, first = np.unique(seed_lab, return_index=True)
    remap = np.empty(seed_lab.max() + 1, dtype=np.int64)
    remap[seed_lab[np.sort(first)]] = np.arange(len(first))
    seed_lab = remap[seed_lab]
    # every sample takes the cluster of its nearest seed in the joint kernel space
    joint = np.hstack([math.sqrt(cfg.kappa / 2) * F, UV / (math.sqrt(2) * cfg.sigma_px)])
    _, nn = cKDTree(joint[seeds]).query(joint)
    lab_sorted = seed_lab[nn]
    lab_sorted[seeds] = seed_lab
    labels = np.empty(n, dtype=np.int64)
    labels[order] = lab_sorted
    if return_info:
        return labels, {"n_iters": it, "unconverged": int(active.sum() + failed.sum())}
    return labels


def cluster_image(features: np.ndarray, mask: np.ndarray, cfg: ClusterConfig = ClusterConfig()) -> np.ndarray:
    """features (H, W, D), mask (H, W) bool -> cluster ids, -1 on background."""
    mask = np.asarray(mask, dtype=bool)
    out = np.full(mask.shape, -1, dtype=np.int64)
    if not mask.any():
        return out
    v, u = np.nonzero(mask)
    out[v, u] = cluster_samples(features[v, u], np.column_stack([u, v]), cfg)
    return out


def split_disconnected(labels: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Every output cluster is 4-connected; ids follow row-major first-pixel order."""
    labels = np.asarray(labels)
    mask = labels >= 0 if mask is None else np.asarray(mask, dtype=bool)
    out = np.full(labels.shape, -1, dtype=np.int64)
    pieces = []
    for c in np.unique(labels[mask]):
        comp, k = ndimage.label((labels == c) & mask)
        if k == 0:
            continue
        flat = comp.ravel()
        first = np.full(k + 1, flat.size)
        pos = np.flatnonzero(flat)
        np.minimum.at(first, flat[pos], pos)
        for j in range(1, k + 1):
            pieces.append((int(first[j]), comp == j))
    for new_id, (_, region) in enumerate(sorted(pieces, key=lambda p: p[0])):
        out[region] = new_id
    return out


_FOUR = ((0, 1), (0, -1), (1, 0), (-1, 0))


def absorb_small_islands(labels: np.ndarray, min_area: int) -> np.ndarray:
    """Relabel connected pieces smaller than min_area with the 4-adjacent cluster sharing the longest border.

    Input must already be split into connected pieces; pieces touching only background stay.
    Each absorbed piece is adjacent to its new cluster, so connectivity is preserved.
    """
    out = np.array(labels, dtype=np.int64, copy=True)
    if min_area <= 1:
        return out
    H, W = out.shape
    ids, sizes = np.unique(out[out >= 0], return_counts=True)
    first = {int(i): int(np.flatnonzero(out.ravel() == i)[0]) for i in ids[sizes < min_area]}
    for i in sorted(first, key=lambda i: (int(sizes[ids == i][0]), first[i])):
        region = out == i
        if not region.any():
            continue
        border: dict[int, int] = {}
        v, u = np.nonzero(region)
        for dv, du in _FOUR:
            vv, uu = v + dv, u + du
            ok = (vv >= 0) & (vv < H) & (uu >= 0) & (uu < W)
            nb = out[vv[ok], uu[ok]]
            for j in nb[(nb >= 0) & (nb != i)].tolist():
                border[j] = border.get(j, 0) + 1
        if border:
            out[region] = min(border, key=lambda j: (-border[j], j))
    return out


def segment_image(features: np.ndarray, mask: np.ndarray, cfg: ClusterConfig = ClusterConfig()) -> np.ndarray:
    pieces = split_disconnected(cluster_image(features, mask, cfg), mask)
    return split_disconnected(absorb_small_islands(pieces, cfg.min_island_px), mask)


def mask_to_json(labels: np.ndarray) -> dict:
    h, w = labels.shape
    return {"width": w, "height": h, "labels": rle_encode(labels.ravel().tolist())}


def mask_from_json(d: dict) -> np.ndarray:
    return np.array(rle_decode(d["labels"]), dtype=np.int64).reshape(d["height"], d["width"])


def save_mask(labels: np.ndarray, path) -> None:
    Path(path).write_text(json.dumps(mask_to_json(labels)))


def load_mask(path) -> np.ndarray:
    return mask_from_json(json.loads(Path(path).read_text()))
