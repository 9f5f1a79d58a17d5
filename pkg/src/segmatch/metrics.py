"""Instance segmentation metrics: IoU-based Hungarian association, then mean precision/recall/IoU."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

TIE_BREAK = 1e-10
AGGREGATION_NOTE = "unmatched predictions count as precision 0, unmatched truths as recall 0, both with IoU 0"


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost injective assignment of min(n, m) pairs, sorted by row."""
    C = np.asarray(cost, dtype=np.float64)
    if C.size == 0:
        return []
    if C.ndim != 2 or not np.all(np.isfinite(C)):
        raise ValueError("cost must be a finite 2-d matrix")
    r, c = linear_sum_assignment(C)
    return sorted(zip(r.tolist(), c.tolist()))


@dataclass(frozen=True)
class InstanceScore:
    pred: int | None
    gt: int | None
    precision: float | None
    recall: float | None
    iou: float

    def to_json(self) -> dict:
        return {"pred": self.pred, "gt": self.gt, "precision": self.precision, "recall": self.recall, "iou": self.iou}


@dataclass(frozen=True)
class MetricReport:
    precision: float
    recall: float
    iou: float
    instances: tuple[InstanceScore, ...] = field(default=(), repr=False)
    n_unmatched_pred: int = 0
    n_unmatched_gt: int = 0
    domain: str = "pixels"

    def to_json(self, with_instances: bool = False) -> dict:
        d = {
            "domain": self.domain,
            "precision": self.precision,
            "recall": self.recall,
            "iou": self.iou,
            "n_instances": len(self.instances),
            "n_unmatched_pred": self.n_unmatched_pred,
            "n_unmatched_gt": self.n_unmatched_gt,
        }
        if with_instances:
            d["instances"] = [i.to_json() for i in self.instances]
        return d


def _summarise(instances: list[InstanceScore], domain: str) -> MetricReport:
    precs = [i.precision for i in instances if i.precision is not None]
    recs = [i.recall for i in instances if i.recall is not None]
    ious = [i.iou for i in instances]
    return MetricReport(
        float(np.mean(precs)) if precs else 1.0,
        float(np.mean(recs)) if recs else 1.0,
        float(np.mean(ious)) if ious else 1.0,
        tuple(instances),
        sum(i.gt is None for i in instances),
        sum(i.pred is None for i in instances),
        domain,
    )


def segmentation_metrics(pred, gt, domain: str = "pixels") -> MetricReport:
    """Elements with gt < 0 are background and must be unlabeled (< 0) in pred too."""
    if domain not in ("pixels", "points"):
        raise ValueError(f"unknown domain {domain!r}")
    p = np.asarray(pred).reshape(-1)
    g = np.asarray(gt).reshape(-1)
    if p.shape != g.shape or not np.array_equal(p >= 0, g >= 0):
        raise ValueError("prediction and ground truth cover different element sets")
    fg = g >= 0
    p, g = p[fg], g[fg]
    pids, pinv = np.unique(p, return_inverse=True)
    gids, ginv = np.unique(g, return_inverse=True)
    inter = np.zeros((len(pids), len(gids)))
    np.add.at(inter, (pinv, ginv), 1)
    psize, gsize = inter.sum(axis=1), inter.sum(axis=0)
    union = psize[:, None] + gsize[None, :] - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)

    prec = np.divide(inter, psize[:, None], out=np.zeros_like(inter), where=psize[:, None] > 0)
    instances = []
    matched_p, matched_g = set(), set()
    # equal-IoU assignments can swap precision and recall between pairs; prefer precision
    # so the outcome does not hinge on label ids
    for a, b in hungarian(1.0 - iou - TIE_BREAK * prec):
        if inter[a, b] == 0:
            continue
        matched_p.add(a)
        matched_g.add(b)
        instances.append(InstanceScore(int(pids[a]), int(gids[b]), inter[a, b] / psize[a], inter[a, b] / gsize[b], iou[a, b]))
    for a in range(len(pids)):
        if a not in matched_p:
            instances.append(InstanceScore(int(pids[a]), None, 0.0, None, 0.0))
    for b in range(len(gids)):
        if b not in matched_g:
            instances.append(InstanceScore(None, int(gids[b]), None, 0.0, 0.0))
    return _summarise(instances, domain)


def pool_reports(reports: list[MetricReport]) -> MetricReport:
    """Instance-level pooling across frames or scenes."""
    if not reports:
        raise ValueError("nothing to pool")
    domains = {r.domain for r in reports}
    if len(domains) != 1:
        raise ValueError("cannot pool pixel and point reports")
    return _summarise([i for r in reports for i in r.instances], domains.pop())


def format_table(rows: dict[str, MetricReport], title: str = "") -> str:
    """Aligned text table, one row per method."""
    width = max([len(k) for k in rows] + [6])
    lines = [title] if title else []
    lines.append(f"{'method':<{width}}  {'prec':>6}  {'recall':>6}  {'iou':>6}")
    for name, r in rows.items():
        lines.append(f"{name:<{width}}  {r.precision:6.3f}  {r.recall:6.3f}  {r.iou:6.3f}")
    lines.append(f"({AGGREGATION_NOTE})")
    return "\n".join(lines)
