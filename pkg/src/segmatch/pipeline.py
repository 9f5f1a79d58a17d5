"""End-to-end orchestration: generate, embed, match, prune and merge, train, infer, evaluate.

Every stage is a plain function over in-memory objects; the run_* drivers persist
each stage's output so a later stage can be rerun from disk.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from .cluster import ClusterConfig, save_mask, segment_image
from .embed import EmbeddingTable, PixelGroups, train
from .matching import DEFAULT_EPS, DEFAULT_SIZE_CAP, MatchResult, components, match_all_components
from .metrics import AGGREGATION_NOTE, MetricReport, format_table, pool_reports, segmentation_metrics
from .prune import (AcceptedMatch, PruneConfig, PseudoLabeling, criterion1_cost_gate, merge_to_pseudolabels,
                    parts_only_labeling, prune_matches)
from .registration import DEFAULT_DELTA, DEFAULT_ITERS, alignment_score, ransac_register, score_matched_nodes
from .synth import (Dataset, GeneratorConfig, LabeledImage, build_dataset, default_intrinsics, load_dataset,
                    render_frames, save_dataset, test_cameras)
from .types import cosine_distance_matrix

log = logging.getLogger(__name__)

VARIANTS = ("no-matching", "no-pruning", "registration-only")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class EmbedConfig:
    tau: float = 0.07
    lr: float = 0.5
    phi1_epochs: int = 10
    phi2_epochs: int = 50


@dataclass
class MatchConfig:
    eps_node: float = DEFAULT_EPS
    eps_edge: float = DEFAULT_EPS
    size_cap: int = DEFAULT_SIZE_CAP
    timeout: float = 10.0


@dataclass
class RegistrationConfig:
    delta: float = DEFAULT_DELTA
    iters: int = DEFAULT_ITERS
    mode: str = "component"
    feature_cos: float = 0.9  # registration-only ablation: node pairs also need this feature similarity


@dataclass
class EvalConfig:
    every: int = 10


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "runs/default"
    workers: int = 1
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> PipelineConfig:
        return _build(cls, d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> PipelineConfig:
        return cls.from_json(json.loads(Path(path).read_text()))


def _build(cls, d: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {unknown}")
    kwargs = {}
    for name, v in d.items():
        default = getattr(cls(), name) if name in known else None
        kwargs[name] = _build(type(default), v) if is_dataclass(default) else v
    return cls(**kwargs)


def validate(cfg: PipelineConfig) -> None:
    cfg.generator.validate()
    if cfg.workers < 1 or cfg.eval.every < 1:
        raise ValueError("workers and eval.every must be >= 1")
    if cfg.registration.mode not in ("component", "pair"):
        raise ValueError(f"unknown registration mode {cfg.registration.mode!r}")
    if cfg.embed.tau <= 0 or cfg.embed.lr <= 0:
        raise ValueError("tau and lr must be positive")


# ------------------------------------------------------------------ stages


def generate(cfg: PipelineConfig) -> Dataset:
    return build_dataset(cfg.generator, cfg.seed)


def test_frames(ds: Dataset, cfg: PipelineConfig) -> dict[int, list[LabeledImage]]:
    """Held-out views of every scene, keeping every eval.every-th frame."""
    g = cfg.generator
    cams = test_cameras(g)[:: cfg.eval.every]
    intr = default_intrinsics(g)
    out = {}
    for sc, cloud in zip(ds.scenes, ds.clouds):
        frames = render_frames(cloud, cams, intr, g.splat, sc.scene_id)
        out[sc.scene_id] = [replace(f, frame=n * cfg.eval.every) for n, f in enumerate(frames)]
    return out


def pixel_groups(ds: Dataset, labeling: PseudoLabeling | None = None) -> PixelGroups:
    """One training row per (scene, segment), weighted by its pixel count over the training frames.

    Labels are segment ids (stage 1) or pseudo-object ids (stage 2).
    """
    keys, labels, weights = [], [], []
    for g in ds.graphs:
        counts = dict.fromkeys(g.node_ids, 0)
        for img in ds.frames.get(g.scene_id, []):
            ids, n = np.unique(img.segment[img.segment >= 0], return_counts=True)
            for s, c in zip(ids.tolist(), n.tolist()):
                counts[s] += c
        for s in g.node_ids:
            keys.append((g.scene_id, s))
            labels.append(s if labeling is None else labeling.label(g.scene_id, s))
            weights.append(float(counts[s]))
    return PixelGroups(keys, labels, weights)


def train_phi1(ds: Dataset, cfg: PipelineConfig) -> EmbeddingTable:
    """Segment-discriminative features, started from the observed per-segment features."""
    init = {(g.scene_id, s): g.feature(s) for g in ds.graphs for s in g.node_ids}
    e = cfg.embed
    return train(pixel_groups(ds), e.phi1_epochs, e.lr, e.tau, cfg.seed, init=init, dim=cfg.generator.feature_dim)


def train_phi2(ds: Dataset, labeling: PseudoLabeling, cfg: PipelineConfig) -> EmbeddingTable:
    e = cfg.embed
    return train(pixel_groups(ds, labeling), e.phi2_epochs, e.lr, e.tau, cfg.seed + 1, dim=cfg.generator.feature_dim)


def graphs_with(ds: Dataset, table: EmbeddingTable):
    return [g.with_features(np.array([table.row((g.scene_id, s)) for s in g.node_ids])) for g in ds.graphs]


def match_stage(ds: Dataset, phi1: EmbeddingTable, cfg: PipelineConfig, timings: list | None = None) -> list[MatchResult]:
    m = cfg.match
    return match_all_components(graphs_with(ds, phi1), m.eps_node, m.eps_edge, m.size_cap, m.timeout,
                                cfg.workers, timings)


def attach_scores(matches: list[MatchResult], ds: Dataset, cfg: PipelineConfig) -> list[MatchResult]:
    """Registration scores for every match that passes the cost gate (the others never need them)."""
    clouds = {g.scene_id: c for g, c in zip(ds.graphs, ds.clouds)}
    r = cfg.registration
    out = []
    for n, m in enumerate(matches):
        if m.x and criterion1_cost_gate(m, cfg.prune):
            m = replace(m, scores=score_matched_nodes(m, clouds[m.src_scene], clouds[m.dst_scene], r.mode,
                                                      r.iters, r.delta, cfg.seed * 100003 + n))
        out.append(m)
    return out


def prune_merge(matches: list[MatchResult], ds: Dataset, cfg: PipelineConfig, pruning: bool = True) -> PseudoLabeling:
    if pruning:
        kept = prune_matches(matches, cfg.prune)
    else:
        kept = prune_matches(matches, cfg.prune, cost_gate=False, registration_gate=False, isolation_filter=False)
    return merge_to_pseudolabels(kept, ds.graphs)


def registration_only(ds: Dataset, phi1: EmbeddingTable, cfg: PipelineConfig) -> PseudoLabeling:
    """Blind registration of every ordered component pair across scenes, no matching candidates.

    A node pair is merged when it registers with precision and recall >= t2 and its
    features agree to the configured cosine.
    """
    r = cfg.registration
    graphs = graphs_with(ds, phi1)
    clouds = {g.scene_id: c for g, c in zip(ds.graphs, ds.clouds)}
    comps = [(g.scene_id, components(g)) for g in graphs]
    accepted = []
    n = 0
    for s, src_comps in comps:
        for c1 in src_comps:
            for t, dst_comps in comps:
                if t == s:
                    continue
                for c2 in dst_comps:
                    n += 1
                    src, dst = clouds[s].select(c1.node_ids), clouds[t].select(c2.node_ids)
                    if len(src) < 3 or len(dst) < 3:
                        continue
                    T = ransac_register(src, dst, r.iters, r.delta, cfg.seed * 100003 + n).transform
                    cos = 1.0 - cosine_distance_matrix(c1.features, c2.features)
                    pairs = []
                    for a, i in enumerate(c1.node_ids):
                        for b, k in enumerate(c2.node_ids):
                            if cos[a, b] <= r.feature_cos:
                                continue
                            sc = alignment_score(clouds[s].segment_points(i), clouds[t].segment_points(k), T, r.delta)
                            if sc.precision >= cfg.prune.t2 and sc.recall >= cfg.prune.t2:
                                pairs.append((i, k))
                    if pairs:
                        m = MatchResult(s, t, c1.node_ids, c2.node_ids, len(c1.edges), tuple(pairs), (), 0.0)
                        accepted.append(AcceptedMatch(m, tuple(pairs)))
    return merge_to_pseudolabels(accepted, ds.graphs)


def pixel_features(img: LabeledImage, phi2: EmbeddingTable) -> np.ndarray:
    """Per-pixel features from the table row of each pixel's segment (zeros on background)."""
    F = np.zeros((img.height, img.width, phi2.dim))
    fg = img.foreground
    segs = np.unique(img.segment[fg])
    rows = np.array([phi2.row((img.scene_id, int(s))) for s in segs])
    F[fg] = rows[np.searchsorted(segs, img.segment[fg])]
    return F


def infer(frames: dict[int, list[LabeledImage]], phi2: EmbeddingTable, cfg: PipelineConfig) -> dict[tuple[int, int], np.ndarray]:
    out = {}
    for s in sorted(frames):
        for img in frames[s]:
            out[(s, img.frame)] = segment_image(pixel_features(img, phi2), img.foreground, cfg.cluster)
    return out


def eval_3d(ds: Dataset, labeling: PseudoLabeling) -> MetricReport:
    reps = []
    for g, c in zip(ds.graphs, ds.clouds):
        lab = labeling.labels[g.scene_id]
        pred = np.array([lab[int(s)] for s in c.segment_id], dtype=np.int64)
        reps.append(segmentation_metrics(pred, c.object_id, "points"))
    return pool_reports(reps)


def eval_2d(frames: dict[int, list[LabeledImage]], masks: dict[tuple[int, int], np.ndarray]) -> MetricReport:
    reps = [segmentation_metrics(masks[(s, img.frame)], img.object, "pixels") for s in sorted(frames) for img in frames[s]]
    return pool_reports(reps)


# ----------------------------------------------------------------- drivers


class _Clock:
    def __init__(self):
        self.times: dict[str, float] = {}

    def run(self, stage: str, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kw)
        except Exception as exc:
            raise StageError(stage, exc) from exc
        self.times[stage] = self.times.get(stage, 0.0) + time.perf_counter() - t0
        log.info("%s done in %.2fs", stage, self.times[stage])
        return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _persist(out: Path | None, name: str, obj) -> None:
    if out is None:
        return
    if hasattr(obj, "save"):
        obj.save(out / name)
    else:
        _write_json(out / name, obj)


def _train_and_score(ds, labeling, frames, cfg, clock, out, name):
    phi2 = clock.run(f"train_phi2[{name}]", train_phi2, ds, labeling, cfg)
    _persist(out, "step4_phi2.json", phi2)
    masks = clock.run(f"infer[{name}]", infer, frames, phi2, cfg)
    if out is not None:
        mdir = out / "step5_masks"
        mdir.mkdir(exist_ok=True)
        for (s, f), m in sorted(masks.items()):
            save_mask(m, mdir / f"scene{s}_frame{f}.json")
    return clock.run(f"eval[{name}]", eval_2d, frames, masks)


def _pseudo_labels(variant, ds, phi1, cfg, clock, out, cache):
    if variant == "no-matching":
        return parts_only_labeling(ds.graphs)
    if variant == "registration-only":
        return clock.run("register_exhaustive", registration_only, ds, phi1, cfg)
    if "matches" not in cache:
        timings: list[float] = []
        cache["matches"] = clock.run("match", match_stage, ds, phi1, cfg, timings)
        cache["pair_seconds"] = timings
    matches = cache["matches"]
    if variant is None:
        matches = clock.run("register", attach_scores, matches, ds, cfg)
    _persist(out, "step2_matches.json", {"matches": [m.to_json() for m in matches]})
    if out is not None:
        _write_json(out / "step2_pair_times.json", {"seconds": cache["pair_seconds"]})
    return clock.run(f"prune_merge[{variant or 'full'}]", prune_merge, matches, ds, cfg, variant is None)


def _run(cfg: PipelineConfig, variants: list[str | None], write: bool = True) -> dict:
    validate(cfg)
    for v in variants:
        if v is not None and v not in VARIANTS:
            raise ValueError(f"unknown ablation {v!r}")
    out = Path(cfg.out) if write else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
    clock = _Clock()
    ds = clock.run("generate", generate, cfg)
    frames = clock.run("generate", test_frames, ds, cfg)
    if out is not None:
        save_dataset(ds, out / "step0_dataset")
    phi1 = clock.run("train_phi1", train_phi1, ds, cfg)
    _persist(out, "step1_phi1.json", phi1)
    parts = parts_only_labeling(ds.graphs)
    report = {"seed": cfg.seed, "note": AGGREGATION_NOTE, "pseudo_labels_3d": {"parts_only": eval_3d(ds, parts).to_json()},
              "final_2d": {}}
    cache: dict = {}
    for v in variants:
        name = v or "full"
        sub = None
        if out is not None:
            sub = out if v is None else out / f"ablate_{v}"
            sub.mkdir(exist_ok=True)
        labeling = _pseudo_labels(v, ds, phi1, cfg, clock, sub, cache)
        _persist(sub, "step3_pseudolabels.json", labeling)
        report["pseudo_labels_3d"][name] = eval_3d(ds, labeling).to_json()
        report["final_2d"][name] = _train_and_score(ds, labeling, frames, cfg, clock, sub, name).to_json()
        report.setdefault("conflicts", {})[name] = len(labeling.conflicts)
    if out is not None:
        _write_json(out / "report.json", report)
        (out / "report.txt").write_text(format_report(report))
        _write_json(out / "timings.json", clock.times)
    report["_timings"] = clock.times
    return report


def run_full(cfg: PipelineConfig, write: bool = True) -> dict:
    return _run(cfg, [None], write)


def run_ablation(cfg: PipelineConfig, variant: str, write: bool = True) -> dict:
    return _run(cfg, [variant], write)


def run_all(cfg: PipelineConfig, variants=VARIANTS, write: bool = True) -> dict:
    """Full pipeline and the requested ablations on one shared dataset and stage-1 table."""
    return _run(cfg, [None, *variants], write)


def format_report(report: dict) -> str:
    def rows(section):
        return {k: MetricReport(v["precision"], v["recall"], v["iou"]) for k, v in report[section].items()}

    a = format_table(rows("pseudo_labels_3d"), "3D pseudo-labels (points)")
    b = format_table(rows("final_2d"), "final 2D segmentation (pixels)")
    return f"seed {report['seed']}\n\n{a}\n\n{b}\n"


def load_stage(path) -> dict:
    return json.loads(Path(path).read_text())


def load_matches(path) -> list[MatchResult]:
    return [MatchResult.from_json(m) for m in load_stage(path)["matches"]]


__all__ = [
    "EmbedConfig", "EvalConfig", "MatchConfig", "PipelineConfig", "RegistrationConfig", "StageError", "VARIANTS",
    "attach_scores", "eval_2d", "eval_3d", "generate", "graphs_with", "infer", "load_dataset", "load_matches",
    "match_stage", "pixel_features", "pixel_groups", "prune_merge", "registration_only", "run_ablation", "run_all",
    "run_full", "test_frames", "train_phi1", "train_phi2", "validate",
]
