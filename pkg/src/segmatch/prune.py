"""Pruning of component matches and merging of the survivors into object pseudo-labels."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .matching import MatchResult
from .types import SegmentGraph, weakly_connected_components

log = logging.getLogger(__name__)

Key = tuple[int, int]
ISOLATION_MODES = ("literal", "evidence", "off")


@dataclass(frozen=True)
class PruneConfig:
    alpha: float = 0.1
    t2: float = 0.9
    isolation: str = "evidence"  # criterion 3 flavour: "literal", "evidence" or "off"

    def __post_init__(self):
        if self.isolation not in ISOLATION_MODES:
            raise ValueError(f"isolation must be one of {ISOLATION_MODES}")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not 0 < self.t2 <= 1:
            raise ValueError("t2 must lie in (0, 1]")


@dataclass(frozen=True)
class AcceptedMatch:
    """A match after pruning: only the node pairs that may be merged remain."""

    match: MatchResult
    pairs: tuple[tuple[int, int], ...]

    @property
    def src_scene(self) -> int:
        return self.match.src_scene

    @property
    def dst_scene(self) -> int:
        return self.match.dst_scene

    @property
    def target_nodes(self) -> frozenset[int]:
        return frozenset(k for _, k in self.pairs)

    @property
    def complete(self) -> bool:
        """Every source node survived, i.e. the whole source component was found in the target."""
        return len(self.pairs) == len(self.match.source_nodes)


def criterion1_cost_gate(match: MatchResult, cfg: PruneConfig) -> bool:
    n = len(match.source_nodes) + match.n_source_edges
    return match.ok and match.J < cfg.alpha * n


def criterion2_registration_gate(scores, cfg: PruneConfig) -> tuple[tuple[int, int], ...]:
    return tuple((s.i, s.k) for s in scores if s.precision >= cfg.t2 and s.recall >= cfg.t2)


def criterion3_isolation_filter(matches: list[AcceptedMatch], mode: str = "literal") -> list[AcceptedMatch]:
    """Drop matches whose target node set strictly contains an exactly matched isolated component.

    "literal" trusts every complete match of an isolated source component as a whole
    object. "evidence" trusts it only when that component is seen isolated (its source
    scene plus targets where the match covers a whole component) in at least as many
    scenes as it is seen embedded in a larger matched node set. A fragment left behind
    by missing parts looks isolated once but embedded wherever the object is complete.
    """
    if mode == "off":
        return list(matches)
    if mode not in ("literal", "evidence"):
        raise ValueError(f"unknown isolation mode {mode!r}")
    by_dst: dict[int, list[int]] = {}
    for n, m in enumerate(matches):
        by_dst.setdefault(m.dst_scene, []).append(n)
    claims: dict[tuple[int, tuple[int, ...]], dict] = {}
    for m in matches:
        if m.complete:
            c = claims.setdefault((m.src_scene, m.match.source_nodes), {"isolated": {m.src_scene}, "exact": []})
            c["exact"].append((m.dst_scene, m.target_nodes))
            if m.target_nodes == frozenset(m.match.target_nodes):
                c["isolated"].add(m.dst_scene)
    drop: set[int] = set()
    for (s, nodes), c in sorted(claims.items()):
        covering: dict[int, set[int]] = {}
        for t, v in c["exact"]:
            hits = {n for n in by_dst[t] if v < matches[n].target_nodes}
            if hits:
                covering.setdefault(t, set()).update(hits)
        if covering and (mode == "literal" or len(c["isolated"]) >= len(covering)):
            for t, hits in covering.items():
                log.debug("criterion 3 (%s, %s) drops %d matches into scene %d", s, list(nodes), len(hits), t)
                drop |= hits
    return [m for n, m in enumerate(matches) if n not in drop]


def prune_matches(matches: list[MatchResult], cfg: PruneConfig, cost_gate: bool = True, registration_gate: bool = True,
                  isolation_filter: bool = True) -> list[AcceptedMatch]:
    """Apply the enabled criteria; registration scores must already be attached to cost-gate survivors."""
    kept = []
    for m in matches:
        if not m.ok or not m.x:
            continue
        if cost_gate and not criterion1_cost_gate(m, cfg):
            continue
        if registration_gate:
            if len(m.scores) != len(m.x):
                raise ValueError(f"match {m.src_scene}->{m.dst_scene} has no registration scores")
            pairs = criterion2_registration_gate(m.scores, cfg)
        else:
            pairs = m.x
        if pairs:
            kept.append(AcceptedMatch(m, pairs))
    return criterion3_isolation_filter(kept, cfg.isolation) if isolation_filter else kept


class _UnionFind:
    def __init__(self, keys):
        self.parent = {k: k for k in keys}
        self.members = {k: [k] for k in keys}

    def find(self, k):
        while self.parent[k] != k:
            self.parent[k] = self.parent[self.parent[k]]
            k = self.parent[k]
        return k

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if (len(self.members[ra]), rb) < (len(self.members[rb]), ra):
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.members[ra].extend(self.members.pop(rb))
        return ra


@dataclass
class PseudoLabeling:
    """Pseudo-object id per (scene, segment); ids are global, so one object keeps its id across scenes."""

    labels: dict[int, dict[int, int]]
    provenance: list[dict] = field(default_factory=list)
    conflicts: list[dict] = field(default_factory=list)

    def label(self, scene: int, seg: int) -> int:
        return self.labels[scene][seg]

    def objects(self, scene: int) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for seg, obj in sorted(self.labels[scene].items()):
            out.setdefault(obj, []).append(seg)
        return out

    def n_objects(self) -> int:
        return len({o for lab in self.labels.values() for o in lab.values()})

    def to_json(self) -> dict:
        scenes = []
        for s in sorted(self.labels):
            scenes.append({
                "scene_id": s,
                "labels": {str(k): v for k, v in sorted(self.labels[s].items())},
                "provenance": [p for p in self.provenance if s in (p["a"][0], p["b"][0])],
            })
        return {"scenes": scenes, "conflicts": self.conflicts}

    @classmethod
    def from_json(cls, d: dict) -> PseudoLabeling:
        labels = {int(sc["scene_id"]): {int(k): int(v) for k, v in sc["labels"].items()} for sc in d["scenes"]}
        prov, seen = [], set()
        for sc in d["scenes"]:
            for p in sc["provenance"]:
                key = json.dumps(p, sort_keys=True)
                if key not in seen:
                    seen.add(key)
                    prov.append(p)
        prov.sort(key=lambda p: p["step"])
        return cls(labels, prov, list(d.get("conflicts", [])))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> PseudoLabeling:
        return cls.from_json(json.loads(Path(path).read_text()))


def _match_unions(m: AcceptedMatch, graphs: dict[int, SegmentGraph]):
    """Union requests of one match: inside the source, inside the target, then across."""
    src = [i for i, _ in m.pairs]
    dst = [k for _, k in m.pairs]
    for scene, nodes in ((m.src_scene, src), (m.dst_scene, dst)):
        g = graphs[scene]
        ns = set(nodes)
        # adjacent pairs first so the guard sees connected growth
        for a, b in g.sorted_edges:
            if a in ns and b in ns:
                yield "within", (scene, a), (scene, b)
        for a in nodes[1:]:
            yield "within", (scene, nodes[0]), (scene, a)
    for i, k in m.pairs:
        yield "across", (m.src_scene, i), (m.dst_scene, k)


def merge_to_pseudolabels(matches: list[AcceptedMatch], graphs: list[SegmentGraph],
                          initial: PseudoLabeling | None = None, guard: str = "split") -> PseudoLabeling:
    """Transitive closure of matched nodes, kept connected inside every scene.

    guard="union" rejects any union that would leave a scene's part of the merged
    class disconnected. guard="split" takes the full closure and then splits each
    class, per scene, into its connected pieces; an object cut in two by a missing
    part in one scene then no longer blocks its merges in the others. Both log
    every disconnected case as a conflict.
    """
    if guard not in ("union", "split"):
        raise ValueError(f"unknown guard {guard!r}")
    by_scene = {g.scene_id: g for g in graphs}
    keys = [(g.scene_id, s) for g in graphs for s in g.node_ids]
    uf = _UnionFind(keys)

    def disconnected_scenes(members) -> list[int]:
        per: dict[int, set[int]] = {}
        for s, seg in members:
            per.setdefault(s, set()).add(seg)
        return sorted(s for s, segs in per.items() if not by_scene[s].is_connected_subset(segs))

    provenance, conflicts = [], []
    step = 0
    if initial is not None:
        groups: dict[int, list[Key]] = {}
        for s in sorted(initial.labels):
            for seg, obj in sorted(initial.labels[s].items()):
                if (s, seg) in uf.parent:
                    groups.setdefault(obj, []).append((s, seg))
        for members in groups.values():
            for k in members[1:]:
                uf.union(members[0], k)

    for n, m in enumerate(matches):
        for kind, a, b in _match_unions(m, by_scene):
            ra, rb = uf.find(a), uf.find(b)
            if ra == rb:
                continue
            if guard == "union":
                bad = disconnected_scenes(uf.members[ra] + uf.members[rb])
                if bad:
                    conflicts.append({"match": n, "src_scene": m.src_scene, "dst_scene": m.dst_scene,
                                      "a": list(a), "b": list(b), "scenes": bad})
                    log.info("connectivity guard rejects %s + %s (match %d)", a, b, n)
                    continue
            uf.union(a, b)
            provenance.append({"step": step, "match": n, "src_scene": m.src_scene, "dst_scene": m.dst_scene,
                               "kind": kind, "a": list(a), "b": list(b)})
            step += 1

    # per-scene pieces: (root, scene) groups split into connected components
    pieces: list[list[Key]] = []
    for root in sorted({uf.find(k) for k in keys}, key=lambda r: min(uf.members[r])):
        per: dict[int, list[int]] = {}
        for s, seg in sorted(uf.members[root]):
            per.setdefault(s, []).append(seg)
        split_here = []
        for s, segs in per.items():
            comps = weakly_connected_components(by_scene[s].subgraph(segs))
            if len(comps) > 1:
                split_here.append(s)
            pieces.extend([[(s, seg) for seg in sorted(c)] for c in comps])
        if split_here:
            conflicts.append({"class": list(min(uf.members[root])), "split_scenes": split_here})
    # a class keeps one id across scenes unless it had to be split somewhere
    ids: dict[Key, int] = {}
    next_id = 0
    for root in sorted({uf.find(k) for k in keys}, key=lambda r: min(uf.members[r])):
        mine = [p for p in pieces if uf.find(p[0]) == root]
        if all(len({s for s, _ in p}) == 1 for p in mine) and len(mine) == len({p[0][0] for p in mine}):
            for p in mine:
                for k in p:
                    ids[k] = next_id
            next_id += 1
        else:
            for p in sorted(mine):
                for k in p:
                    ids[k] = next_id
                next_id += 1
    labels: dict[int, dict[int, int]] = {g.scene_id: {} for g in graphs}
    for k in keys:
        labels[k[0]][k[1]] = ids[k]
    return PseudoLabeling(labels, provenance, conflicts)


def parts_only_labeling(graphs: list[SegmentGraph]) -> PseudoLabeling:
    """Every segment its own object."""
    return merge_to_pseudolabels([], graphs)
