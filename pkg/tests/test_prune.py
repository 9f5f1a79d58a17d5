import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import seeds
from segmatch.matching import MatchResult, build_problem, solve
from segmatch.prune import (
    AcceptedMatch,
    PruneConfig,
    PseudoLabeling,
    criterion1_cost_gate,
    criterion2_registration_gate,
    criterion3_isolation_filter,
    merge_to_pseudolabels,
    parts_only_labeling,
    prune_matches,
)
from segmatch.registration import PairScore
from segmatch.types import SegmentGraph


def chain(scene, n, dim=8, offset=0):
    feats = np.eye(dim)[offset:offset + n]
    return SegmentGraph(scene, tuple(range(n)), feats, (100,) * n, frozenset((i, i + 1) for i in range(n - 1)))


def match(src, dst, x, source_nodes=None, target_nodes=None, J=0.0, n_edges=0, scores=None):
    x = tuple(x)
    sn = tuple(source_nodes if source_nodes is not None else sorted({i for i, _ in x}))
    tn = tuple(target_nodes if target_nodes is not None else sorted({k for _, k in x}))
    sc = tuple(PairScore(i, k, 1.0, 1.0) for i, k in x) if scores is None else tuple(scores)
    return MatchResult(src, dst, sn, tn, n_edges, x, (), J, scores=sc)


def accepted(src, dst, x, source_nodes=None, target_nodes=None):
    m = match(src, dst, x, source_nodes, target_nodes)
    return AcceptedMatch(m, m.x)


def partition(labeling, scene):
    return sorted(map(sorted, labeling.objects(scene).values()))


def test_config_validation():
    with pytest.raises(ValueError):
        PruneConfig(alpha=0.0)
    with pytest.raises(ValueError):
        PruneConfig(t2=1.5)
    with pytest.raises(ValueError):
        PruneConfig(isolation="sometimes")
    assert PruneConfig().alpha == 0.1 and PruneConfig().t2 == 0.9


def test_cost_gate_accepts_perfect_match():
    assert criterion1_cost_gate(match(0, 1, [(0, 0)], J=0.0), PruneConfig())


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_cost_gate_rejects_all_delete_solution(n):
    g1 = chain(0, n, offset=0)
    g2 = chain(1, 2, offset=n)  # orthogonal features: nothing is worth matching
    res = solve(build_problem(g1, g2))
    assert res.x == ()
    n_total = len(g1) + len(g1.edges)
    assert res.J == 0.1 * n_total
    assert not criterion1_cost_gate(res, PruneConfig())


def test_registration_gate_examples():
    cfg = PruneConfig()
    assert criterion2_registration_gate([PairScore(0, 0, 1.0, 1.0)], cfg) == ((0, 0),)
    assert criterion2_registration_gate([PairScore(0, 0, 0.95, 0.85)], cfg) == ()
    assert criterion2_registration_gate([PairScore(0, 0, 0.85, 0.95)], cfg) == ()
    assert criterion2_registration_gate([PairScore(0, 0, 0.9, 0.9)], cfg) == ((0, 0),)


def test_registration_gate_keeps_rest_of_component():
    scores = [PairScore(0, 0, 1.0, 1.0), PairScore(1, 1, 0.3, 0.2), PairScore(2, 2, 0.99, 0.97)]
    m = match(0, 1, [(0, 0), (1, 1), (2, 2)], scores=scores)
    (a,) = prune_matches([m], PruneConfig())
    assert a.pairs == ((0, 0), (2, 2))


def test_missing_scores_raise():
    m = match(0, 1, [(0, 0)], scores=())
    with pytest.raises(ValueError):
        prune_matches([m], PruneConfig())
    assert prune_matches([m], PruneConfig(), registration_gate=False)


def cup_and_box():
    # scene 1: a cup alone; scenes 2 and 3: the cup touching a box
    isolated = accepted(1, 2, [(0, 0)], source_nodes=(0,), target_nodes=(0, 1))
    grab = accepted(3, 2, [(0, 0), (1, 1)], source_nodes=(0, 1), target_nodes=(0, 1))
    return isolated, grab


@pytest.mark.parametrize("mode", ["literal", "evidence"])
def test_isolation_filter_drops_cup_plus_box(mode):
    isolated, grab = cup_and_box()
    assert criterion3_isolation_filter([isolated, grab], mode) == [isolated]


@pytest.mark.parametrize("mode", ["literal", "evidence", "off"])
def test_isolation_filter_identity_without_isolated_objects(mode):
    ms = [accepted(0, 1, [(0, 0), (1, 1)], source_nodes=(0, 1, 2), target_nodes=(0, 1)),
          accepted(2, 1, [(0, 0)], source_nodes=(0, 1), target_nodes=(0, 1))]
    assert criterion3_isolation_filter(ms, mode) == ms


@pytest.mark.parametrize("mode", ["literal", "evidence"])
def test_isolation_filter_keeps_disjoint_exact_matches(mode):
    a = accepted(0, 2, [(0, 0)], source_nodes=(0,), target_nodes=(0,))
    b = accepted(1, 2, [(0, 3)], source_nodes=(0,), target_nodes=(3,))
    assert criterion3_isolation_filter([a, b], mode) == [a, b]


def test_evidence_mode_keeps_object_whose_fragment_looks_isolated_once():
    # scene 0 lost one part of a two-part object; scenes 1-3 show it whole
    frag = [accepted(0, t, [(0, 0)], source_nodes=(0,), target_nodes=(0, 1)) for t in (1, 2, 3)]
    whole = [accepted(s, t, [(0, 0), (1, 1)], source_nodes=(0, 1), target_nodes=(0, 1))
             for s in (1, 2, 3) for t in (1, 2, 3) if s != t]
    kept = criterion3_isolation_filter(frag + whole, "evidence")
    assert kept == frag + whole
    assert criterion3_isolation_filter(frag + whole, "literal") == frag


def random_scored_matches(seed, n=12):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(1, 4))
        x = [(i, i) for i in range(k)]
        scores = [PairScore(i, i, float(rng.uniform(0.7, 1)), float(rng.uniform(0.7, 1))) for i in range(k)]
        out.append(match(int(rng.integers(0, 3)), 3, x, J=float(rng.uniform(0, 0.6)), n_edges=k - 1, scores=scores))
    return out


@settings(max_examples=60)
@given(seeds, st.floats(0.01, 0.3), st.floats(0.0, 0.2), st.floats(0.5, 1.0), st.floats(0.0, 0.3))
def test_pruning_is_monotone(seed, alpha, d_alpha, t2, d_t2):
    ms = random_scored_matches(seed)
    t2_low = max(t2 - d_t2, 1e-3)

    def survivors(a, t):
        return {(id(m.match), m.pairs) for m in prune_matches(ms, PruneConfig(a, t), isolation_filter=False)}

    base = survivors(alpha, t2)
    assert base <= survivors(alpha + d_alpha, t2)
    looser = {(i, tuple(p for p in pairs)) for i, pairs in survivors(alpha, t2_low)}
    for i, pairs in base:
        assert any(j == i and set(pairs) <= set(q) for j, q in looser)


def three_lamps():
    return [chain(s, 3) for s in range(3)]


def test_no_matches_gives_singletons():
    graphs = three_lamps()
    lab = merge_to_pseudolabels([], graphs)
    assert lab == parts_only_labeling(graphs) or lab.labels == parts_only_labeling(graphs).labels
    assert all(partition(lab, s) == [[0], [1], [2]] for s in range(3))


def test_lamp_merged_only_where_matched():
    graphs = three_lamps()
    lab = merge_to_pseudolabels([accepted(0, 1, [(0, 0), (1, 1), (2, 2)])], graphs)
    assert partition(lab, 0) == [[0, 1, 2]] and partition(lab, 1) == [[0, 1, 2]]
    assert partition(lab, 2) == [[0], [1], [2]]
    # one object keeps one id across scenes
    assert lab.label(0, 0) == lab.label(1, 2)


def test_transitive_merge_across_scenes():
    graphs = three_lamps()
    ms = [accepted(0, 1, [(0, 0), (1, 1)]), accepted(1, 2, [(1, 1), (2, 2)])]
    lab = merge_to_pseudolabels(ms, graphs)
    assert partition(lab, 1) == [[0, 1, 2]]
    assert partition(lab, 0) == [[0, 1], [2]]
    assert partition(lab, 2) == [[0], [1, 2]]


def disconnected_case():
    # scene 0 has nodes 0 and 2 apart; a match wants them as one object
    g0 = SegmentGraph(0, (0, 1, 2), np.eye(3), (1, 1, 1), frozenset({(0, 1)}))
    g1 = SegmentGraph(1, (0, 1), np.eye(3)[[0, 2]], (1, 1), frozenset({(0, 1)}))
    return [g0, g1], [accepted(1, 0, [(0, 0), (1, 2)])]


def test_split_guard_keeps_scenes_connected():
    graphs, ms = disconnected_case()
    lab = merge_to_pseudolabels(ms, graphs, guard="split")
    assert partition(lab, 0) == [[0], [1], [2]]
    assert partition(lab, 1) == [[0, 1]]
    assert lab.conflicts and lab.conflicts[0]["split_scenes"] == [0]


def test_union_guard_rejects_offending_union():
    graphs, ms = disconnected_case()
    lab = merge_to_pseudolabels(ms, graphs, guard="union")
    assert partition(lab, 0) == [[0], [1], [2]]
    assert any("scenes" in c for c in lab.conflicts)
    with pytest.raises(ValueError):
        merge_to_pseudolabels(ms, graphs, guard="nope")


def random_scenes_and_matches(seed):
    rng = np.random.default_rng(seed)
    graphs = []
    for s in range(3):
        n = int(rng.integers(2, 6))
        edges = frozenset((i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4)
        graphs.append(SegmentGraph(s, tuple(range(n)), np.eye(8)[:n], (1,) * n, edges))
    ms = []
    for _ in range(int(rng.integers(0, 6))):
        s, t = rng.choice(3, 2, replace=False)
        ns, nt = len(graphs[s]), len(graphs[t])
        k = int(rng.integers(1, min(ns, nt) + 1))
        src = rng.choice(ns, k, replace=False)
        dst = rng.choice(nt, k, replace=False)
        ms.append(accepted(int(s), int(t), [(int(i), int(j)) for i, j in zip(src, dst)]))
    return graphs, ms


@settings(max_examples=80, deadline=None)
@given(seeds, st.sampled_from(["split", "union"]))
def test_merge_output_is_connected_partition(seed, guard):
    graphs, ms = random_scenes_and_matches(seed)
    lab = merge_to_pseudolabels(ms, graphs, guard=guard)
    for g in graphs:
        assert sorted(lab.labels[g.scene_id]) == list(g.node_ids)
        for segs in lab.objects(g.scene_id).values():
            assert g.is_connected_subset(segs)


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_merge_is_idempotent(seed):
    graphs, ms = random_scenes_and_matches(seed)
    once = merge_to_pseudolabels(ms, graphs)
    twice = merge_to_pseudolabels(ms, graphs, initial=once)
    for g in graphs:
        assert partition(once, g.scene_id) == partition(twice, g.scene_id)


def test_pseudolabel_json_roundtrip(tmp_path):
    lab = merge_to_pseudolabels([accepted(0, 1, [(0, 0), (1, 1), (2, 2)])], three_lamps())
    lab.save(tmp_path / "pl.json")
    back = PseudoLabeling.load(tmp_path / "pl.json")
    assert back.labels == lab.labels
    assert back.provenance == lab.provenance
    d = json.loads((tmp_path / "pl.json").read_text())
    first = d["scenes"][0]
    assert set(first) == {"scene_id", "labels", "provenance"}
    assert {p["kind"] for p in lab.provenance} == {"within", "across"}


def test_zero_noise_pseudolabels_equal_ground_truth():
    from segmatch.pipeline import PipelineConfig, attach_scores, generate, match_stage, prune_merge, train_phi1
    from segmatch.synth import GeneratorConfig

    cfg = PipelineConfig(seed=2, generator=GeneratorConfig(k_objects=3, m_scenes=4))
    ds = generate(cfg)
    ms = attach_scores(match_stage(ds, train_phi1(ds, cfg), cfg), ds, cfg)
    lab = prune_merge(ms, ds, cfg)
    for g, c in zip(ds.graphs, ds.clouds):
        truth = {}
        for s in g.node_ids:
            truth.setdefault(int(c.object_id[c.segment_id == s][0]), []).append(s)
        assert partition(lab, g.scene_id) == sorted(map(sorted, truth.values()))
