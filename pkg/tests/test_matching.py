import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import graph_pair, seeds
from oracles import brute_force_match
from segmatch.matching import (
    MatchProblem,
    MatchResult,
    MatchSizeError,
    build_problem,
    constraint_violations,
    full_objective,
    match_all_components,
    reduced_objective,
    solve,
)
from segmatch.types import SegmentGraph, normalize


def graph(scene, feats, edges=(), ids=None):
    feats = normalize(np.atleast_2d(np.asarray(feats, dtype=float)))
    ids = tuple(range(len(feats))) if ids is None else tuple(ids)
    return SegmentGraph(scene, ids, feats, (10,) * len(ids), frozenset(edges))


E = np.eye(4)


def test_node_costs_are_cosine_distances(rng):
    g1 = graph(0, rng.standard_normal((3, 4)))
    g2 = graph(1, rng.standard_normal((4, 4)))
    p = build_problem(g1, g2)
    for a in range(3):
        for b in range(4):
            assert p.node_cost[a, b] == pytest.approx(1 - sum(u * v for u, v in zip(g1.features[a], g2.features[b])), abs=1e-12)


def test_build_problem_costs():
    g = graph(0, E[:3], [(0, 1)])
    p = build_problem(g, g)
    assert np.allclose(np.diag(p.node_cost), 0.0)
    assert p.eps_node == p.eps_edge == 0.1
    assert p.edge_cost == 0.0
    q = build_problem(graph(0, E[:2]), graph(1, E[2:4]))
    assert np.allclose(q.node_cost, 1.0)


def test_problem_rejects_bad_costs():
    g = graph(0, E[:1])
    with pytest.raises(ValueError):
        MatchProblem(g, g, np.array([[np.nan]]))
    with pytest.raises(ValueError):
        MatchProblem(g, g, np.array([[0.0]]), eps_node=-1.0)


def test_single_node_identical():
    g = graph(0, E[:1])
    r = solve(build_problem(g, graph(1, E[:1])))
    assert r.x == ((0, 0),)
    assert r.J == 0.0


def test_single_node_deleted_when_costly():
    src = graph(0, [[1, 0, 0, 0]])
    tgt = graph(1, [[0.8, 0.6, 0, 0], [0, 1, 0, 0]])  # costs 0.2 and 1.0
    r = solve(build_problem(src, tgt))
    assert r.x == ()
    assert r.J == pytest.approx(0.1, abs=1e-15)
    assert r.deleted_nodes == (0,)


def test_edges_earn_credit():
    g = graph(0, E[:3], [(0, 1), (1, 2)])
    r = solve(build_problem(g, graph(1, E[:3], [(0, 1), (1, 2)])))
    assert r.x == ((0, 0), (1, 1), (2, 2))
    assert r.y == (((0, 1), (0, 1)), ((1, 2), (1, 2)))
    assert r.J == 0.0


def test_missing_target_edge_costs_deletion():
    r = solve(build_problem(graph(0, E[:2], [(0, 1)]), graph(1, E[:2])))
    assert r.x == ((0, 0), (1, 1))
    assert r.y == ()
    assert r.J == pytest.approx(0.1)


def test_asymmetry_witness():
    g1 = graph(0, E[:1])
    g2 = graph(1, E[:2])
    assert solve(build_problem(g1, g2)).J == 0.0
    assert solve(build_problem(g2, g1)).J == pytest.approx(0.1)


def test_size_cap():
    rng = np.random.default_rng(0)
    g = graph(0, rng.standard_normal((21, 4)))
    with pytest.raises(MatchSizeError):
        solve(build_problem(g, g))
    solve(build_problem(g.subgraph(range(20)), g.subgraph(range(20))))


def test_tie_break_lexicographic():
    # two equally good targets: the smaller target id wins
    r = solve(build_problem(graph(0, E[:1]), graph(1, [E[0], E[0]])))
    assert r.x == ((0, 0),)


@pytest.mark.parametrize("seed", range(60))
def test_matches_brute_force(seed):
    g1, g2 = graph_pair(seed)
    p = build_problem(g1, g2)
    r = solve(p)
    J, x = brute_force_match(g1, g2, p.node_cost)
    assert r.J == J
    assert r.x == x


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_solution_invariants(seed):
    g1, g2 = graph_pair(seed, max_nodes=5)
    p = build_problem(g1, g2)
    r = solve(p)
    assert constraint_violations(p, r.x, r.y) == []
    assert abs(r.J - reduced_objective(p, r.x, r.y)) <= 1e-9
    assert r.J == full_objective(p, r.x, r.y)
    assert r.J <= 0.1 * (len(g1) + len(g1.edges)) + 1e-12
    assert r.J >= 0.0


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(0.0, 0.5))
def test_raising_deletion_cost_never_lowers_matches(seed, bump):
    # a dearer deletion can only make J larger
    g1, g2 = graph_pair(seed)
    lo = solve(build_problem(g1, g2, 0.1, 0.1)).J
    hi = solve(build_problem(g1, g2, 0.1 + bump, 0.1 + bump)).J
    assert hi >= lo - 1e-12


def test_constraint_checker_flags_bad_solutions():
    g = graph(0, E[:3], [(0, 1)])
    p = build_problem(g, graph(1, E[:3], [(0, 1), (1, 2)]))
    assert constraint_violations(p, ((0, 0), (1, 0)), ())
    assert constraint_violations(p, ((0, 0), (1, 1)), (((0, 1), (1, 2)),))
    assert constraint_violations(p, ((0, 0), (1, 1)), (((0, 1), (0, 1)),)) == []


def test_json_round_trip():
    g = graph(0, E[:3], [(0, 1), (1, 2)])
    r = solve(build_problem(g, graph(1, E[:3], [(0, 1)])))
    d = json.loads(json.dumps(r.to_json()))
    assert {"src_scene", "dst_scene", "x", "y", "J"} <= set(d)
    assert MatchResult.from_json(d) == r


def test_sweep_counts():
    a = graph(0, E[:2], [(0, 1)])
    b = graph(1, E[:2], [(0, 1)])
    res = match_all_components([a, b])
    assert len(res) == 2
    assert [(r.src_scene, r.dst_scene) for r in res] == [(0, 1), (1, 0)]
    assert all(r.J == 0.0 for r in res)

    two = graph(0, E[:2])  # two components
    res = match_all_components([two, graph(1, E[:1]), graph(2, E[1:2])])
    assert len(res) == 2 * 2 + 1 * 3 + 1 * 3
    assert all(r.src_scene != r.dst_scene for r in res)


def test_sweep_survives_failures():
    rng = np.random.default_rng(1)
    big = graph(0, rng.standard_normal((21, 4)), [(i, i + 1) for i in range(20)])
    res = match_all_components([big, big.__class__(1, big.node_ids, big.features, big.point_counts, big.edges), graph(2, E[:1])])
    assert any(r.status == "error" for r in res)
    assert any(r.ok for r in res)
    bad = next(r for r in res if not r.ok)
    assert math.isnan(bad.J)
    assert json.loads(json.dumps(bad.to_json()))["J"] is None


def test_sweep_needs_two_scenes():
    with pytest.raises(ValueError):
        match_all_components([graph(0, E[:1])])


def test_parallel_sweep_matches_serial():
    rng = np.random.default_rng(3)
    gs = [graph(s, rng.standard_normal((4, 4)), [(0, 1), (2, 3)]) for s in range(3)]
    assert match_all_components(gs, workers=2) == match_all_components(gs)
