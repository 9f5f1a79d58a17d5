"""Error-tolerant minimum-cost subgraph matching as a binary linear program.

Variables: x[i,k] maps source node i to target node k, y[ij,kl] maps source edge ij
to target edge kl. Deleting a node or edge costs eps_node / eps_edge. With the
deletion variables eliminated the objective reads

    J = sum_x (c(i->k) - eps_node) + sum_y (c(ij->kl) - eps_edge)
        + eps_node * |V1| + eps_edge * |E1|

subject to: x injective in both directions, y[ij,kl] <= (x[i,k] + x[j,k]) summed
over the edges kl at each target node k, all variables binary.

Because every y variable only appears in the rows of its own source edge, the
best y for a fixed x is separable: edge ij is mapped exactly when both ends are
mapped onto the endpoints of a target edge and mapping it is a credit. The search
over x is an exact depth-first branch-and-bound.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .types import SegmentGraph, cosine_distance_matrix, weakly_connected_components

DEFAULT_EPS = 0.1
DEFAULT_SIZE_CAP = 400


class MatchSizeError(ValueError):
    pass


class MatchTimeout(RuntimeError):
    pass


@dataclass(frozen=True)
class MatchProblem:
    source: SegmentGraph
    target: SegmentGraph
    node_cost: np.ndarray
    eps_node: float = DEFAULT_EPS
    eps_edge: float = DEFAULT_EPS
    edge_cost: float = 0.0

    def __post_init__(self):
        C = np.array(self.node_cost, dtype=np.float64).reshape(len(self.source), len(self.target))
        costs = [self.eps_node, self.eps_edge, self.edge_cost]
        if not (np.all(np.isfinite(C)) and all(math.isfinite(c) for c in costs)):
            raise ValueError("non-finite matching costs")
        if np.any(C < 0) or min(costs) < 0:
            raise ValueError("matching costs must be >= 0")
        C.flags.writeable = False
        object.__setattr__(self, "node_cost", C)

    def cost(self, i: int, k: int) -> float:
        return float(self.node_cost[self.source.index(i), self.target.index(k)])


@dataclass(frozen=True)
class MatchResult:
    src_scene: int
    dst_scene: int
    source_nodes: tuple[int, ...]
    target_nodes: tuple[int, ...]
    n_source_edges: int
    x: tuple[tuple[int, int], ...]
    y: tuple[tuple[tuple[int, int], tuple[int, int]], ...]
    J: float
    status: str = "ok"
    message: str = ""
    scores: tuple = field(default=(), compare=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def deleted_nodes(self) -> tuple[int, ...]:
        """Source nodes with alpha_i = 1."""
        matched = {i for i, _ in self.x}
        return tuple(i for i in self.source_nodes if i not in matched)

    @property
    def matched_targets(self) -> frozenset[int]:
        return frozenset(k for _, k in self.x)

    def to_json(self) -> dict:
        d = {
            "src_scene": self.src_scene,
            "dst_scene": self.dst_scene,
            "source_nodes": list(self.source_nodes),
            "target_nodes": list(self.target_nodes),
            "n_source_edges": self.n_source_edges,
            "x": [list(p) for p in self.x],
            "y": [[list(a), list(b)] for a, b in self.y],
            "J": self.J if math.isfinite(self.J) else None,
            "status": self.status,
        }
        if self.message:
            d["message"] = self.message
        if self.scores:
            d["scores"] = [s.to_json() for s in self.scores]
        return d

    @classmethod
    def from_json(cls, d: dict) -> MatchResult:
        from .registration import PairScore

        return cls(
            int(d["src_scene"]),
            int(d["dst_scene"]),
            tuple(d["source_nodes"]),
            tuple(d["target_nodes"]),
            int(d["n_source_edges"]),
            tuple((int(i), int(k)) for i, k in d["x"]),
            tuple(((int(a[0]), int(a[1])), (int(b[0]), int(b[1]))) for a, b in d["y"]),
            math.nan if d["J"] is None else float(d["J"]),
            d.get("status", "ok"),
            d.get("message", ""),
            tuple(PairScore.from_json(s) for s in d.get("scores", [])),
        )


def build_problem(g1: SegmentGraph, g2: SegmentGraph, eps_node: float = DEFAULT_EPS, eps_edge: float = DEFAULT_EPS) -> MatchProblem:
    """Node costs are cosine distances between node features; edge substitution is free."""
    return MatchProblem(g1, g2, cosine_distance_matrix(g1.features, g2.features), eps_node, eps_edge, 0.0)


def optimal_edges(p: MatchProblem, x) -> tuple[tuple[tuple[int, int], tuple[int, int]], ...]:
    """Best y for a fixed node mapping."""
    if p.edge_cost - p.eps_edge >= 0:
        return ()
    pi = dict(x)
    tgt_edges = p.target.edges
    y = []
    for a, b in p.source.sorted_edges:
        if a in pi and b in pi:
            k, l = pi[a], pi[b]
            if (min(k, l), max(k, l)) in tgt_edges:
                y.append(((a, b), (k, l)))
    return tuple(y)


def reduced_objective(p: MatchProblem, x, y) -> float:
    """Deletion variables eliminated; equals full_objective up to rounding."""
    terms = [p.cost(i, k) - p.eps_node for i, k in x]
    terms += [p.edge_cost - p.eps_edge for _ in y]
    terms += [p.eps_node] * len(p.source) + [p.eps_edge] * len(p.source.edges)
    return math.fsum(terms)


def full_objective(p: MatchProblem, x, y) -> float:
    """Objective with explicit deletion variables alpha = 1 - sum_k x, beta = 1 - sum_kl y.

    Summed with fsum over unrounded terms, so it is the canonical J reported by solve.
    """
    xs = {i: 0 for i in p.source.node_ids}
    for i, _ in x:
        xs[i] += 1
    ys = {e: 0 for e in p.source.edges}
    for e, _ in y:
        ys[(min(e), max(e))] += 1
    terms = [p.cost(i, k) for i, k in x]
    terms += [(1 - xs[i]) * p.eps_node for i in p.source.node_ids]
    terms += [p.edge_cost for _ in y]
    terms += [(1 - ys[e]) * p.eps_edge for e in p.source.sorted_edges]
    return math.fsum(terms)


def constraint_violations(p: MatchProblem, x, y) -> list[str]:
    """Violated constraints (injectivity and the combined edge constraint); empty if feasible."""
    bad = []
    src = [i for i, _ in x]
    dst = [k for _, k in x]
    if len(set(src)) != len(src):
        bad.append("source node mapped twice")
    if len(set(dst)) != len(dst):
        bad.append("target node used twice")
    xset = set(x)
    by_edge: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for (a, b), kl in y:
        if (min(a, b), max(a, b)) not in p.source.edges:
            bad.append(f"y uses non-edge {(a, b)}")
        if (min(kl), max(kl)) not in p.target.edges:
            bad.append(f"y uses non-target-edge {kl}")
        by_edge.setdefault((a, b), []).append(kl)
    for (a, b), kls in by_edge.items():
        for k in p.target.node_ids:
            lhs = sum(1 for kl in kls if k in kl)
            rhs = ((a, k) in xset) + ((b, k) in xset)
            if lhs > rhs:
                bad.append(f"edge {(a, b)} violates the combined constraint at target node {k}")
    return bad


def solve(p: MatchProblem, size_cap: int = DEFAULT_SIZE_CAP, timeout: float | None = None) -> MatchResult:
    """Global minimiser of J; ties go to the lexicographically smallest sorted x."""
    n1, n2 = len(p.source), len(p.target)
    if n1 * n2 > size_cap:
        raise MatchSizeError(f"{n1}x{n2} node pairs exceed the size cap of {size_cap}")
    src_ids, dst_ids = p.source.node_ids, p.target.node_ids
    C = p.node_cost
    credit = min(0.0, p.edge_cost - p.eps_edge)

    sidx = {v: n for n, v in enumerate(src_ids)}
    tidx = {v: n for n, v in enumerate(dst_ids)}
    adj1 = [set() for _ in range(n1)]
    for a, b in p.source.edges:
        adj1[sidx[a]].add(sidx[b])
        adj1[sidx[b]].add(sidx[a])
    A2 = np.zeros((n2, n2), dtype=bool)
    for a, b in p.target.edges:
        A2[tidx[a], tidx[b]] = A2[tidx[b], tidx[a]] = True
    deg2 = A2.sum(axis=1)

    order = sorted(range(n1), key=lambda i: (-len(adj1[i]), i))
    rank = {i: r for r, i in enumerate(order)}
    earlier = [[j for j in adj1[i] if rank[j] < rank[i]] for i in order]
    n_earlier = np.array([len(e) for e in earlier], dtype=np.float64)
    # optimistic per-row delta: edge credits attributed to the later endpoint
    base = C[order] - p.eps_node + credit * np.minimum(deg2[None, :], n_earlier[:, None]) if n1 else np.zeros((0, n2))

    assign = [-1] * n1
    used = np.zeros(n2, dtype=bool)
    best = {"J": math.inf, "x": None}
    deadline = None if timeout is None else time.perf_counter() + timeout
    visits = [0]
    tol = 1e-12

    def bound(r: int) -> float:
        if r >= n1 or used.all():
            return 0.0
        sub = base[r:][:, ~used]
        return float(np.minimum(sub.min(axis=1), 0.0).sum())

    def leaf():
        x = tuple(sorted((src_ids[i], dst_ids[k]) for i, k in enumerate(assign) if k >= 0))
        J = full_objective(p, x, optimal_edges(p, x))
        if (J, x) < (best["J"], best["x"] if best["x"] is not None else ((math.inf, math.inf),)):
            best["J"], best["x"] = J, x

    def rec(r: int, partial: float):
        visits[0] += 1
        if deadline is not None and visits[0] % 256 == 0 and time.perf_counter() > deadline:
            raise MatchTimeout(f"solve exceeded {timeout}s")
        if partial + bound(r) > best["J"] - const + tol:
            return
        if r == n1:
            leaf()
            return
        i = order[r]
        options = []
        for k in np.flatnonzero(~used):
            d = C[i, k] - p.eps_node
            if credit:
                d += credit * sum(1 for j in earlier[r] if assign[j] >= 0 and A2[assign[j], k])
            options.append((d, int(k)))
        options.append((0.0, -1))
        options.sort()
        for d, k in options:
            if k >= 0:
                assign[i] = k
                used[k] = True
                rec(r + 1, partial + d)
                used[k] = False
                assign[i] = -1
            else:
                rec(r + 1, partial)

    const = p.eps_node * n1 + p.eps_edge * len(p.source.edges)
    rec(0, 0.0)
    x = best["x"]
    return MatchResult(
        p.source.scene_id,
        p.target.scene_id,
        tuple(src_ids),
        tuple(dst_ids),
        len(p.source.edges),
        x,
        optimal_edges(p, x),
        best["J"],
    )


def components(g: SegmentGraph) -> list[SegmentGraph]:
    return [g.subgraph(c) for c in weakly_connected_components(g)]


def _solve_task(args):
    problem, size_cap, timeout = args
    t0 = time.perf_counter()
    try:
        res = solve(problem, size_cap, timeout)
    except (MatchSizeError, MatchTimeout, ValueError) as exc:
        status = "timeout" if isinstance(exc, MatchTimeout) else "error"
        res = MatchResult(
            problem.source.scene_id,
            problem.target.scene_id,
            problem.source.node_ids,
            problem.target.node_ids,
            len(problem.source.edges),
            (),
            (),
            math.nan,
            status,
            str(exc),
        )
    return res, time.perf_counter() - t0


def component_pairs(scenes: list[SegmentGraph]):
    """Ordered (source component, target component) pairs across distinct scenes."""
    comps = [(g.scene_id, components(g)) for g in scenes]
    for s, src_comps in comps:
        for c1 in src_comps:
            for t, dst_comps in comps:
                if t == s:
                    continue
                for c2 in dst_comps:
                    yield c1, c2


def match_all_components(scenes: list[SegmentGraph], eps_node: float = DEFAULT_EPS, eps_edge: float = DEFAULT_EPS,
                         size_cap: int = DEFAULT_SIZE_CAP, timeout: float | None = 10.0, workers: int = 1,
                         timings: list | None = None) -> list[MatchResult]:
    """Solve every ordered component pair; failed pairs come back with a non-ok status."""
    if len(scenes) < 2:
        raise ValueError("need at least two scenes")
    tasks = [(build_problem(c1, c2, eps_node, eps_edge), size_cap, timeout) for c1, c2 in component_pairs(scenes)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_solve_task, tasks, chunksize=8))
    else:
        out = [_solve_task(t) for t in tasks]
    if timings is not None:
        timings.extend(dt for _, dt in out)
    return [r for r, _ in out]
