import itertools

import numpy as np
import pytest
from hypothesis import strategies as st

from segmatch.types import SegmentGraph, normalize


def random_graph(rng, n, scene_id=0, dim=4, p_edge=0.5, basis=None):
    """Small graph; features drawn near `basis` rows when given so costs straddle the 0.1 gate."""
    if basis is None:
        feats = normalize(rng.standard_normal((n, dim))) if n else np.zeros((0, dim))
    else:
        pick = rng.integers(0, len(basis), n)
        feats = normalize(basis[pick] + rng.uniform(0, 0.6) * rng.standard_normal((n, basis.shape[1]))) if n else np.zeros((0, basis.shape[1]))
    edges = [(a, b) for a, b in itertools.combinations(range(n), 2) if rng.random() < p_edge]
    return SegmentGraph(scene_id, tuple(range(n)), feats, tuple([100] * n), frozenset(edges))


def graph_pair(seed, max_nodes=4, dim=4):
    rng = np.random.default_rng(seed)
    basis = normalize(rng.standard_normal((3, dim)))
    n1 = int(rng.integers(0, max_nodes + 1))
    n2 = int(rng.integers(0, max_nodes + 1))
    return random_graph(rng, n1, 0, dim, rng.uniform(0.2, 0.9), basis), random_graph(rng, n2, 1, dim, rng.uniform(0.2, 0.9), basis)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


seeds = st.integers(min_value=0, max_value=2**32 - 1)
