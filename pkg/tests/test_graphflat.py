import numpy as np
import pytest
from hypothesis import given, strategies as st

from hoplearn.errors import MalformedGroup, SchemaError, UnknownTarget
from hoplearn.graph_store import EdgeRecord, Graph, GraphFeature, NodeRecord, SyntheticSpec, \
    generate_synthetic, symmetrize
from hoplearn.graphflat import (IN_EDGE, OUT_EDGE, SELF, Partial, ReindexConfig,
                                SamplingStrategy, build_graphfeatures, flat_map, flat_reduce,
                                graphfeature_texts, khop_oracle, khop_oracle_text,
                                select_in_edges)
from hoplearn.mr_engine import ShuffleKey

from conftest import random_graph


def node_ids(gf):
    return set(gf.node_ids)


def edge_set(gf):
    return {(e.src_id, e.dst_id) for e in gf.edges}


def grouped(records):
    out = {}
    for r in sorted(records):
        out.setdefault(r.key, []).append(r.value)
    return out


def self_partial(records, v):
    [rec] = [r for r in records if r.key == ShuffleKey(v) and r.value[:1] == SELF]
    return Partial.decode(rec.value[1:])


def test_flat_map_toy(g_toy):
    groups = grouped(flat_map(g_toy))
    assert sorted(x[:1] for x in groups[ShuffleKey(0)]) == [IN_EDGE, SELF]
    assert sorted(x[:1] for x in groups[ShuffleKey(3)]) == [OUT_EDGE, SELF]
    assert groups[ShuffleKey(0)][0].startswith(IN_EDGE + b"1\t")
    assert groups[ShuffleKey(3)][0].startswith(OUT_EDGE + b"2\t")


def test_flat_map_isolated_and_hub():
    g = Graph([NodeRecord(0)], [])
    assert [r.value[:1] for r in flat_map(g)] == [SELF]
    star = generate_synthetic(SyntheticSpec(101, "star"))
    assert len(grouped(flat_map(star))[ShuffleKey(0)]) == 101


def test_flat_reduce_toy_rounds(g_toy):
    groups = grouped(flat_map(g_toy))
    out1 = flat_reduce(ShuffleKey(1), groups[ShuffleKey(1)])
    p1 = self_partial(out1, 1)
    assert set(p1.nodes) == {1, 2}
    assert (1, 2) in p1.edges  # edge 2 -> 1, keyed (dst, src)
    assert any(r.key == ShuffleKey(0) and r.value[:1] == IN_EDGE for r in out1)
    round1 = [r for key, vals in groups.items() for r in flat_reduce(key, vals)]
    round2 = flat_reduce(ShuffleKey(0), grouped(round1)[ShuffleKey(0)], propagate=False)
    text = self_partial(round2, 0).finalize(0, 2, 1, 0)
    gf = GraphFeature.from_text(text)
    assert node_ids(gf) == {0, 1, 2} and edge_set(gf) == {(1, 0), (2, 1)}


def test_flat_reduce_out_edges_pass_through(g_toy):
    groups = grouped(flat_map(g_toy))
    out = flat_reduce(ShuffleKey(3), groups[ShuffleKey(3)])
    assert [r.value for r in out if r.value[:1] == OUT_EDGE] == \
        [x for x in groups[ShuffleKey(3)] if x[:1] == OUT_EDGE]


def test_flat_reduce_malformed(g_toy):
    groups = grouped(flat_map(g_toy))
    with pytest.raises(MalformedGroup):
        flat_reduce(ShuffleKey(0), [x for x in groups[ShuffleKey(0)] if x[:1] != SELF])
    vals = groups[ShuffleKey(0)]
    with pytest.raises(MalformedGroup):
        flat_reduce(ShuffleKey(0), vals + [x for x in vals if x[:1] == SELF])


def test_star_hub_fanout():
    star = generate_synthetic(SyntheticSpec(101, "star"))
    uniform = SamplingStrategy("uniform", 10, seed=3)
    groups = grouped(flat_map(star, uniform))
    p = self_partial(flat_reduce(ShuffleKey(0), groups[ShuffleKey(0)], uniform), 0)
    assert len(p.nodes) == 11
    gf = build_graphfeatures(star, [0], 1, uniform)[0]
    assert len(gf.nodes) == 11 and len(gf.edges) == 10


def test_build_examples(g_toy):
    gf = build_graphfeatures(g_toy, [0], 0)[0]
    assert node_ids(gf) == {0} and gf.edges == ()
    gf = build_graphfeatures(g_toy, [0], 2)[0]
    assert node_ids(gf) == {0, 1, 2} and edge_set(gf) == {(1, 0), (2, 1)}
    both = build_graphfeatures(g_toy, [0, 2], 1)
    assert node_ids(both[0]) == {0, 1} and node_ids(both[2]) == {2, 3}
    with pytest.raises(UnknownTarget):
        build_graphfeatures(g_toy, [9], 1)


def test_oracle_examples(g_toy):
    gf = khop_oracle(g_toy, 0, 1)
    assert node_ids(gf) == {0, 1} and edge_set(gf) == {(1, 0)}
    gf = khop_oracle(g_toy, 3, 3)
    assert node_ids(gf) == {3} and gf.edges == ()
    gf = khop_oracle(symmetrize(g_toy), 1, 1)
    assert node_ids(gf) == {0, 1, 2}
    assert edge_set(gf) == {(0, 1), (1, 0), (1, 2), (2, 1)}


def test_dense_graph_induces_non_tree_edges():
    # 2 -> 0, 1 -> 0 and 2 -> 1: the last edge joins two distance-1 nodes
    g = Graph([NodeRecord(i) for i in range(3)],
              [EdgeRecord(2, 0), EdgeRecord(1, 0), EdgeRecord(2, 1), EdgeRecord(1, 2)])
    gf = build_graphfeatures(g, [0], 1)[0]
    assert edge_set(gf) == {(1, 0), (2, 0), (2, 1), (1, 2)}


@given(st.integers(0, 2**31 - 1), st.integers(1, 25), st.floats(0.0, 0.35), st.integers(0, 3),
       st.integers(1, 4))
def test_oracle_equivalence(seed, n, p, hops, workers):
    g = random_graph(np.random.default_rng(seed), n, p, fn=2, fe=1)
    texts = graphfeature_texts(g, None, hops, workers=workers)
    assert texts == {v: khop_oracle_text(g, v, hops) for v in g.node_ids}


@given(st.integers(0, 2**31 - 1), st.integers(1, 20), st.integers(1, 3), st.integers(1, 5))
def test_reindex_is_transparent_without_sampling(seed, threshold, hops, suffixes):
    g = random_graph(np.random.default_rng(seed), 25, 0.2, fn=1)
    plain = graphfeature_texts(g, None, hops)
    split = graphfeature_texts(g, None, hops, reindex=ReindexConfig(threshold, suffixes, seed % 7))
    assert split == plain


@given(st.integers(0, 2**31 - 1), st.sampled_from(["uniform", "weighted"]), st.integers(1, 4),
       st.integers(1, 3), st.sampled_from([1, 3, 1000]))
def test_sampling_bound(seed, kind, fanout, hops, threshold):
    g = generate_synthetic(SyntheticSpec(60, "power_law", seed % 1000, weighted=True))
    sampling = SamplingStrategy(kind, fanout, seed)
    gfs = build_graphfeatures(g, None, hops, sampling, ReindexConfig(threshold, 3, seed))
    for v, gf in gfs.items():
        indeg = {}
        for e in gf.edges:
            indeg[e.dst_id] = indeg.get(e.dst_id, 0) + 1
        assert max(indeg.values(), default=0) <= fanout
        assert v in node_ids(gf)
        # sampled neighborhoods never leave the exact one
        exact = khop_oracle(g, v, hops)
        assert node_ids(gf) <= node_ids(exact) and edge_set(gf) <= edge_set(exact)


def test_sampling_is_deterministic_and_seeded():
    g = generate_synthetic(SyntheticSpec(200, "power_law", 4))
    s = SamplingStrategy("uniform", 2, seed=1)
    a = graphfeature_texts(g, None, 2, s, workers=1)
    b = graphfeature_texts(g, None, 2, s, workers=3)
    c = graphfeature_texts(g, None, 2, SamplingStrategy("uniform", 2, seed=2))
    assert a == b and a != c


def test_weighted_sampling_prefers_heavy_edges():
    candidates = list(range(20))
    weights = [50.0 if i < 2 else 1.0 for i in candidates]
    s = SamplingStrategy("weighted", 2, seed=0)
    hits = sum(set(select_in_edges(candidates, weights, 2, s, key)) == {0, 1}
               for key in range(300))
    # both heavy edges win far more often than under uniform sampling (1/190)
    assert hits > 150


@given(st.integers(0, 2**31 - 1), st.integers(0, 2))
def test_hop_monotonicity(seed, hops):
    g = random_graph(np.random.default_rng(seed), 20, 0.15, fn=1)
    a = build_graphfeatures(g, None, hops)
    b = build_graphfeatures(g, None, hops + 1)
    for v in g.node_ids:
        assert node_ids(a[v]) <= node_ids(b[v])


def test_sampling_strategy_parse():
    assert SamplingStrategy.parse("none") == SamplingStrategy()
    assert SamplingStrategy.parse("uniform:10", seed=4) == SamplingStrategy("uniform", 10, 4)
    for bad in ("uniform", "uniform:x", "bogus:3", "weighted:0"):
        with pytest.raises(SchemaError):
            SamplingStrategy.parse(bad)
    with pytest.raises(SchemaError):
        ReindexConfig(threshold=0)
