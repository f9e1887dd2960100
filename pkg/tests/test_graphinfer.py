import numpy as np
import pytest
from hypothesis import given, strategies as st

from hoplearn.errors import CheckpointError, ShapeError
from hoplearn.graph_store import Graph, NodeRecord
from hoplearn.graphflat import ReindexConfig, SamplingStrategy
from hoplearn.gnn import GNNModel, ModelConfig, full_graph_batch
from hoplearn.graphinfer import naive_oracle, reassemble, run_inference, segment_model

from conftest import clique, random_graph


def model_text(kind, dims, classes=3, seed=0, **kw):
    heads = kw.pop("heads", 2 if kind == "GAT" else 1)
    return GNNModel.init(ModelConfig(kind, dims, classes, heads=heads, **kw), seed).to_text()


def infer(g, ckpt, **kw):
    return run_inference(g, segment_model(ckpt), **kw)


def assert_scores_close(a, b, tol=1e-5):
    assert sorted(a) == sorted(b)
    for v in a:
        np.testing.assert_allclose(a[v], b[v], atol=tol, rtol=0)


# -- segmentation --------------------------------------------------------------------

def test_k2_gcn_gives_three_slices():
    slices = segment_model(model_text("GCN", (3, 4, 4)))
    assert [s.index for s in slices] == [0, 1, 2]
    assert [s.is_head for s in slices] == [False, False, True]


def test_k1_gat_slice0_holds_attention():
    slices = segment_model(model_text("GAT", (3, 4)))
    assert len(slices) == 2
    names = [line.split()[1] for line in slices[0].text.splitlines() if line.startswith("T ")]
    assert names == ["layer0.W", "layer0.b", "layer0.att_src", "layer0.att_dst"]
    p = slices[0].params()
    assert p.heads == 2 and p.att_src.shape == (2, 2)


@pytest.mark.parametrize("kind", ["GCN", "SAGE", "GAT"])
def test_reassemble_is_byte_identical(kind):
    text = model_text(kind, (5, 4, 6, 2), seed=9)
    assert reassemble(segment_model(text)) == text


def test_corrupt_checkpoint():
    text = model_text("GCN", (3, 4))
    for bad in ("", "garbage\n", text.replace("layer0.b", "layer9.b"), text[: len(text) // 2]):
        with pytest.raises(CheckpointError):
            segment_model(bad)


# -- hand trace and counters ---------------------------------------------------------

def identity_k1(kind="GCN"):
    m = GNNModel.init(ModelConfig(kind, (1, 1), 1, activation="linear", multilabel=True,
                                  dtype="float64"), 0)
    params = {k: np.ones_like(v) if k.endswith(".W") else np.zeros_like(v)
              for k, v in m.params().items()}
    m.set_params(params)
    return m.to_text()


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def test_toy_identity_gcn_hand_trace(g_toy):
    res = infer(g_toy, identity_k1())
    # in-weights 1,1,1,0; self 1/(1+D_v), edge 1/sqrt((1+D_v)(1+D_u))
    expected = {0: 1 / 2 + 2 / 2, 1: 2 / 2 + 3 / 2, 2: 3 / 2 + 4 / np.sqrt(2), 3: 4.0}
    for v, h in expected.items():
        assert res.scores[v][0] == pytest.approx(sigmoid(h), abs=1e-12)
    assert res.counter.embedding_evals == 4 * 2
    assert res.counter.aggregation_ops == (3 + 4) * 1


def test_evals_are_v_times_k_plus_1():
    g = random_graph(np.random.default_rng(0), 25, 0.1, fn=3)
    for K in (1, 2, 3):
        res = infer(g, model_text("SAGE", (3,) + (4,) * K))
        assert res.counter.embedding_evals == 25 * (K + 1)
        assert len(res.scores) == 25


def test_toy_naive_recomputes(g_toy):
    ckpt = model_text("GCN", (1, 2, 2), classes=2)
    pipe = infer(g_toy, ckpt)
    naive = naive_oracle(g_toy, ckpt)
    assert_scores_close(pipe.scores, naive.scores)
    assert pipe.counter.embedding_evals == 12
    assert naive.counter.embedding_evals > pipe.counter.embedding_evals


def test_clique_counters():
    g = clique(30, fn=4)
    ckpt = model_text("GCN", (4, 4, 4))
    pipe = infer(g, ckpt)
    naive = naive_oracle(g, ckpt)
    # (870 edges + 30 self terms) * width 4 for each of the two layers
    assert pipe.counter.aggregation_ops == 7200 and pipe.counter.embedding_evals == 90
    # per target: layer 0 over the whole clique; layer 1 keeps the 29 edges into the
    # target but the dense self term still runs over all 30 rows
    assert naive.counter.aggregation_ops == 30 * ((870 + 30) * 4 + (29 + 30) * 4) == 115080
    assert naive.counter.embedding_evals == 1830
    assert naive.counter.aggregation_ops / pipe.counter.aggregation_ops >= 5


def test_isolated_node():
    g = Graph([NodeRecord(0, [0.5, -1.0])], [], 2, 0)
    ckpt = model_text("GAT", (2, 4, 4), classes=2)
    m = GNNModel.from_text(ckpt)
    expected = m.predict(full_graph_batch(g, 2))[0]
    np.testing.assert_allclose(infer(g, ckpt).scores[0], expected, atol=1e-6)
    np.testing.assert_allclose(naive_oracle(g, ckpt).scores[0], expected, atol=1e-6)


# -- equivalence ---------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["GCN", "SAGE", "GAT"])
def test_50_node_equivalence(kind):
    g = random_graph(np.random.default_rng(1), 50, 0.05, fn=4)
    for K in (1, 2, 3):
        ckpt = model_text(kind, (4,) + (6,) * K, seed=K)
        pipe = infer(g, ckpt, workers=2)
        naive = naive_oracle(g, ckpt)
        assert_scores_close(pipe.scores, naive.scores)
        full = GNNModel.from_text(ckpt).predict(full_graph_batch(g, K))
        assert_scores_close(pipe.scores, {v: full[v] for v in g.node_ids})
        assert naive.counter.embedding_evals >= pipe.counter.embedding_evals == 50 * (K + 1)


@given(st.integers(0, 2**31 - 1), st.sampled_from(["GCN", "SAGE", "GAT"]), st.integers(1, 3))
def test_equivalence_property(seed, kind, K):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(1, 15)), 0.2, fn=2)
    ckpt = model_text(kind, (2,) + (4,) * K, seed=seed % 1000)
    assert_scores_close(infer(g, ckpt).scores, naive_oracle(g, ckpt).scores)


def test_target_subset_matches_full_run():
    g = random_graph(np.random.default_rng(2), 60, 0.04, fn=3)
    ckpt = model_text("GCN", (3, 4, 4))
    full = infer(g, ckpt)
    sub = infer(g, ckpt, targets=[3, 17, 40])
    assert sorted(sub.scores) == [3, 17, 40]
    assert_scores_close(sub.scores, {v: full.scores[v] for v in (3, 17, 40)}, tol=1e-7)
    assert sub.counter.embedding_evals <= full.counter.embedding_evals


def test_sampling_matches_graphflat_preprocessing():
    g = random_graph(np.random.default_rng(3), 40, 0.3, fn=3)
    ckpt = model_text("SAGE", (3, 4, 4))
    sampling = SamplingStrategy.parse("uniform:3", seed=11)
    pipe = infer(g, ckpt, sampling=sampling)
    naive = naive_oracle(g, ckpt, sampling=sampling)
    assert_scores_close(pipe.scores, naive.scores)
    assert_scores_close(infer(g, ckpt, sampling=sampling, reindex=ReindexConfig(threshold=5)).scores,
                        naive_oracle(g, ckpt, sampling=sampling,
                                     reindex=ReindexConfig(threshold=5)).scores)


def test_runs_are_byte_identical():
    g = random_graph(np.random.default_rng(4), 30, 0.1, fn=2)
    ckpt = model_text("GAT", (2, 4, 4))
    a = infer(g, ckpt, workers=1).to_text()
    b = infer(g, ckpt, workers=3).to_text()
    assert a == b
    lines = a.splitlines()
    assert [int(l.split("\t")[0]) for l in lines] == list(range(30))


def test_dim_mismatch():
    g = random_graph(np.random.default_rng(5), 5, 0.3, fn=2)
    with pytest.raises(ShapeError):
        infer(g, model_text("GCN", (3, 4)))
    slices = segment_model(model_text("GCN", (2, 4, 4)))
    with pytest.raises(ShapeError):
        run_inference(g, slices[:2])
