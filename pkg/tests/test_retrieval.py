import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from aesnet import dataset as D
from aesnet import network as N
from aesnet import retrieval as R

ORD = D.ORDINAL_CLASSES


def brute_force(embs, ids, q, k):
    scored = []
    for sid, e in zip(ids, embs):
        scored.append((math.sqrt(sum((a - b) ** 2 for a, b in zip(e, q))), sid))
    scored.sort()
    return [(sid, d) for d, sid in scored[:k]]


def test_worked_example():
    idx = R.EmbeddingIndex(2, ["e1", "e2", "e3"], np.array([[0, 0], [1, 0], [0, 2.0]]), ["Good"] * 3)
    got = R.query(idx, [0.9, 0.1], 3)
    assert [g[0] for g in got] == ["e2", "e1", "e3"]
    np.testing.assert_allclose([g[1] for g in got], [math.sqrt(0.02), math.sqrt(0.82), math.sqrt(4.42)])
    np.testing.assert_allclose([g[1] for g in got], [0.1414, 0.9055, 2.1024], atol=5e-5)


def test_self_query_and_ties():
    embs = np.array([[1.0, 1.0], [0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    idx = R.EmbeddingIndex(2, ["d", "a", "b", "c"], embs, ["Fair"] * 4)
    got = R.query(idx, [1.0, 1.0], 2)
    assert got == [("b", 0.0), ("d", 0.0)]
    # equidistant a and c; lexicographic id decides
    got = R.query(idx, [1.0, 1.0], 4)
    assert [g[0] for g in got] == ["b", "d", "a", "c"]


def test_oracle_equivalence_on_1000_entries():
    rng = np.random.default_rng(0)
    for trial in range(5):
        dim = int(rng.integers(1, 20))
        embs = rng.normal(size=(1000, dim))
        embs[rng.integers(0, 1000, 50)] = embs[0]  # force exact ties
        ids = [f"id{i:04d}" for i in rng.permutation(1000)]
        idx = R.EmbeddingIndex(dim, ids, embs, ["Good"] * 1000)
        for _ in range(10):
            q = embs[int(rng.integers(0, 1000))] if rng.uniform() < 0.5 else rng.normal(size=dim)
            k = int(rng.integers(1, 30))
            got = R.query(idx, q, k)
            want = brute_force(embs.tolist(), ids, q.tolist(), k)
            assert [g[0] for g in got] == [w[0] for w in want]
            np.testing.assert_allclose([g[1] for g in got], [w[1] for w in want], rtol=1e-12, atol=1e-12)
            d = [g[1] for g in got]
            assert all(x >= 0 for x in d) and d == sorted(d)


def test_query_errors():
    idx = R.EmbeddingIndex(2, ["a"], np.zeros((1, 2)), ["Good"])
    with pytest.raises(ValueError, match="dimension"):
        R.query(idx, [0, 0, 0], 1)
    with pytest.raises(ValueError):
        R.query(idx, [0, 0], 2)
    with pytest.raises(ValueError, match="duplicate"):
        R.EmbeddingIndex(2, ["a", "a"], np.zeros((2, 2)), ["Good", "Good"])


def _index(labels):
    n = len(labels)
    return R.EmbeddingIndex(1, [f"n{i}" for i in range(n)], np.arange(1, n + 1, dtype=float)[:, None], labels)


def test_adjacency_examples():
    assert R.adjacency_score(_index(["Good"] * 3), [(np.array([0.0]), "Good")]) == 1.0
    assert R.adjacency_score(_index(["Good", "Good", "Fair"]), [(np.array([0.0]), "Excellent")]) == \
        pytest.approx(2 / 3)
    assert R.adjacency_score(_index(["Poor", "Fair", "Fair"]), [(np.array([0.0]), "Poor")]) == 1.0
    with pytest.raises(ValueError, match="label"):
        R.adjacency_score(_index(["Good"] * 3), [(np.array([0.0]), "Great")])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_adjacency_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    idx = R.EmbeddingIndex(3, [f"x{i}" for i in range(20)], rng.normal(size=(20, 3)),
                           [ORD[i] for i in rng.integers(0, 4, 20)])
    queries = [(rng.normal(size=3), ORD[int(rng.integers(0, 4))]) for _ in range(8)]
    a = R.adjacency_score(idx, queries)
    b = R.adjacency_score(idx, [queries[i] for i in rng.permutation(8)])
    assert a == b and 0 <= a <= 1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(0, 12))
def test_index_bytes_round_trip(seed, n):
    rng = np.random.default_rng(seed)
    idx = R.EmbeddingIndex(4, [f"s{i}" for i in range(n)], rng.normal(size=(n, 4)),
                           [ORD[i] for i in rng.integers(0, 4, n)])
    blob = R.to_bytes(idx)
    back = R.from_bytes(blob)
    assert back.ids == idx.ids and back.ordinals == idx.ordinals
    assert np.array_equal(back.embeddings, idx.embeddings)
    assert R.to_bytes(back) == blob


def test_index_bad_magic():
    with pytest.raises(ValueError, match="magic"):
        R.from_bytes(b"NOPE" + bytes(12))


def test_build_index_from_model(tmp_path):
    cfg = N.NetworkConfig(height=32, width=16, channels=(2,), keypoint_widths=(8,), classifier_widths=(6, 1))
    model = N.build(cfg)
    samples = D.generate_synth(D.SynthConfig(count=5, height=32, width=16, seed=1))
    idx = R.build_index(model, samples)
    assert len(idx) == 5 and idx.dim == 6
    assert np.array_equal(R.build_index(model, samples).embeddings, idx.embeddings)
    assert len(R.build_index(model, [])) == 0
    # a sample queried against an index containing it comes back first
    assert R.query(idx, idx.embeddings[3], 1)[0] == (samples[3].id, 0.0)
    R.save_index(idx, tmp_path / "i.aesi")
    assert R.load_index(tmp_path / "i.aesi").ids == idx.ids


def test_render_grid(tmp_path):
    img = np.full((8, 4, 3), 0.5)
    R.render_grid(img, "Good", [(img, "Fair", 0.1)] * 3, tmp_path / "g.png", heatmap=img, scale=2)
    with Image.open(tmp_path / "g.png") as im:
        assert im.size[0] > 5 * 8 and im.mode == "RGB"
