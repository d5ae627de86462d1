import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prom3e import retrieval
from prom3e.config import LossConfig, ModelConfig, SynthConfig
from prom3e.model import ModelParams
from prom3e.retrieval import (
    DELTA_GRID,
    RetrievalConfig,
    evaluate_retrieval,
    hybrid_query,
    rank_gallery,
    recall_at_k,
    true_ranks,
    tune_delta,
)
from prom3e.synthdata import generate


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def test_hybrid_endpoints_and_midpoint():
    rng = np.random.default_rng(0)
    f, g = rng.normal(size=5), rng.normal(size=5)
    assert np.array_equal(hybrid_query(f, g, 0.0), f)
    assert np.array_equal(hybrid_query(f, g, 1.0), g)
    e1, e2 = np.eye(3)[0], np.eye(3)[1]
    np.testing.assert_array_equal(hybrid_query(e1, e2, 0.5), [0.5, 0.5, 0.0])


@given(seed=st.integers(0, 10_000), d=st.floats(0.0, 1.0))
def test_hybrid_is_linear_in_delta(seed, d):
    rng = np.random.default_rng(seed)
    f, g = rng.normal(size=4), rng.normal(size=4)
    for delta in (0.25, d, 0.8):
        np.testing.assert_allclose(hybrid_query(f, g, delta), f + delta * (g - f), rtol=0, atol=1e-14)


def test_hybrid_dim_mismatch():
    with pytest.raises(ValueError):
        hybrid_query(np.ones(3), np.ones(4), 0.3)


def test_config_validation():
    with pytest.raises(ValueError):
        RetrievalConfig(1, 1)
    with pytest.raises(ValueError):
        RetrievalConfig(0, 1, delta=1.5)


def test_delta_grid():
    assert DELTA_GRID[0] == 0.0 and DELTA_GRID[-1] == 1.0 and len(DELTA_GRID) == 21


# ranking -----------------------------------------------------------------------------------------


def test_query_in_gallery_ranks_first():
    g = _unit(np.random.default_rng(1).normal(size=(20, 6)))
    assert rank_gallery(g[7], g)[0] == 7


def test_orthogonal_gallery():
    g = np.eye(5)
    assert rank_gallery(g[3], g)[0] == 3


def test_ties_break_by_index():
    g = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    assert rank_gallery(np.array([1.0, 0.0]), g).tolist() == [0, 2, 1, 3]


def test_empty_gallery():
    with pytest.raises(ValueError):
        rank_gallery(np.ones(3), np.zeros((0, 3)))


@settings(max_examples=30)
@given(seed=st.integers(0, 10_000))
def test_ranking_matches_brute_force_sort(seed):
    rng = np.random.default_rng(seed)
    g = _unit(rng.normal(size=(50, 8)))
    q = rng.normal(size=8)
    scores = [float(np.dot(q / np.linalg.norm(q), row)) for row in g]
    brute = sorted(range(50), key=lambda i: (-scores[i], i))
    assert rank_gallery(q, g).tolist() == brute


@settings(max_examples=30)
@given(seed=st.integers(0, 10_000), c=st.floats(1e-3, 1e3))
def test_ranking_invariant_to_positive_scale(seed, c):
    rng = np.random.default_rng(seed)
    g = _unit(rng.normal(size=(30, 5)))
    q = rng.normal(size=5)
    assert rank_gallery(q, g)[0] == rank_gallery(c * q, g)[0]


@settings(max_examples=30)
@given(seed=st.integers(0, 10_000))
def test_true_ranks_agree_with_sorted_positions(seed):
    rng = np.random.default_rng(seed)
    g = _unit(rng.normal(size=(12, 4)))
    q = rng.normal(size=(12, 4))
    ranks = true_ranks(q, g)
    for i in range(12):
        assert ranks[i] == 1 + rank_gallery(q[i], g).tolist().index(i)


# recall ---------------------------------------------------------------------------------------------


def test_recall_perfect():
    assert recall_at_k(np.ones(10, dtype=int), 1) == 1.0


def test_recall_rejects_bad_k():
    with pytest.raises(ValueError):
        recall_at_k(np.ones(3), 0)


def test_recall_monotone_in_k():
    ranks = np.random.default_rng(2).integers(1, 40, size=100)
    values = [recall_at_k(ranks, k) for k in range(1, 41)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_random_ranking_expectation():
    G, trials = 50, 10_000
    rng = np.random.default_rng(3)
    ranks = np.array([1 + int(np.flatnonzero(rng.permutation(G) == 0)[0]) for _ in range(trials)])
    for k in (1, 5, 10):
        p = k / G
        assert abs(recall_at_k(ranks, k) - p) <= 3 * np.sqrt(p * (1 - p) / trials)


def test_random_baseline_for_large_gallery():
    # expected R@1 of a random ranker over 8,813 items, reported as a percentage to two decimals
    assert round(100 / 8813, 2) == 0.01


def test_shrinking_gallery_never_lowers_recall():
    rng = np.random.default_rng(4)
    g = _unit(rng.normal(size=(40, 6)))
    q = g + 0.8 * rng.normal(size=g.shape)
    full = true_ranks(q, g)
    keep = np.sort(rng.choice(40, 25, replace=False))
    sub = true_ranks(q[keep], g[keep])
    for k in (1, 5, 10):
        assert recall_at_k(sub, k) >= recall_at_k(full[keep], k)


# delta tuning ----------------------------------------------------------------------------------------


def _ds():
    return generate(SynthConfig(modality_count=3, d_in=8, records=60, species=6, seed=2))


def _fresh_model(seed=0):
    cfg = ModelConfig(modality_count=3, d_in=8, encoder_dim=16)
    return ModelParams.init(cfg, LossConfig(), np.random.default_rng(seed))


def test_untrained_model_prefers_raw_query():
    best, table = tune_delta(_fresh_model(), _ds(), RetrievalConfig(2, 1))
    assert best == 0.0
    assert set(table) == set(DELTA_GRID)


def test_perfect_reconstruction_reaches_full_recall(monkeypatch):
    ds = _ds()
    monkeypatch.setattr(retrieval, "reconstruct", lambda params, d, q, t, batch_size=512: d.embeddings[t].copy())
    best, table = tune_delta(None, ds, RetrievalConfig(0, 1))
    # pure inversion is exact; smaller deltas that also reach 1.0 win the tie
    assert table[1.0][0] == 1.0 and table[best][0] == 1.0
    assert all(table[d][0] < 1.0 for d in DELTA_GRID if d < best)


def test_evaluate_retrieval_report():
    res = evaluate_retrieval(_fresh_model(), _ds(), RetrievalConfig(0, 2, delta=0.3))
    assert res.gallery_size == 60 and res.delta == 0.3
    assert res.recall[1] <= res.recall[5] <= res.recall[10]
    assert res.ranks.min() >= 1 and res.ranks.max() <= 60
