import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sassrec.retrieval import (
    ItemCorpus,
    RetrievalError,
    RetrievalResult,
    build_item_corpus,
    case_metrics,
    evaluate,
    hr_at_k,
    ndcg_at_k,
    normalize_rows,
    rank_of_truth,
    top_k_indices,
    top_k_retrieve,
)


def _full_sort_oracle(ids, scores, k):
    # independent: python sort on (-score, id) tuples
    return [i for _, i in sorted(zip((-s for s in scores.tolist()), ids.tolist()))][:k]


def _random_corpus(rng, n=1000, dim=8, ties=True):
    ids = rng.choice(10 * n, size=n, replace=False)
    vecs = rng.normal(size=(n, dim))
    if ties:
        dup = rng.choice(n, size=n // 5, replace=False)
        vecs[dup] = vecs[rng.choice(dup, size=len(dup))]
    return ItemCorpus(0, ids, normalize_rows(vecs))


def test_top_k_matches_full_sort_oracle_100_corpora():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        corpus = _random_corpus(rng)
        u = rng.normal(size=8)
        k = int(rng.integers(1, 50))
        res = top_k_retrieve(corpus, u, k)
        scores = corpus.vectors @ (u / np.linalg.norm(u))
        assert res.item_ids.tolist() == _full_sort_oracle(corpus.item_ids, scores, k)
        assert (np.diff(res.scores) <= 0).all()


def test_tie_break_by_ascending_id():
    corpus = ItemCorpus(0, np.array([9, 3, 5, 1]), normalize_rows(np.array([[1.0, 0], [1, 0], [0, 1], [1, 0]])))
    res = top_k_retrieve(corpus, np.array([1.0, 0.0]), 3)
    assert res.item_ids.tolist() == [1, 3, 9]


def test_top_k_indices_stable():
    s = np.array([[0.5, 0.9, 0.5, 0.9]])
    assert top_k_indices(s, 4).tolist() == [[1, 3, 0, 2]]


def test_retrieve_errors():
    corpus = ItemCorpus(0, np.array([1, 2]), np.eye(2))
    with pytest.raises(RetrievalError):
        top_k_retrieve(corpus, np.ones(2), 3)
    with pytest.raises(RetrievalError):
        top_k_retrieve(ItemCorpus(0, np.zeros(0, int), np.zeros((0, 2))), np.ones(2), 1)
    with pytest.raises(RetrievalError):
        top_k_retrieve(corpus, np.zeros(2), 1)
    assert len(top_k_retrieve(corpus, np.ones(2), 2).item_ids) == 2


def _scalar_metrics(results, truth, k):
    hits, gains = [], []
    for key in truth:
        ranked = list(results.get(key, []))
        h, g = 0.0, 0.0
        for pos in range(min(k, len(ranked))):
            if ranked[pos] == truth[key]:
                h, g = 1.0, 1.0 / math.log2(pos + 2)
                break
        hits.append(h)
        gains.append(g)
    return sum(hits) / len(hits), sum(gains) / len(gains)


def test_metrics_match_scalar_reimplementation():
    rng = np.random.default_rng(0)
    for _ in range(100):
        truth = {(u, 0): int(rng.integers(50)) for u in range(30)}
        results = {
            key: rng.permutation(50)[: int(rng.integers(1, 50))] for key in truth if rng.random() > 0.1
        }
        k = int(rng.integers(1, 40))
        hr, nd = _scalar_metrics(results, truth, k)
        assert abs(hr_at_k(results, truth, k) - hr) <= 1e-12
        assert abs(ndcg_at_k(results, truth, k) - nd) <= 1e-12


def test_metric_frozen_values():
    truth = {(1, 0): 7, (2, 0): 4, (3, 0): 9}
    results = {(1, 0): [7, 1, 2], (2, 0): [1, 2, 4], (3, 0): [1, 2, 3]}
    assert hr_at_k(results, truth, 3) == pytest.approx(2 / 3, abs=1e-15)
    assert ndcg_at_k(results, truth, 3) == pytest.approx((1 + 0.5) / 3, abs=1e-15)
    assert hr_at_k(results, truth, 2) == pytest.approx(1 / 3, abs=1e-15)


def test_missing_results():
    truth = {(1, 0): 7, (2, 0): 4}
    results = {(1, 0): RetrievalResult(1, 0, np.array([7]), np.array([1.0]))}
    assert hr_at_k(results, truth, 1) == 0.5
    assert hr_at_k(results, truth, 1, missing="skip") == 1.0
    with pytest.raises(ValueError):
        hr_at_k(results, truth, 1, missing="nope")
    assert case_metrics([3, 4], {4, 3}, 2) == (1.0, 1.0)


def test_random_model_hr_near_k_over_n():
    rng = np.random.default_rng(0)
    n, k, cases = 1000, 20, 5000
    hits = 0
    for _ in range(cases):
        scores = rng.random(n)
        rank = int((scores > scores[int(rng.integers(n))]).sum()) + 1
        hits += rank <= k
    p = k / n
    assert abs(hits / cases - p) <= 3 * math.sqrt(p * (1 - p) / cases)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_rank_of_truth_matches_top_k(seed):
    rng = np.random.default_rng(seed)
    ids = np.sort(rng.choice(500, size=60, replace=False))
    scores = np.round(rng.random((8, 60)), 1)  # plenty of ties
    truth = rng.choice(ids, size=8)
    ranks = rank_of_truth(scores, ids, truth)
    for r in range(8):
        order = ids[top_k_indices(scores[r : r + 1], 60)[0]]
        assert ranks[r] == int(np.nonzero(order == truth[r])[0][0]) + 1
    assert rank_of_truth(scores[:1], ids, np.array([10_000]))[0] == 0


def test_corpus_build_and_save(tmp_path, tiny_model, tiny_data):
    corpus = build_item_corpus(tiny_model, tiny_data.store, [5, 3, 3, 999, 1], 1, checkpoint_id="abc")
    assert corpus.item_ids.tolist() == [1, 3, 5]
    assert corpus.skipped == [(999, "item id outside vocabulary")]
    np.testing.assert_allclose(np.linalg.norm(corpus.vectors, axis=1), 1.0, atol=1e-15)
    corpus.save(tmp_path / "c.bin")
    back = ItemCorpus.load(tmp_path / "c.bin")
    np.testing.assert_array_equal(back.vectors, corpus.vectors)
    assert back.meta == {"checkpoint_id": "abc"} and back.scenario_id == 1
    corpus.save(tmp_path / "d.bin")
    assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "d.bin").read_bytes()


def test_evaluate_matches_explicit_retrieval(tiny_model, tiny_data):
    metrics = evaluate(tiny_model, tiny_data.store, tiny_data.test, tiny_data.candidates, k=5)
    test = tiny_data.test
    for s, m in metrics.items():
        corpus = build_item_corpus(tiny_model, tiny_data.store, tiny_data.candidates[s], s)
        rows = np.nonzero(test.clicked & (test.scenario == s))[0]
        results, truth = {}, {}
        for r in rows:
            e, _ = tiny_model.encode("user", tiny_data.store.user_batch([test.user[r]], [s]))
            results[(int(test.user[r]), s)] = top_k_retrieve(corpus, e[0], 5)
            truth[(int(test.user[r]), s)] = int(test.item[r])
        assert m.n_cases == len(rows)
        if rows.size:
            assert abs(m.hr - hr_at_k(results, truth, 5)) <= 1e-12
            assert abs(m.ndcg - ndcg_at_k(results, truth, 5)) <= 1e-12
