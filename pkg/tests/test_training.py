import json
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import tiny_config
from sassrec.core import Adagrad, NonFiniteError
from sassrec.losses import ContrastiveConfig, FinetuneConfig
from sassrec.pipeline import build_model, pretrain_pairs, run_experiment, run_finetune, run_pretrain
from sassrec.training import (
    EpochStats,
    FinetuneTriplets,
    PretrainPairs,
    finetune_epoch,
    make_scenario_pairs,
    pretrain_epoch,
    sample_negatives,
)


@pytest.mark.parametrize("k", [1, 2, 3, 4, 10])
def test_pair_counts_are_k_choose_2(k):
    pairs = make_scenario_pairs({7: list(range(k))})
    assert len(pairs) == comb(k, 2)
    assert all(a < b for _, a, b in pairs)
    m = np.zeros((3, 10), dtype=bool)
    m[1, :k] = True
    assert len(make_scenario_pairs(m)) == comb(k, 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_pair_counts_matrix_matches_mapping(seed):
    m = np.random.default_rng(seed).random((20, 5)) < 0.5
    a = make_scenario_pairs(m)
    b = make_scenario_pairs({e: np.nonzero(m[e])[0].tolist() for e in range(20)})
    assert len(a) == sum(comb(int(r.sum()), 2) for r in m)
    assert list(a) == list(b)


def test_pairs_use_entire_space(tiny_data):
    users, items = pretrain_pairs(tiny_data.store)
    assert users.provenance == "entire_space"
    # exposure without a click also makes a user active in a scenario
    train = tiny_data.train
    act = np.zeros((train.n_users, train.n_scenarios), dtype=bool)
    act[train.user, train.scenario] = True
    assert len(users) == sum(comb(int(r.sum()), 2) for r in act)
    clicked_only = np.zeros_like(act)
    clicked_only[train.user[train.clicked], train.scenario[train.clicked]] = True
    assert len(users) > sum(comb(int(r.sum()), 2) for r in clicked_only)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 30), st.integers(1, 5))
def test_negatives_never_equal_positive(seed, n, count):
    rng = np.random.default_rng(seed)
    corpus = rng.choice(1000, size=n, replace=False)
    count = min(count, n - 1)
    pos = rng.choice(corpus, size=40)
    neg = sample_negatives(corpus, pos, count, rng)
    assert neg.shape == (40, count)
    assert not (neg == pos[:, None]).any()
    assert np.isin(neg, corpus).all()
    w = rng.random(n) + 0.01
    negw = sample_negatives(corpus, pos, count, rng, weights=w)
    assert not (negw == pos[:, None]).any()


def test_uniform_negatives_are_uniform():
    rng = np.random.default_rng(0)
    corpus = np.arange(5) * 10
    neg = sample_negatives(corpus, np.full(40000, 20), 1, rng)[:, 0]
    freq = np.array([(neg == c).mean() for c in corpus])
    assert freq[2] == 0
    np.testing.assert_allclose(np.delete(freq, 2), 0.25, atol=0.01)


def test_negative_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_negatives(np.array([1, 2]), np.array([1]), 2, rng)
    assert sample_negatives(np.array([1, 2]), np.array([1]), 0, rng).shape == (1, 0)


def test_pretrain_epoch_reduces_loss(tiny_cfg, tiny_data):
    model = build_model(tiny_cfg, tiny_data.dataset)
    pairs = pretrain_pairs(tiny_data.store)
    opt = Adagrad(0.05)
    rng = np.random.default_rng(0)
    cfg = ContrastiveConfig(0.1, 16)
    first = pretrain_epoch(model, tiny_data.store, pairs, cfg, opt, rng, 0)
    for e in range(1, 4):
        last = pretrain_epoch(model, tiny_data.store, pairs, cfg, opt, rng, e)
    assert last.mean_loss < first.mean_loss
    assert first.n_samples == sum(len(p) for p in pairs)
    assert first.stage == "pretrain"


def test_pretrain_rejects_clicked_only_pairs(tiny_cfg, tiny_data):
    model = build_model(tiny_cfg, tiny_data.dataset)
    users, _ = pretrain_pairs(tiny_data.store)
    bad = PretrainPairs("user", users.entity, users.scenario_i, users.scenario_j, provenance="clicked")
    with pytest.raises(ValueError):
        pretrain_epoch(model, tiny_data.store, [bad], ContrastiveConfig(), Adagrad(0.1), np.random.default_rng(0))


def test_finetune_epoch_reduces_loss(tiny_cfg, tiny_data):
    model = build_model(tiny_cfg, tiny_data.dataset)
    trip = FinetuneTriplets.from_store(tiny_data.store)
    opt = Adagrad(0.05)
    rng = np.random.default_rng(0)
    cfg = FinetuneConfig(1.0, 2, 32)
    stats = [finetune_epoch(model, tiny_data.store, trip, tiny_data.candidates, cfg, opt, rng, e) for e in range(5)]
    assert stats[-1].mean_loss < stats[0].mean_loss
    assert stats[0].n_samples == int(tiny_data.train.clicked.sum())


def test_beta_zero_leaves_global_tower_untouched_by_aux(tiny_cfg, tiny_data):
    # with beta = 0 the global tower is trained only through the gates
    cfg = tiny_config(**{"model__gate": "no_gate", "finetune__beta": 0.0})
    model = build_model(cfg, tiny_data.dataset)
    before = {k: v.copy() for k, v in model.state_dict().items() if ".global" in k}
    trip = FinetuneTriplets.from_store(tiny_data.store)
    finetune_epoch(model, tiny_data.store, trip, tiny_data.candidates, FinetuneConfig(0.0, 1, 32), Adagrad(0.1), np.random.default_rng(0))
    after = model.state_dict()
    for k, v in before.items():
        np.testing.assert_array_equal(after[k], v)


def test_finetune_rejects_unclicked(tiny_cfg, tiny_data):
    model = build_model(tiny_cfg, tiny_data.dataset)
    t = FinetuneTriplets.from_store(tiny_data.store)
    t.clicked = t.clicked.copy()
    t.clicked[0] = False
    with pytest.raises(ValueError):
        finetune_epoch(model, tiny_data.store, t, tiny_data.candidates, FinetuneConfig(), Adagrad(0.1), np.random.default_rng(0))


def test_nonfinite_loss_reports_batch(tiny_cfg, tiny_data):
    model = build_model(tiny_cfg, tiny_data.dataset)
    model.user_tower.towers[0].input_proj.params["weight"][:] = np.nan
    t = FinetuneTriplets.from_store(tiny_data.store)
    with pytest.raises(NonFiniteError, match="batch"):
        finetune_epoch(model, tiny_data.store, t, tiny_data.candidates, FinetuneConfig(1.0, 1, 8), Adagrad(0.1), np.random.default_rng(0))


def test_epoch_stats_json():
    st = EpochStats(2, "finetune", 0.5, 1.25, 3, 100)
    assert json.loads(st.to_json()) == {"epoch": 2, "stage": "finetune", "mean_loss": 0.5, "wall_time": 1.25, "n_batches": 3, "n_samples": 100}


def test_zero_epochs_keeps_initial_weights(tiny_cfg, tiny_data):
    cfg = tiny_config(**{"finetune__epochs": 0, "pretrain__epochs": 0})
    res = run_experiment(cfg, tiny_data)
    init = build_model(cfg, tiny_data.dataset).state_dict()
    for k, v in res.model.state_dict().items():
        np.testing.assert_array_equal(v, init[k])
    assert res.stats == []


def test_run_pretrain_then_finetune_updates_all_towers(tiny_cfg, tiny_data):
    model = build_model(tiny_cfg, tiny_data.dataset)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    stats = run_pretrain(tiny_cfg, model, tiny_data) + run_finetune(tiny_cfg, model, tiny_data)
    assert [s.stage for s in stats] == ["pretrain", "finetune"]
    changed = [k for k, v in model.state_dict().items() if not np.array_equal(v, before[k])]
    assert any("user_tower.scenario3" in k for k in changed)
    assert any("item_tower.global" in k for k in changed)
