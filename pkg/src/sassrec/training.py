"""Pretraining pairs, fine-tuning triplets, negative sampling and epoch loops."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from itertools import combinations
from typing import Iterator, Mapping, Sequence

import numpy as np

from .core import Adagrad, NonFiniteError
from .dataset import FeatureStore
from .features import SideBatch
from .losses import ContrastiveConfig, FinetuneConfig, nt_xent_batch_loss, pairwise_loss_batch
from .model import SASSModel


@dataclass
class PretrainPairs:
    """Unordered scenario pairs ``(s_i < s_j)`` of one entity, for one side.

    Built from the entire exposure space (clicked and exposed-only records).
    """

    side: str
    entity: np.ndarray
    scenario_i: np.ndarray
    scenario_j: np.ndarray
    provenance: str = "entire_space"

    def __len__(self) -> int:
        return len(self.entity)

    def __iter__(self) -> Iterator[tuple[int, int, int]]:
        return iter(zip(self.entity.tolist(), self.scenario_i.tolist(), self.scenario_j.tolist()))

    def take(self, idx: np.ndarray) -> PretrainPairs:
        return PretrainPairs(self.side, self.entity[idx], self.scenario_i[idx], self.scenario_j[idx], self.provenance)


@dataclass
class FinetuneTriplets:
    """Positive clicks; negatives are drawn per epoch. ``prior`` counts the
    user's earlier clicks in the scenario (the behavior-sequence cutoff)."""

    user: np.ndarray
    scenario: np.ndarray
    positive: np.ndarray
    prior: np.ndarray
    clicked: np.ndarray
    provenance: str = "clicked"

    def __len__(self) -> int:
        return len(self.user)

    @classmethod
    def from_store(cls, store: FeatureStore) -> FinetuneTriplets:
        user, scenario, item, prior = store.clicks()
        return cls(user, scenario, item, prior, np.ones(len(user), dtype=bool))


def make_scenario_pairs(activity: np.ndarray | Mapping[int, Sequence[int]], side: str = "user") -> PretrainPairs:
    """All ``C(k, 2)`` scenario pairs for each entity active in ``k`` scenarios.

    ``activity`` is either a boolean ``(entities, scenarios)`` matrix or a
    mapping from entity id to the scenarios it appears in.
    """
    if isinstance(activity, Mapping):
        ent, si, sj = [], [], []
        for e in sorted(activity):
            for a, b in combinations(sorted(set(activity[e])), 2):
                ent.append(e)
                si.append(a)
                sj.append(b)
        return PretrainPairs(side, np.array(ent, dtype=np.int64), np.array(si, dtype=np.int64), np.array(sj, dtype=np.int64))
    m = np.asarray(activity, dtype=bool)
    ent, si, sj = [], [], []
    for a, b in combinations(range(m.shape[1]), 2):
        e = np.nonzero(m[:, a] & m[:, b])[0]
        ent.append(e)
        si.append(np.full(len(e), a))
        sj.append(np.full(len(e), b))
    if not ent:
        empty = np.zeros(0, dtype=np.int64)
        return PretrainPairs(side, empty, empty, empty)
    ent, si, sj = np.concatenate(ent), np.concatenate(si), np.concatenate(sj)
    order = np.lexsort((sj, si, ent))
    return PretrainPairs(side, ent[order].astype(np.int64), si[order].astype(np.int64), sj[order].astype(np.int64))


def sample_negatives(
    corpus: np.ndarray,
    positives: np.ndarray,
    count: int,
    rng: np.random.Generator,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Draw ``count`` negatives per positive from ``corpus``, never the positive itself.

    Uniform by default; ``weights`` (aligned with ``corpus``) switches to
    weighted sampling, e.g. popularity ** 0.75. Returns ``(len(positives), count)``.
    """
    corpus = np.asarray(corpus)
    positives = np.asarray(positives)
    if count < 0:
        raise ValueError("count must be nonnegative")
    if count > len(corpus) - 1:
        raise ValueError(f"corpus of {len(corpus)} items cannot supply {count} negatives per positive")
    if count == 0:
        return np.zeros((len(positives), 0), dtype=corpus.dtype)
    n = len(corpus)
    if weights is None:
        # draw from the n-1 non-positive slots, then shift past the positive's slot
        sorter = np.argsort(corpus)
        pos_slot = sorter[np.searchsorted(corpus, positives, sorter=sorter).clip(0, n - 1)]
        in_corpus = corpus[pos_slot] == positives
        r = rng.integers(0, np.where(in_corpus, n - 1, n)[:, None], size=(len(positives), count))
        r = np.where(in_corpus[:, None] & (r >= pos_slot[:, None]), r + 1, r)
        return corpus[r]
    p = np.asarray(weights, dtype=np.float64)
    p = p / p.sum()
    out = rng.choice(corpus, size=(len(positives), count), p=p)
    bad = out == positives[:, None]
    while bad.any():
        out[bad] = rng.choice(corpus, size=int(bad.sum()), p=p)
        bad = out == positives[:, None]
    return out


@dataclass
class EpochStats:
    epoch: int
    stage: str
    mean_loss: float
    wall_time: float
    n_batches: int
    n_samples: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def item_features(store: FeatureStore, model: SASSModel, items, scenarios) -> SideBatch:
    return store.item_batch(items, scenarios, scenario_agnostic=model.config.single_item_embedding)


def _side_features(store: FeatureStore, model: SASSModel, side: str, entities, scenarios) -> SideBatch:
    if side == "user":
        return store.user_batch(entities, scenarios)
    return item_features(store, model, entities, scenarios)


def pretrain_epoch(
    model: SASSModel,
    store: FeatureStore,
    pairs: Sequence[PretrainPairs],
    cfg: ContrastiveConfig,
    optimizer: Adagrad,
    rng: np.random.Generator,
    epoch: int = 0,
) -> EpochStats:
    """One pass of contrastive pretraining.

    Each side's pairs are shuffled and cut into batches of ``cfg.batch_size``;
    batches alternate between sides. For a batch of N pairs the side's towers
    encode both scenario views (2N rows) and the NT-Xent sum is minimised.
    """
    t0 = time.perf_counter()
    queues = []
    for p in pairs:
        if len(p) == 0:
            continue
        if p.provenance != "entire_space":
            raise ValueError("pretraining pairs must come from the entire exposure space")
        order = rng.permutation(len(p))
        queues.append([p.take(order[i : i + cfg.batch_size]) for i in range(0, len(p), cfg.batch_size)])
    schedule = []
    for k in range(max((len(q) for q in queues), default=0)):
        schedule.extend(q[k] for q in queues if k < len(q))
    total, n_pairs = 0.0, 0
    for b, batch in enumerate(schedule):
        ents = np.concatenate([batch.entity, batch.entity])
        scen = np.concatenate([batch.scenario_i, batch.scenario_j])
        feats = _side_features(store, model, batch.side, ents, scen)
        model.zero_grad()
        e, _ = model.encode(batch.side, feats)
        loss, dz = nt_xent_batch_loss(e, cfg.temperature, cfg.symmetric)
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite pretraining loss in epoch {epoch}, batch {b} ({batch.side} side)")
        model.backward(batch.side, dz)
        optimizer.step(model)
        total += loss
        n_pairs += len(batch)
    return EpochStats(epoch, "pretrain", total / max(n_pairs, 1), time.perf_counter() - t0, len(schedule), n_pairs)


def finetune_epoch(
    model: SASSModel,
    store: FeatureStore,
    triplets: FinetuneTriplets,
    candidates: Sequence[np.ndarray],
    cfg: FinetuneConfig,
    optimizer: Adagrad,
    rng: np.random.Generator,
    epoch: int = 0,
    negative_weights: Sequence[np.ndarray] | None = None,
) -> EpochStats:
    """One pass over the clicked triplets.

    Loss per batch is ``L_scenario + beta * L_auxiliary``, both pairwise
    losses; the auxiliary term uses the global tower outputs and is skipped
    entirely when ``beta == 0``.
    """
    t0 = time.perf_counter()
    if not triplets.clicked.all():
        raise ValueError("fine-tuning triplets must be clicked interactions")
    if len(triplets) and (triplets.scenario.min() < 0 or triplets.scenario.max() >= len(candidates)):
        raise KeyError("triplet references an unknown scenario")
    m = cfg.negatives_per_positive
    negatives = np.zeros((len(triplets), m), dtype=np.int64)
    for s in range(len(candidates)):
        idx = np.nonzero(triplets.scenario == s)[0]
        if len(idx):
            w = None if negative_weights is None else negative_weights[s]
            negatives[idx] = sample_negatives(candidates[s], triplets.positive[idx], m, rng, w)
    order = rng.permutation(len(triplets))
    total, n_batches = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        B = len(idx)
        users = store.user_batch(triplets.user[idx], triplets.scenario[idx], prefix=triplets.prior[idx])
        neg = negatives[idx]
        items = np.concatenate([triplets.positive[idx], neg.T.ravel()])
        scen = np.tile(triplets.scenario[idx], 1 + m)
        item_batch = item_features(store, model, items, scen)
        model.zero_grad()
        e_u, g_u = model.encode("user", users)
        e_i, g_i = model.encode("item", item_batch)
        neg_e = e_i[B:].reshape(m, B, -1).transpose(1, 0, 2)
        l_scn, du, dp, dn = pairwise_loss_batch(e_u, e_i[:B], neg_e if m > 1 else neg_e[:, 0])
        de_i = np.concatenate([dp, (dn if m > 1 else dn[:, None]).transpose(1, 0, 2).reshape(m * B, -1)])
        dg_u = dg_i = None
        loss = l_scn
        if cfg.beta > 0:
            neg_g = g_i[B:].reshape(m, B, -1).transpose(1, 0, 2)
            l_aux, gu, gp, gn = pairwise_loss_batch(g_u, g_i[:B], neg_g if m > 1 else neg_g[:, 0])
            loss = l_scn + cfg.beta * l_aux
            dg_u = cfg.beta * gu
            dg_i = cfg.beta * np.concatenate([gp, (gn if m > 1 else gn[:, None]).transpose(1, 0, 2).reshape(m * B, -1)])
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite fine-tuning loss in epoch {epoch}, batch {n_batches}")
        model.backward("user", du, dg_u)
        model.backward("item", de_i, dg_i)
        optimizer.step(model)
        total += loss * B
        n_batches += 1
    return EpochStats(epoch, "finetune", total / max(len(triplets), 1), time.perf_counter() - t0, n_batches, len(triplets))
