"""Item corpora, exact top-K retrieval and HR@K / NDCG@K."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .checkpoint import read_container, write_container
from .dataset import Dataset, FeatureStore
from .model import SASSModel
from .training import item_features


class RetrievalError(ValueError):
    pass


@dataclass
class ItemCorpus:
    """Frozen, L2-normalised item vectors for one scenario, sorted by item id."""

    scenario_id: int
    item_ids: np.ndarray
    vectors: np.ndarray
    meta: dict = field(default_factory=dict)
    skipped: list[tuple[int, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.item_ids)

    def save(self, path: str | Path) -> None:
        write_container(
            path,
            "corpus",
            {"item_ids": self.item_ids, "vectors": self.vectors},
            {"corpus": {"scenario_id": self.scenario_id, **self.meta}},
        )

    @classmethod
    def load(cls, path: str | Path) -> ItemCorpus:
        head, t = read_container(path, "corpus")
        meta = dict(head["corpus"])
        sid = meta.pop("scenario_id")
        return cls(sid, t["item_ids"], t["vectors"], meta)


@dataclass
class RetrievalResult:
    user_id: int
    scenario_id: int
    item_ids: np.ndarray
    scores: np.ndarray


def normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


def build_item_corpus(
    model: SASSModel,
    store: FeatureStore,
    items: Iterable[int],
    scenario_id: int,
    checkpoint_id: str = "",
    batch_size: int = 4096,
) -> ItemCorpus:
    """Encode ``items`` with the item side's tower for ``scenario_id``.

    Items outside the vocabulary are skipped and listed in ``skipped``.
    """
    items = np.unique(np.asarray(list(items), dtype=np.int64))
    n_vocab = model.embeddings.vocab_size("item_id")
    ok = (items >= 0) & (items < n_vocab)
    skipped = [(int(i), "item id outside vocabulary") for i in items[~ok]]
    items = items[ok]
    vecs = []
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        e, _ = model.encode("item", item_features(store, model, chunk, np.full(len(chunk), scenario_id)))
        vecs.append(e)
    dim = model.config.hidden
    vectors = normalize_rows(np.concatenate(vecs)) if vecs else np.zeros((0, dim))
    return ItemCorpus(scenario_id, items, vectors, {"checkpoint_id": checkpoint_id}, skipped)


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-``k`` column indices, descending score, ties by ascending column."""
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def top_k_retrieve(corpus: ItemCorpus, user_vector: np.ndarray, k: int, user_id: int = -1) -> RetrievalResult:
    if len(corpus) == 0:
        raise RetrievalError("cannot retrieve from an empty corpus")
    if k > len(corpus):
        raise RetrievalError(f"K={k} exceeds corpus size {len(corpus)}")
    u = np.asarray(user_vector, dtype=np.float64)
    norm = np.linalg.norm(u)
    if norm == 0:
        raise RetrievalError("user vector is zero")
    scores = corpus.vectors @ (u / norm)
    order = np.argsort(corpus.item_ids, kind="stable")
    ids, scores = corpus.item_ids[order], scores[order]
    idx = top_k_indices(scores, k)
    return RetrievalResult(user_id, corpus.scenario_id, ids[idx], scores[idx])


def _truth_set(truth) -> set:
    if isinstance(truth, (set, frozenset, list, tuple, np.ndarray)):
        return set(np.asarray(list(truth)).tolist())
    return {int(truth)}


def case_metrics(ranked: Sequence[int], truth, k: int) -> tuple[float, float]:
    """``(hit, ndcg)`` for one case. With several relevant items the first hit counts."""
    wanted = _truth_set(truth)
    for rank, item in enumerate(list(ranked)[:k], start=1):
        if int(item) in wanted:
            return 1.0, 1.0 / math.log2(rank + 1)
    return 0.0, 0.0


def _aggregate(results, ground_truth, k: int, missing: str):
    if missing not in ("miss", "skip"):
        raise ValueError("missing must be 'miss' or 'skip'")
    hits, gains, absent = [], [], []
    for key, truth in ground_truth.items():
        res = results.get(key)
        if res is None:
            absent.append(key)
            if missing == "miss":
                hits.append(0.0)
                gains.append(0.0)
            continue
        ranked = res.item_ids if isinstance(res, RetrievalResult) else res
        h, g = case_metrics(ranked, truth, k)
        hits.append(h)
        gains.append(g)
    return hits, gains, absent


def hr_at_k(results: Mapping, ground_truth: Mapping, k: int, missing: str = "miss") -> float:
    """Fraction of cases whose held-out item is in the top ``k``.

    ``results`` and ``ground_truth`` are keyed by ``(user, scenario)``.
    Cases without a result count as misses, or are dropped with ``missing='skip'``.
    """
    hits, _, _ = _aggregate(results, ground_truth, k, missing)
    return float(np.mean(hits)) if hits else 0.0


def ndcg_at_k(results: Mapping, ground_truth: Mapping, k: int, missing: str = "miss") -> float:
    _, gains, _ = _aggregate(results, ground_truth, k, missing)
    return float(np.mean(gains)) if gains else 0.0


@dataclass
class ScenarioMetrics:
    scenario_id: int
    hr: float
    ndcg: float
    n_cases: int


def rank_of_truth(scores: np.ndarray, corpus_ids: np.ndarray, truth_items: np.ndarray) -> np.ndarray:
    """1-based rank of each row's truth item under the top-K ordering; 0 if absent from the corpus."""
    pos = np.searchsorted(corpus_ids, truth_items)
    pos = pos.clip(0, len(corpus_ids) - 1)
    present = corpus_ids[pos] == truth_items
    ts = scores[np.arange(len(scores)), pos]
    better = (scores > ts[:, None]).sum(axis=1)
    tied_before = ((scores == ts[:, None]) & (np.arange(len(corpus_ids))[None, :] < pos[:, None])).sum(axis=1)
    return np.where(present, better + tied_before + 1, 0)


def evaluate(
    model: SASSModel,
    store: FeatureStore,
    test: Dataset,
    candidates: Sequence[np.ndarray],
    k: int = 20,
    batch_size: int = 2048,
    scorer=None,
) -> dict[int, ScenarioMetrics]:
    """Leave-out evaluation over the test clicks, one case per click.

    ``scorer(users, scenario, corpus_ids) -> scores`` overrides the model,
    e.g. with the generator's ground-truth logits.
    """
    out = {}
    clicks = np.nonzero(test.clicked)[0]
    for s in range(test.n_scenarios):
        rows = clicks[test.scenario[clicks] == s]
        if len(rows) == 0 or len(candidates[s]) == 0:
            out[s] = ScenarioMetrics(s, 0.0, 0.0, int(len(rows)))
            continue
        if scorer is None:
            corpus = build_item_corpus(model, store, candidates[s], s)
            ids, vecs = corpus.item_ids, corpus.vectors
        else:
            ids = np.unique(candidates[s])
        ranks = []
        for start in range(0, len(rows), batch_size):
            r = rows[start : start + batch_size]
            if scorer is None:
                e, _ = model.encode("user", store.user_batch(test.user[r], test.scenario[r]))
                scores = normalize_rows(e) @ vecs.T
            else:
                scores = scorer(test.user[r], s, ids)
            ranks.append(rank_of_truth(scores, ids, test.item[r]))
        rank = np.concatenate(ranks)
        hit = (rank >= 1) & (rank <= k)
        gain = np.where(hit, 1.0 / np.log2(np.maximum(rank, 1) + 1), 0.0)
        out[s] = ScenarioMetrics(s, float(hit.mean()), float(gain.mean()), int(len(rows)))
    return out


def checkpoint_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
