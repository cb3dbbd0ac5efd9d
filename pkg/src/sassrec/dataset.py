"""Synthetic multi-scenario interaction logs, record I/O and train/test splits.

Record file: UTF-8, one JSON object per line with the keys
``user_id, item_id, scenario_id, clicked, exposed, timestamp, user_group,
item_category``. A ``<path>.meta.json`` sidecar carries vocabulary sizes and
a ``<path>.truth.json`` sidecar the generator's latent factors.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RECORD_FIELDS = ("user_id", "item_id", "scenario_id", "clicked", "exposed", "timestamp", "user_group", "item_category")


class DatasetError(ValueError):
    pass


class RecordParseError(DatasetError):
    def __init__(self, line_no: int, msg: str) -> None:
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


class RecordValidationError(RecordParseError):
    pass


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent RNG stream derived from ``(seed, name, *extra)``."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode()), *extra]))


@dataclass
class SyntheticConfig:
    n_scenarios: int = 4
    n_users: int = 2000
    n_items: int = 500
    n_categories: int = 20
    n_user_groups: int = 16
    latent_dim: int = 8
    user_participation: list[float] = field(default_factory=lambda: [0.9, 0.8, 0.8, 0.7])
    item_participation: list[float] = field(default_factory=lambda: [0.9, 0.8, 0.8, 0.8])
    exposures_per_user: float = 40.0
    sparsity: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0, 0.05])
    rotation_angles: list[float] = field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5])
    scenario_bias: list[float] = field(default_factory=lambda: [-1.0, -1.0, -1.0, -1.0])
    affinity_scale: float = 3.0
    item_noise: float = 0.5
    user_noise: float = 0.5
    max_timestamp: int = 1_000_000
    seed: int = 0

    def validate(self) -> None:
        S = self.n_scenarios
        if S < 2:
            raise DatasetError(f"need at least 2 scenarios, got {S}")
        for name in ("user_participation", "item_participation", "sparsity", "rotation_angles", "scenario_bias"):
            if len(getattr(self, name)) != S:
                raise DatasetError(f"{name} needs {S} entries")
        for name in ("user_participation", "item_participation", "sparsity"):
            if any(not (0 < r <= 1) for r in getattr(self, name)):
                raise DatasetError(f"{name} entries must lie in (0, 1]")
        if not self.sparse_scenarios:
            raise DatasetError("at least one scenario must be sparse (sparsity < 1)")
        if len(self.dense_scenarios) == 0:
            raise DatasetError("at least one scenario must be dense (sparsity == 1)")
        if min(self.n_users, self.n_items, self.n_categories, self.n_user_groups, self.latent_dim) < 1:
            raise DatasetError("sizes must be positive")
        if self.exposures_per_user <= 0:
            raise DatasetError("exposures_per_user must be positive")
        # expected clicks per participating dense user at a neutral affinity
        expected = self.exposures_per_user * _sigmoid(max(self.scenario_bias))
        if expected < 1:
            raise DatasetError(f"expected clicks per user ({expected:.2f}) below 1; raise exposures or bias")

    @property
    def sparse_scenarios(self) -> list[int]:
        return [s for s, m in enumerate(self.sparsity) if m < 1]

    @property
    def dense_scenarios(self) -> list[int]:
        return [s for s, m in enumerate(self.sparsity) if m >= 1]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class Dataset:
    """Column store of interaction records plus static profiles."""

    n_users: int
    n_items: int
    n_scenarios: int
    n_user_groups: int
    n_categories: int
    user: np.ndarray
    item: np.ndarray
    scenario: np.ndarray
    clicked: np.ndarray
    timestamp: np.ndarray
    user_group: np.ndarray
    item_category: np.ndarray
    truth: dict | None = None

    def __len__(self) -> int:
        return len(self.user)

    @property
    def meta(self) -> dict:
        return {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "n_scenarios": self.n_scenarios,
            "n_user_groups": self.n_user_groups,
            "n_categories": self.n_categories,
        }

    def subset(self, mask: np.ndarray) -> Dataset:
        return Dataset(
            **self.meta,
            user=self.user[mask],
            item=self.item[mask],
            scenario=self.scenario[mask],
            clicked=self.clicked[mask],
            timestamp=self.timestamp[mask],
            user_group=self.user_group,
            item_category=self.item_category,
            truth=self.truth,
        )

    def keys(self) -> set[tuple[int, int, int, int]]:
        return set(zip(self.user.tolist(), self.item.tolist(), self.scenario.tolist(), self.timestamp.tolist()))

    def click_counts(self) -> np.ndarray:
        return np.bincount(self.scenario[self.clicked], minlength=self.n_scenarios)

    def candidate_items(self, scenario: int) -> np.ndarray:
        """Items with any record in ``scenario`` (the scenario's candidate set)."""
        return np.unique(self.item[self.scenario == scenario])

    def canonical_order(self) -> Dataset:
        order = np.lexsort((self.item, self.scenario, self.timestamp, self.user))
        return self.subset(order)


def scenario_rotation(dim: int, angle: float) -> np.ndarray:
    """Rotation by ``angle`` in each coordinate plane (0,1), (2,3), ..."""
    m = np.eye(dim)
    c, s = math.cos(angle), math.sin(angle)
    for i in range(0, dim - 1, 2):
        m[i, i], m[i, i + 1], m[i + 1, i], m[i + 1, i + 1] = c, -s, s, c
    return m


def click_logits(truth: dict, users: np.ndarray, items: np.ndarray, scenario: int) -> np.ndarray:
    """Ground-truth click logit for (user, item) pairs in one scenario."""
    U = np.asarray(truth["user_factors"])[users]
    V = np.asarray(truth["item_factors"])[items]
    M = np.asarray(truth["scenario_transforms"][scenario])
    return truth["affinity_scale"] * np.einsum("bd,bd->b", U @ M.T, V) + truth["scenario_bias"][scenario]


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Latent-factor generator.

    Users and items get latent vectors around group / category centroids;
    scenario ``s`` rotates user preferences by ``M_s``. Each user joins each
    scenario with its participation rate, receives Poisson exposures drawn
    uniformly from that scenario's items, and clicks each exposure with
    probability ``sigmoid(scale * <M_s u, v> + bias_s)``.
    """
    cfg.validate()
    S, d = cfg.n_scenarios, cfg.latent_dim
    g = substream(cfg.seed, "catalog")
    group_centers = g.normal(size=(cfg.n_user_groups, d)) / math.sqrt(d)
    cat_centers = g.normal(size=(cfg.n_categories, d)) / math.sqrt(d)
    user_group = g.integers(cfg.n_user_groups, size=cfg.n_users)
    item_category = g.integers(cfg.n_categories, size=cfg.n_items)
    U = group_centers[user_group] + cfg.user_noise * g.normal(size=(cfg.n_users, d)) / math.sqrt(d)
    V = cat_centers[item_category] + cfg.item_noise * g.normal(size=(cfg.n_items, d)) / math.sqrt(d)
    # unit vectors, so affinity_scale alone sets the logit spread
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    M = np.stack([scenario_rotation(d, a) for a in cfg.rotation_angles])
    item_in = g.random((cfg.n_items, S)) < np.asarray(cfg.item_participation)
    scenario_items = [np.nonzero(item_in[:, s])[0] for s in range(S)]
    if any(len(items) == 0 for items in scenario_items):
        raise DatasetError("a scenario ended up with no items; raise item_participation")
    truth = {
        "user_factors": U,
        "item_factors": V,
        "scenario_transforms": M,
        "scenario_bias": list(cfg.scenario_bias),
        "affinity_scale": cfg.affinity_scale,
    }

    cols: dict[str, list[np.ndarray]] = {k: [] for k in ("user", "item", "scenario", "clicked", "timestamp")}
    for u in range(cfg.n_users):
        r = substream(cfg.seed, "user", u)
        joins = r.random(S) < np.asarray(cfg.user_participation)
        per_user = []
        for s in range(S):
            if not joins[s]:
                continue
            lam = cfg.exposures_per_user * cfg.sparsity[s]
            n = min(int(r.poisson(lam)), len(scenario_items[s]))
            if n == 0:
                continue
            items = r.choice(scenario_items[s], size=n, replace=False)
            logit = cfg.affinity_scale * ((M[s] @ U[u]) @ V[items].T) + cfg.scenario_bias[s]
            clicks = r.random(n) < _sigmoid(logit)
            per_user.append((np.full(n, s), items, clicks))
        if not per_user:
            continue
        scen = np.concatenate([p[0] for p in per_user])
        items = np.concatenate([p[1] for p in per_user])
        clicks = np.concatenate([p[2] for p in per_user])
        ts = np.sort(r.choice(cfg.max_timestamp, size=len(items), replace=False))
        order = r.permutation(len(items))
        cols["user"].append(np.full(len(items), u))
        cols["item"].append(items[order])
        cols["scenario"].append(scen[order])
        cols["clicked"].append(clicks[order])
        cols["timestamp"].append(ts)

    ds = Dataset(
        n_users=cfg.n_users,
        n_items=cfg.n_items,
        n_scenarios=S,
        n_user_groups=cfg.n_user_groups,
        n_categories=cfg.n_categories,
        user=np.concatenate(cols["user"]).astype(np.int64),
        item=np.concatenate(cols["item"]).astype(np.int64),
        scenario=np.concatenate(cols["scenario"]).astype(np.int64),
        clicked=np.concatenate(cols["clicked"]).astype(bool),
        timestamp=np.concatenate(cols["timestamp"]).astype(np.int64),
        user_group=user_group.astype(np.int64),
        item_category=item_category.astype(np.int64),
        truth=truth,
    )
    return _cap_sparse(ds, cfg)


def _cap_sparse(ds: Dataset, cfg: SyntheticConfig) -> Dataset:
    """Drop surplus clicked records so each sparse scenario stays within
    ``sparsity * (smallest dense click count)``."""
    counts = ds.click_counts()
    dense_min = min(counts[s] for s in cfg.dense_scenarios)
    keep = np.ones(len(ds), dtype=bool)
    r = substream(cfg.seed, "sparse-cap")
    for s in cfg.sparse_scenarios:
        cap = int(math.floor(cfg.sparsity[s] * dense_min))
        idx = np.nonzero((ds.scenario == s) & ds.clicked)[0]
        if len(idx) > cap:
            keep[r.choice(idx, size=len(idx) - cap, replace=False)] = False
    return ds.subset(keep) if not keep.all() else ds


# --- record files -----------------------------------------------------------


def write_records(ds: Dataset, path: str | Path, write_truth: bool = True) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i, s, c, t in zip(ds.user.tolist(), ds.item.tolist(), ds.scenario.tolist(), ds.clicked.tolist(), ds.timestamp.tolist()):
            rec = {
                "user_id": u,
                "item_id": i,
                "scenario_id": s,
                "clicked": c,
                "exposed": True,
                "timestamp": t,
                "user_group": int(ds.user_group[u]),
                "item_category": int(ds.item_category[i]),
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    Path(f"{path}.meta.json").write_text(json.dumps(ds.meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    if write_truth and ds.truth is not None:
        truth = {k: (np.asarray(v).tolist() if isinstance(v, np.ndarray) else v) for k, v in ds.truth.items()}
        Path(f"{path}.truth.json").write_text(json.dumps(truth, sort_keys=True) + "\n", encoding="utf-8")


def _int_field(rec: dict, key: str, line_no: int) -> int:
    if key not in rec:
        raise RecordValidationError(line_no, f"missing field {key!r}")
    v = rec[key]
    if isinstance(v, bool) or not isinstance(v, int) or v < 0:
        raise RecordValidationError(line_no, f"field {key!r} must be a nonnegative integer, got {v!r}")
    return v


def load_records(path: str | Path) -> Dataset:
    """Parse and validate a record file (sidecars are optional)."""
    path = Path(path)
    rows: list[tuple] = []
    groups: dict[int, int] = {}
    cats: dict[int, int] = {}
    seen: set[tuple[int, int, int, int]] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordParseError(line_no, f"malformed JSON: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise RecordParseError(line_no, "record must be a JSON object")
            unknown = set(rec) - set(RECORD_FIELDS)
            if unknown:
                raise RecordValidationError(line_no, f"unknown fields {sorted(unknown)}")
            clicked = rec.get("clicked")
            if not isinstance(clicked, bool):
                raise RecordValidationError(line_no, "field 'clicked' must be a boolean")
            exposed = rec.get("exposed")
            if exposed is not True:
                raise RecordValidationError(line_no, "every record must have exposed=true (clicked implies exposed)")
            u, i, s, t = (_int_field(rec, k, line_no) for k in ("user_id", "item_id", "scenario_id", "timestamp"))
            ug, ic = _int_field(rec, "user_group", line_no), _int_field(rec, "item_category", line_no)
            if groups.setdefault(u, ug) != ug:
                raise RecordValidationError(line_no, f"user {u} has conflicting user_group")
            if cats.setdefault(i, ic) != ic:
                raise RecordValidationError(line_no, f"item {i} has conflicting item_category")
            key = (u, i, s, t)
            if key in seen:
                raise RecordValidationError(line_no, f"duplicate record key {key}")
            seen.add(key)
            rows.append((u, i, s, clicked, t))
    meta_path = Path(f"{path}.meta.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    else:
        meta = {
            "n_users": max(groups, default=-1) + 1,
            "n_items": max(cats, default=-1) + 1,
            "n_scenarios": max((r[2] for r in rows), default=-1) + 1,
            "n_user_groups": max(groups.values(), default=-1) + 1,
            "n_categories": max(cats.values(), default=-1) + 1,
        }
    arr = np.array(rows, dtype=np.int64).reshape(-1, 5)
    if len(arr) and (
        arr[:, 0].max() >= meta["n_users"] or arr[:, 1].max() >= meta["n_items"] or arr[:, 2].max() >= meta["n_scenarios"]
    ):
        raise DatasetError("record ids exceed the vocabulary sizes in the meta sidecar")
    user_group = np.zeros(meta["n_users"], dtype=np.int64)
    item_category = np.zeros(meta["n_items"], dtype=np.int64)
    for u, ug in groups.items():
        user_group[u] = ug
    for i, ic in cats.items():
        item_category[i] = ic
    ds = Dataset(
        **meta,
        user=arr[:, 0],
        item=arr[:, 1],
        scenario=arr[:, 2],
        clicked=arr[:, 3].astype(bool),
        timestamp=arr[:, 4],
        user_group=user_group,
        item_category=item_category,
    )
    truth_path = Path(f"{path}.truth.json")
    if truth_path.exists():
        ds.truth = load_truth(truth_path)
    return ds


def load_truth(path: str | Path) -> dict:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    for k in ("user_factors", "item_factors", "scenario_transforms"):
        raw[k] = np.asarray(raw[k], dtype=np.float64)
    return raw


# --- splitting ----------------------------------------------------------------


def split_train_test(ds: Dataset, policy: str = "leave_last_out", boundary: int | None = None) -> tuple[Dataset, Dataset]:
    """Temporal split at ``boundary`` or per (user, scenario) leave-last-click-out.

    Under ``leave_last_out`` every (user, scenario) with at least two clicks
    gives its latest click to the test set; everything else is train.
    """
    if policy == "temporal":
        if boundary is None:
            raise DatasetError("temporal split needs a boundary")
        if len(ds) == 0 or not (ds.timestamp.min() < boundary <= ds.timestamp.max() + 1):
            raise DatasetError(f"boundary {boundary} outside data range")
        test = ds.timestamp >= boundary
        return ds.subset(~test), ds.subset(test)
    if policy != "leave_last_out":
        raise DatasetError(f"unknown split policy {policy!r}")
    idx = np.nonzero(ds.clicked)[0]
    order = idx[np.lexsort((ds.timestamp[idx], ds.scenario[idx], ds.user[idx]))]
    u, s = ds.user[order], ds.scenario[order]
    last = np.ones(len(order), dtype=bool)
    last[:-1] = (u[1:] != u[:-1]) | (s[1:] != s[:-1])
    first = np.ones(len(order), dtype=bool)
    first[1:] = last[:-1]
    # group sizes via the run boundaries
    starts = np.nonzero(first)[0]
    sizes = np.diff(np.append(starts, len(order)))
    size_per = np.repeat(sizes, sizes)
    test = np.zeros(len(ds), dtype=bool)
    test[order[last & (size_per >= 2)]] = True
    return ds.subset(~test), ds.subset(test)


# --- features from the train split --------------------------------------------


def count_bucket(counts) -> np.ndarray:
    """``floor(log2(1 + count))`` clipped to ``N_COUNT_BUCKETS - 1``."""
    c = np.asarray(counts)
    return np.minimum(np.floor(np.log2(1 + c)).astype(np.int64), N_COUNT_BUCKETS - 1)


N_COUNT_BUCKETS = 8


@dataclass
class FeatureDims:
    id_dim: int = 16
    profile_dim: int = 8
    scenario_dim: int = 8
    cross_dim: int = 4
    sequence_dim: int = 16
    max_len: int = 50


def default_schemas(meta: dict, dims: FeatureDims | None = None):
    """The concrete synthetic schema for both sides.

    user: user_id, user_group (profiles); scenario; user_activity (click-count
    bucket in the scenario); clicked_items (behavior sequence of item_id and
    item_category). item: item_id, item_category; scenario; item_popularity.
    """
    from .features import FeatureSchema, FieldSpec

    d = dims or FeatureDims()
    user = FeatureSchema(
        "user",
        (
            FieldSpec("user_id", meta["n_users"], d.id_dim, "profile"),
            FieldSpec("user_group", meta["n_user_groups"], d.profile_dim, "profile"),
            FieldSpec("scenario", meta["n_scenarios"], d.scenario_dim, "scenario_context"),
            FieldSpec("user_activity", N_COUNT_BUCKETS, d.cross_dim, "scenario_cross"),
            FieldSpec(
                "clicked_items",
                meta["n_items"],
                d.sequence_dim,
                "behavior_sequence",
                item_fields=("item_id", "item_category"),
                max_len=d.max_len,
            ),
        ),
    )
    item = FeatureSchema(
        "item",
        (
            FieldSpec("item_id", meta["n_items"], d.id_dim, "profile"),
            FieldSpec("item_category", meta["n_categories"], d.profile_dim, "profile"),
            FieldSpec("scenario", meta["n_scenarios"], d.scenario_dim, "scenario_context"),
            FieldSpec("item_popularity", N_COUNT_BUCKETS, d.cross_dim, "scenario_cross"),
        ),
    )
    return user, item


class FeatureStore:
    """Per-scenario features computed from the train split only."""

    def __init__(self, train: Dataset, max_len: int = 50) -> None:
        self.train = train
        self.max_len = max_len
        S = train.n_scenarios
        self.n_scenarios = S
        c = np.nonzero(train.clicked)[0]
        order = c[np.lexsort((train.timestamp[c], train.scenario[c], train.user[c]))]
        self.seq_items = train.item[order]
        key = train.user[order] * S + train.scenario[order]
        counts = np.bincount(key, minlength=train.n_users * S)
        self.seq_count = counts.reshape(train.n_users, S)
        self.seq_start = (np.cumsum(counts) - counts).reshape(train.n_users, S)
        self._click_rank = np.empty(len(order), dtype=np.int64)
        self._click_rank[:] = np.arange(len(order)) - self.seq_start.ravel()[key]
        self._click_order = order
        pop = np.zeros((train.n_items, S), dtype=np.int64)
        np.add.at(pop, (train.item[c], train.scenario[c]), 1)
        self.item_popularity = count_bucket(pop)
        self.item_popularity_global = count_bucket(pop.sum(axis=1))
        self.user_scenarios = np.zeros((train.n_users, S), dtype=bool)
        self.user_scenarios[train.user, train.scenario] = True
        self.item_scenarios = np.zeros((train.n_items, S), dtype=bool)
        self.item_scenarios[train.item, train.scenario] = True

    def clicks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Train clicks as ``(user, scenario, item, prior_click_count)``, chronological per group."""
        o = self._click_order
        return self.train.user[o], self.train.scenario[o], self.train.item[o], self._click_rank

    def user_batch(self, users, scenarios, prefix=None):
        """User-side features; ``prefix`` limits the history to the first
        ``prefix`` clicks of each (user, scenario) (default: all of it)."""
        from .features import SequenceBatch, SideBatch

        users = np.asarray(users, dtype=np.int64)
        scenarios = np.asarray(scenarios, dtype=np.int64)
        n = self.seq_count[users, scenarios] if prefix is None else np.asarray(prefix, dtype=np.int64)
        lengths = np.minimum(n, self.max_len)
        L = max(int(lengths.max(initial=0)), 1)
        end = self.seq_start[users, scenarios] + n
        pos = end[:, None] - lengths[:, None] + np.arange(L)[None, :]
        valid = np.arange(L)[None, :] < lengths[:, None]
        items = np.where(valid, self.seq_items[np.where(valid, pos, 0)] if len(self.seq_items) else 0, 0)
        cats = np.where(valid, self.train.item_category[items], 0)
        return SideBatch(
            scenario=scenarios,
            categorical={"user_id": users, "user_group": self.train.user_group[users], "user_activity": count_bucket(n)},
            sequences={"clicked_items": SequenceBatch({"item_id": items, "item_category": cats}, lengths)},
        )

    def item_batch(self, items, scenarios, scenario_agnostic: bool = False):
        from .features import SideBatch

        items = np.asarray(items, dtype=np.int64)
        scenarios = np.asarray(scenarios, dtype=np.int64)
        if scenario_agnostic:
            scenarios = np.zeros_like(scenarios)
            pop = self.item_popularity_global[items]
        else:
            pop = self.item_popularity[items, scenarios]
        return SideBatch(
            scenario=scenarios,
            categorical={
                "item_id": items,
                "item_category": self.train.item_category[items],
                "item_popularity": pop,
            },
        )
