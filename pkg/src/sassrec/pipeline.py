"""End-to-end experiments: data -> (pretrain) -> fine-tune -> evaluate, and ablation grids."""

from __future__ import annotations

import copy
import json
import logging
import traceback
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .config import RunConfig, with_overrides
from .core import Adagrad
from .dataset import Dataset, FeatureStore, default_schemas, generate_synthetic, split_train_test, substream
from .losses import ContrastiveConfig, FinetuneConfig
from .model import SASSModel
from .retrieval import ScenarioMetrics, evaluate
from .training import EpochStats, FinetuneTriplets, finetune_epoch, make_scenario_pairs, pretrain_epoch

log = logging.getLogger(__name__)

StatsSink = Callable[[EpochStats], None]


class NoPretrainPairsError(RuntimeError):
    pass


@dataclass
class PreparedData:
    dataset: Dataset
    train: Dataset
    test: Dataset
    store: FeatureStore
    candidates: list[np.ndarray]


def prepare_data(cfg: RunConfig, dataset: Dataset | None = None) -> PreparedData:
    if dataset is None:
        dataset = generate_synthetic(_reseed(cfg))
    train, test = split_train_test(dataset, cfg.eval.split_policy, cfg.eval.boundary)
    store = FeatureStore(train, cfg.features.max_len)
    candidates = [dataset.candidate_items(s) for s in range(dataset.n_scenarios)]
    return PreparedData(dataset, train, test, store, candidates)


def _reseed(cfg: RunConfig):
    # the top-level seed drives data generation too
    data = copy.deepcopy(cfg.data)
    data.seed = cfg.seed
    return data


def init_seed(cfg: RunConfig) -> int:
    return int(substream(cfg.seed, "init").integers(2**31))


def build_model(cfg: RunConfig, dataset: Dataset) -> SASSModel:
    user_schema, item_schema = default_schemas(dataset.meta, cfg.features)
    return SASSModel(user_schema, item_schema, dataset.n_scenarios, cfg.model, seed=init_seed(cfg))


def make_optimizer(cfg: RunConfig) -> Adagrad:
    o = cfg.optimizer
    return Adagrad(o.learning_rate, o.epsilon, o.initial_accumulator)


def pretrain_pairs(store: FeatureStore):
    return make_scenario_pairs(store.user_scenarios, "user"), make_scenario_pairs(store.item_scenarios, "item")


def run_pretrain(
    cfg: RunConfig,
    model: SASSModel,
    data: PreparedData,
    sink: StatsSink | None = None,
    optimizer: Adagrad | None = None,
    start_epoch: int = 0,
) -> list[EpochStats]:
    """Contrastive pretraining for epochs ``start_epoch .. cfg.pretrain.epochs - 1``.

    Each epoch draws from its own substream, so resuming from a checkpoint
    taken after epoch ``k`` (weights plus optimizer) replays the same run.
    """
    pairs = pretrain_pairs(data.store)
    if sum(len(p) for p in pairs) == 0:
        raise NoPretrainPairsError("no pretrain pairs: no user or item appears in two or more scenarios")
    ccfg = ContrastiveConfig(cfg.pretrain.temperature, cfg.pretrain.batch_size, cfg.pretrain.symmetric)
    opt = optimizer or make_optimizer(cfg)
    stats = []
    for epoch in range(start_epoch, cfg.pretrain.epochs):
        st = pretrain_epoch(model, data.store, pairs, ccfg, opt, substream(cfg.seed, "pretrain", epoch), epoch)
        stats.append(st)
        if sink:
            sink(st)
    return stats


def negative_weights(data: PreparedData, mode: str):
    if mode == "uniform":
        return None
    pop = np.bincount(data.train.item[data.train.clicked], minlength=data.train.n_items).astype(np.float64)
    return [(pop[c] + 1.0) ** 0.75 for c in data.candidates]


def run_finetune(
    cfg: RunConfig,
    model: SASSModel,
    data: PreparedData,
    sink: StatsSink | None = None,
    optimizer: Adagrad | None = None,
    start_epoch: int = 0,
) -> list[EpochStats]:
    """Fine-tuning on clicks; a fresh optimizer unless one is passed in to resume."""
    f = cfg.finetune
    fcfg = FinetuneConfig(f.beta, f.negatives_per_positive, f.batch_size)
    triplets = FinetuneTriplets.from_store(data.store)
    opt = optimizer or make_optimizer(cfg)
    weights = negative_weights(data, f.negative_sampling)
    stats = []
    for epoch in range(start_epoch, f.epochs):
        rng = substream(cfg.seed, "finetune", epoch)
        st = finetune_epoch(model, data.store, triplets, data.candidates, fcfg, opt, rng, epoch, weights)
        stats.append(st)
        if sink:
            sink(st)
    return stats


@dataclass
class ExperimentResult:
    metrics: dict[int, ScenarioMetrics]
    stats: list[EpochStats]
    model: SASSModel = field(repr=False)

    def hr(self, scenario: int) -> float:
        return self.metrics[scenario].hr


def run_experiment(
    cfg: RunConfig,
    data: PreparedData | None = None,
    pretrained_state: dict | None = None,
    sink: StatsSink | None = None,
) -> ExperimentResult:
    """Train one configuration and evaluate HR/NDCG@K per scenario.

    ``pretrained_state`` skips pretraining and restores the given weights
    (must come from a model with the same architecture).
    """
    data = data or prepare_data(cfg)
    model = build_model(cfg, data.dataset)
    stats: list[EpochStats] = []
    if pretrained_state is not None:
        model.load_state_dict(pretrained_state)
    elif cfg.pretrain.enabled and cfg.pretrain.epochs > 0:
        stats += run_pretrain(cfg, model, data, sink)
    stats += run_finetune(cfg, model, data, sink)
    metrics = evaluate(model, data.store, data.test, data.candidates, cfg.eval.k)
    return ExperimentResult(metrics, stats, model)


# --- ablation grid -----------------------------------------------------------------


@dataclass
class AblationRow:
    variant: str
    status: str
    metrics: dict[int, ScenarioMetrics] = field(default_factory=dict)
    error: str = ""

    def to_json(self) -> str:
        return json.dumps(
            {
                "variant": self.variant,
                "status": self.status,
                "error": self.error,
                "metrics": {str(s): asdict(m) for s, m in self.metrics.items()},
            },
            sort_keys=True,
        )


def ablation_run(
    base: RunConfig,
    cells: dict[str, dict],
    sink: StatsSink | None = None,
    dataset: Dataset | None = None,
) -> list[AblationRow]:
    """Run every cell (a dict of dotted config overrides) on shared data and seed.

    Datasets and pretrained weights are cached across cells whose relevant
    settings coincide. A failing cell is recorded and the grid continues.
    A fixed ``dataset`` replaces generation from each cell's data section.
    """
    data_cache: dict[str, PreparedData] = {}
    pre_cache: dict[str, dict] = {}
    rows = []
    for name, overrides in cells.items():
        try:
            cfg = with_overrides(base, overrides)
            dkey = json.dumps([cfg.seed, asdict(cfg.data), asdict(cfg.eval), cfg.features.max_len], sort_keys=True)
            if dkey not in data_cache:
                data_cache[dkey] = prepare_data(cfg, dataset)
            data = data_cache[dkey]
            state = None
            if cfg.pretrain.enabled and cfg.pretrain.epochs > 0:
                pkey = json.dumps(
                    [dkey, asdict(cfg.model), asdict(cfg.features), asdict(cfg.pretrain), asdict(cfg.optimizer)],
                    sort_keys=True,
                )
                if pkey not in pre_cache:
                    model = build_model(cfg, data.dataset)
                    run_pretrain(cfg, model, data, sink)
                    pre_cache[pkey] = {k: v.copy() for k, v in model.state_dict().items()}
                state = pre_cache[pkey]
            res = run_experiment(cfg, data, pretrained_state=state, sink=sink)
            rows.append(AblationRow(name, "ok", res.metrics))
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
            log.warning("ablation cell %s failed: %s", name, exc)
            rows.append(AblationRow(name, "failed", error=f"{type(exc).__name__}: {exc}"))
            log.debug(traceback.format_exc())
    return rows


def format_table(rows: list[AblationRow], metric: str = "hr") -> str:
    scenarios = sorted({s for r in rows for s in r.metrics})
    header = ["variant"] + [f"{metric.upper()}@s{s}" for s in scenarios]
    lines = [header]
    for r in rows:
        if r.status != "ok":
            lines.append([r.variant] + ["failed"] * len(scenarios))
        else:
            lines.append([r.variant] + [f"{getattr(r.metrics[s], metric):.4f}" for s in scenarios])
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in lines)
