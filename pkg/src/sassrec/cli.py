"""Command-line entry point: ``sassrec <verb> [options]``.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 checkpoint error, 5 runtime error (e.g. a non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .checkpoint import CheckpointError, load_checkpoint, restore_from_pretrain, save_checkpoint
from .config import ConfigError, RunConfig, config_from_dict, load_config, with_overrides
from .core import NonFiniteError
from .dataset import DatasetError, click_logits, default_schemas, generate_synthetic, load_records, write_records
from .pipeline import (
    AblationRow,
    NoPretrainPairsError,
    ablation_run,
    build_model,
    format_table,
    make_optimizer,
    prepare_data,
    run_finetune,
    run_pretrain,
)
from .retrieval import RetrievalError, build_item_corpus, checkpoint_digest, evaluate, top_k_retrieve
from .training import EpochStats

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_RUNTIME = 5

log = logging.getLogger("sassrec")

# each cell is a set of dotted overrides applied on top of the run config
DEFAULT_GRID = {
    "sass_base": {"pretrain.enabled": False},
    "sigmoid_gate": {"pretrain.enabled": False, "model.gate": "sigmoid_gate"},
    "no_gate": {"pretrain.enabled": False, "model.gate": "no_gate"},
    "single_item": {"pretrain.enabled": False, "model.single_item_embedding": True},
    "no_aux_loss": {"pretrain.enabled": False, "finetune.beta": 0.0},
    "no_fusion": {"pretrain.enabled": False, "model.use_fusion": False},
    "sass": {"pretrain.enabled": True},
}


class CliError(Exception):
    def __init__(self, code: int, msg: str) -> None:
        super().__init__(msg)
        self.code = code


# --- config ------------------------------------------------------------------


def _parse_set(items: Sequence[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw)
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    overrides = _parse_set(args.set or [])
    flag_map = {
        "seed": "seed",
        "gate_variant": "model.gate",
        "layers": "model.depth",
        "beta": "finetune.beta",
        "k": "eval.k",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "pretrained", None) is not None:
        overrides["pretrain.enabled"] = True
    return with_overrides(cfg, overrides) if overrides else cfg


def _require(path: str | None, what: str, code: int) -> Path:
    if path is None:
        raise CliError(EXIT_CONFIG, f"missing required {what} path")
    p = Path(path)
    if not p.exists():
        raise CliError(code, f"{what} {p} does not exist")
    return p


def _load_data(cfg: RunConfig, path: str | None):
    dataset = load_records(_require(path, "data", EXIT_DATA))
    if dataset.n_scenarios < 2:
        raise DatasetError(f"need at least 2 scenarios, data has {dataset.n_scenarios}")
    return prepare_data(cfg, dataset)


# --- output ------------------------------------------------------------------


class StatsWriter:
    """Writes epoch stats as JSON lines to stdout or a file."""

    def __init__(self, path: str | None) -> None:
        self.fh = open(path, "w", encoding="utf-8") if path else sys.stdout

    def __call__(self, st: EpochStats) -> None:
        self.fh.write(st.to_json() + "\n")
        self.fh.flush()

    def close(self) -> None:
        if self.fh is not sys.stdout:
            self.fh.close()


def _emit_report(lines: list[str], table: str, out: str | None) -> None:
    if out:
        Path(out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    else:
        for line in lines:
            print(line)
    print(table, file=sys.stderr if not out else sys.stdout)


def _metrics_table(metrics: dict, label: str) -> str:
    rows = [["scenario", "cases", "HR", "NDCG"]]
    for s in sorted(metrics):
        m = metrics[s]
        rows.append([str(s), str(m.n_cases), f"{m.hr:.4f}", f"{m.ndcg:.4f}"])
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    body = "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)
    return f"{label}\n{body}"


# --- commands ----------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if not args.out:
        raise CliError(EXIT_CONFIG, "gen-data needs --out")
    ds = generate_synthetic(with_overrides(cfg, {"data.seed": cfg.seed}).data)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_records(ds, args.out)
    print(json.dumps({"records": len(ds), "clicks": ds.click_counts().tolist(), "out": str(args.out)}, sort_keys=True))
    return EXIT_OK


def _checkpoint_meta(cfg: RunConfig, stage: str, epochs_done: int, data_path: str) -> dict:
    return {"stage": stage, "epochs_done": epochs_done, "run_seed": cfg.seed, "config": cfg.to_dict(), "data": Path(data_path).name}


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    data = _load_data(cfg, args.data)
    if not args.out:
        raise CliError(EXIT_CONFIG, "pretrain needs --out")
    if args.resume:
        expected = build_model(cfg, data.dataset).schema_hash()
        model, opt, head = load_checkpoint(_require(args.resume, "checkpoint", EXIT_CHECKPOINT), expected)
        if head["meta"].get("stage") != "pretrain":
            raise CliError(EXIT_CHECKPOINT, f"{args.resume} is not a pretraining checkpoint")
        start = int(head["meta"].get("epochs_done", 0))
        opt = opt or make_optimizer(cfg)
    else:
        model, opt, start = build_model(cfg, data.dataset), make_optimizer(cfg), 0
    writer = StatsWriter(args.stats)
    try:
        run_pretrain(cfg, model, data, writer, optimizer=opt, start_epoch=start)
    finally:
        writer.close()
    save_checkpoint(model, args.out, opt, _checkpoint_meta(cfg, "pretrain", max(cfg.pretrain.epochs, start), args.data))
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    data = _load_data(cfg, args.data)
    if not args.out:
        raise CliError(EXIT_CONFIG, "finetune needs --out")
    model = build_model(cfg, data.dataset)
    if args.pretrained:
        restore_from_pretrain(_require(args.pretrained, "checkpoint", EXIT_CHECKPOINT), model)
    opt = make_optimizer(cfg)
    writer = StatsWriter(args.stats)
    try:
        run_finetune(cfg, model, data, writer, optimizer=opt)
    finally:
        writer.close()
    save_checkpoint(model, args.out, opt, _checkpoint_meta(cfg, "finetune", cfg.finetune.epochs, args.data))
    return EXIT_OK


def _load_model_for(cfg: RunConfig, data, path: str | None):
    model, _, head = load_checkpoint(_require(path, "checkpoint", EXIT_CHECKPOINT))
    user, item = default_schemas(data.dataset.meta, cfg.features)
    if model.user_schema != user or model.item_schema != item:
        raise CliError(EXIT_CHECKPOINT, "checkpoint feature schema does not match the data and config")
    return model


def truth_scorer(truth: dict):
    def score(users, scenario, ids):
        u = np.repeat(users, len(ids))
        i = np.tile(ids, len(users))
        return click_logits(truth, u, i, scenario).reshape(len(users), len(ids))

    return score


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    data = _load_data(cfg, args.data)
    if args.oracle:
        if data.dataset.truth is None:
            raise CliError(EXIT_DATA, "oracle evaluation needs the ground-truth sidecar next to the data file")
        metrics = evaluate(None, data.store, data.test, data.candidates, cfg.eval.k, scorer=truth_scorer(data.dataset.truth))
        source = "oracle"
    else:
        model = _load_model_for(cfg, data, args.checkpoint)
        metrics = evaluate(model, data.store, data.test, data.candidates, cfg.eval.k)
        source = checkpoint_digest(args.checkpoint)
    lines = [
        json.dumps({"source": source, "k": cfg.eval.k, "scenario": s, "hr": m.hr, "ndcg": m.ndcg, "n_cases": m.n_cases}, sort_keys=True)
        for s, m in sorted(metrics.items())
    ]
    _emit_report(lines, _metrics_table(metrics, f"{source} @K={cfg.eval.k}"), args.out)
    return EXIT_OK


def cmd_retrieve(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    data = _load_data(cfg, args.data)
    model = _load_model_for(cfg, data, args.checkpoint)
    s = args.scenario
    if not 0 <= s < data.dataset.n_scenarios:
        raise CliError(EXIT_DATA, f"unknown scenario {s}")
    corpus = build_item_corpus(model, data.store, data.candidates[s], s, checkpoint_digest(args.checkpoint))
    for item, why in corpus.skipped:
        log.warning("skipped item %d: %s", item, why)
    if args.corpus_out:
        corpus.save(args.corpus_out)
    users = np.asarray(args.user, dtype=np.int64)
    if (users < 0).any() or (users >= data.dataset.n_users).any():
        raise CliError(EXIT_DATA, "user id outside the vocabulary")
    k = len(corpus) if args.all else cfg.eval.k
    e, _ = model.encode("user", data.store.user_batch(users, np.full(len(users), s)))
    lines = []
    for u, vec in zip(users.tolist(), e):
        res = top_k_retrieve(corpus, vec, k, u)
        lines.append(
            json.dumps({"user": u, "scenario": s, "items": res.item_ids.tolist(), "scores": [round(x, 12) for x in res.scores.tolist()]})
        )
    _emit_report(lines, f"retrieved top-{k} of {len(corpus)} items for {len(users)} users in scenario {s}", args.out)
    return EXIT_OK


def _load_grid(path: str | None) -> dict[str, dict]:
    if path is None:
        return DEFAULT_GRID
    raw = yaml.safe_load(Path(_require(path, "grid", EXIT_CONFIG)).read_text(encoding="utf-8"))
    if not isinstance(raw, dict) or not all(isinstance(v, dict) or v is None for v in raw.values()):
        raise ConfigError("grid file must map cell names to override mappings")
    return {str(k): dict(v or {}) for k, v in raw.items()}


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    cells = _load_grid(args.grid)
    try:
        seeds = [int(x) for x in args.seeds.split(",")] if args.seeds else [cfg.seed]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    dataset = load_records(_require(args.data, "data", EXIT_DATA)) if args.data else None
    lines, all_rows = [], []
    for seed in seeds:
        base = with_overrides(cfg, {"seed": seed})
        rows = ablation_run(base, cells, dataset=dataset)
        for r in rows:
            rec = json.loads(r.to_json())
            rec["seed"] = seed
            lines.append(json.dumps(rec, sort_keys=True))
        all_rows.extend(AblationRow(f"{r.variant}/seed{seed}", r.status, r.metrics, r.error) for r in rows)
    _emit_report(lines, format_table(all_rows, "hr") + "\n\n" + format_table(all_rows, "ndcg"), args.out)
    return EXIT_OK if all(r.status == "ok" for r in all_rows) else EXIT_RUNTIME


# --- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sassrec", description="Multi-scenario two-tower retrieval with scenario-adaptive transfer.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output path")
        sp.add_argument("--gate-variant", dest="gate_variant")
        sp.add_argument("--layers", type=int, help="tower depth T")
        sp.add_argument("--beta", type=float, help="auxiliary loss weight")
        sp.add_argument("--k", type=int, help="retrieval cutoff K")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
        if data:
            sp.add_argument("--data", help="record file written by gen-data")
        return sp

    common(sub.add_parser("gen-data", help="generate a synthetic multi-scenario log"), data=False).set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("pretrain", help="contrastive pretraining"))
    sp.add_argument("--resume", help="continue from a pretraining checkpoint")
    sp.add_argument("--stats", help="write epoch stats here instead of stdout")
    sp.set_defaults(func=cmd_pretrain)

    sp = common(sub.add_parser("finetune", help="fine-tune on clicks (SASS with --pretrained, else SASS-Base)"))
    sp.add_argument("--pretrained", help="pretraining checkpoint to restore")
    sp.add_argument("--stats", help="write epoch stats here instead of stdout")
    sp.set_defaults(func=cmd_finetune)

    sp = common(sub.add_parser("eval", help="HR@K / NDCG@K on the held-out clicks"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--oracle", action="store_true", help="rank with the generator's ground truth instead")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("retrieve", help="top-K items for users in one scenario"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scenario", type=int, required=True)
    sp.add_argument("--user", type=int, action="append", required=True)
    sp.add_argument("--all", action="store_true", help="rank the whole corpus")
    sp.add_argument("--corpus-out", dest="corpus_out", help="also save the item corpus")
    sp.set_defaults(func=cmd_retrieve)

    sp = common(sub.add_parser("ablate", help="run a grid of config variants"))
    sp.add_argument("--grid", help="YAML mapping of cell name -> dotted overrides")
    sp.add_argument("--seeds", help="comma-separated seeds (default: the run seed)")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except DatasetError as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except CheckpointError as exc:
        code, msg = EXIT_CHECKPOINT, f"checkpoint error: {exc}"
    except (NoPretrainPairsError, NonFiniteError, RetrievalError) as exc:
        code, msg = EXIT_RUNTIME, f"error: {exc}"
    print(f"sassrec: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
