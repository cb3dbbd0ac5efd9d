import json

import numpy as np
import pytest
import yaml
from helpers import tiny_config
from sassrec.checkpoint import load_checkpoint
from sassrec.cli import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_RUNTIME, main
from sassrec.dataset import load_records, write_records
from sassrec.pipeline import build_model
from sassrec.retrieval import ItemCorpus


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A tiny config plus generated data shared by the tests in this module."""
    d = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(pretrain__epochs=2, finetune__epochs=2)
    (d / "run.yaml").write_text(yaml.safe_dump(cfg.to_dict()), encoding="utf-8")
    assert main(["gen-data", "--config", str(d / "run.yaml"), "--out", str(d / "data.jsonl")]) == EXIT_OK
    return d


def run(work, *argv):
    return main([argv[0], "--config", str(work / "run.yaml"), *argv[1:]])


def data_args(work):
    return ["--data", str(work / "data.jsonl")]


def tensors(path):
    model, opt, head = load_checkpoint(path)
    return model.state_dict(), (opt.accumulators if opt else {}), head


def test_gen_data_is_byte_identical(work, tmp_path, capsys):
    out = tmp_path / "again.jsonl"
    assert run(work, "gen-data", "--out", str(out)) == EXIT_OK
    assert out.read_bytes() == (work / "data.jsonl").read_bytes()
    meta = "data.jsonl.meta.json"
    assert (tmp_path / "again.jsonl.meta.json").read_bytes() == (work / meta).read_bytes()
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["records"] == len(load_records(out))


def test_single_scenario_is_rejected(work, tmp_path, capsys):
    code = run(work, "gen-data", "--out", str(tmp_path / "x.jsonl"), "--set", "data.n_scenarios=1")
    assert code == EXIT_CONFIG
    assert "scenarios" in capsys.readouterr().err
    assert not (tmp_path / "x.jsonl").exists()


def test_flags_override_config(work, tmp_path):
    out = tmp_path / "ft.ckpt"
    argv = ["--out", str(out), "--gate-variant", "sigmoid_gate", "--layers", "1", "--beta", "0.5", "--seed", "7"]
    assert run(work, "finetune", *data_args(work), *argv, "--set", "finetune.epochs=0") == EXIT_OK
    _, _, head = tensors(out)
    cfg = head["meta"]["config"]
    assert cfg["model"]["gate"] == "sigmoid_gate" and cfg["model"]["depth"] == 1
    assert cfg["finetune"]["beta"] == 0.5 and cfg["seed"] == 7
    assert head["architecture"]["config"]["depth"] == 1


def test_zero_epochs_saves_initial_weights(work, tmp_path):
    out = tmp_path / "init.ckpt"
    assert run(work, "finetune", *data_args(work), "--out", str(out), "--set", "finetune.epochs=0") == EXIT_OK
    cfg = tiny_config(pretrain__epochs=2, finetune__epochs=0)
    ref = build_model(cfg, load_records(work / "data.jsonl")).state_dict()
    got, _, _ = tensors(out)
    assert set(got) == set(ref)
    for k in ref:
        np.testing.assert_array_equal(got[k], ref[k])


def test_train_eval_report_is_deterministic(work, tmp_path, capsys):
    for tag in ("a", "b"):
        pre, ft = tmp_path / f"pre_{tag}.ckpt", tmp_path / f"ft_{tag}.ckpt"
        assert run(work, "pretrain", *data_args(work), "--out", str(pre), "--stats", str(tmp_path / f"ps_{tag}")) == 0
        assert run(work, "finetune", *data_args(work), "--pretrained", str(pre), "--out", str(ft)) == 0
        assert run(work, "eval", *data_args(work), "--checkpoint", str(ft), "--out", str(tmp_path / f"rep_{tag}")) == 0
    assert (tmp_path / "ft_a.ckpt").read_bytes() == (tmp_path / "ft_b.ckpt").read_bytes()
    assert (tmp_path / "rep_a").read_bytes() == (tmp_path / "rep_b").read_bytes()
    lines = [json.loads(x) for x in (tmp_path / "rep_a").read_text().splitlines()]
    assert [r["scenario"] for r in lines] == [0, 1, 2, 3]
    assert all(0 <= r["hr"] <= 1 and r["k"] == 20 for r in lines)
    stats = [json.loads(x) for x in (tmp_path / "ps_a").read_text().splitlines()]
    assert [s["epoch"] for s in stats] == [0, 1] and all(s["stage"] == "pretrain" for s in stats)
    # finetune stats went to stdout as JSON lines
    out = [json.loads(x) for x in capsys.readouterr().out.splitlines() if x.startswith("{\"epoch")]
    assert {s["stage"] for s in out} == {"finetune"}


def test_pretrain_resume_matches_uninterrupted(work, tmp_path):
    full, half, resumed = tmp_path / "full.ckpt", tmp_path / "half.ckpt", tmp_path / "resumed.ckpt"
    assert run(work, "pretrain", *data_args(work), "--out", str(full), "--stats", str(tmp_path / "s")) == 0
    one = ["--set", "pretrain.epochs=1"]
    assert run(work, "pretrain", *data_args(work), "--out", str(half), "--stats", str(tmp_path / "s"), *one) == 0
    assert tensors(half)[2]["meta"]["epochs_done"] == 1
    argv = ["--resume", str(half), "--out", str(resumed), "--stats", str(tmp_path / "s")]
    assert run(work, "pretrain", *data_args(work), *argv) == 0
    a, b = tensors(full), tensors(resumed)
    for k in a[0]:
        np.testing.assert_array_equal(a[0][k], b[0][k])
    for k in a[1]:
        np.testing.assert_array_equal(a[1][k], b[1][k])
    assert b[2]["meta"]["epochs_done"] == 2


def test_resume_rejects_finetune_checkpoint(work, tmp_path):
    ft = tmp_path / "ft.ckpt"
    assert run(work, "finetune", *data_args(work), "--out", str(ft), "--set", "finetune.epochs=0") == 0
    code = run(work, "pretrain", *data_args(work), "--resume", str(ft), "--out", str(tmp_path / "x"))
    assert code == EXIT_CHECKPOINT


def test_no_pretrain_pairs(work, tmp_path, capsys):
    ds = load_records(work / "data.jsonl")
    only = ds.subset(ds.scenario == 0)
    write_records(only, tmp_path / "one.jsonl", write_truth=False)
    code = run(work, "pretrain", "--data", str(tmp_path / "one.jsonl"), "--out", str(tmp_path / "p.ckpt"))
    assert code == EXIT_RUNTIME
    assert "no pretrain pairs" in capsys.readouterr().err
    assert not (tmp_path / "p.ckpt").exists()


def test_oracle_beats_trained_model(work, tmp_path):
    ft = tmp_path / "ft.ckpt"
    assert run(work, "finetune", *data_args(work), "--out", str(ft), "--stats", str(tmp_path / "s")) == 0
    assert run(work, "eval", *data_args(work), "--checkpoint", str(ft), "--out", str(tmp_path / "m")) == 0
    assert run(work, "eval", *data_args(work), "--oracle", "--out", str(tmp_path / "o")) == 0

    def mean_ndcg(p):
        return np.mean([json.loads(x)["ndcg"] for x in p.read_text().splitlines()])

    assert mean_ndcg(tmp_path / "o") > mean_ndcg(tmp_path / "m")


def test_oracle_needs_truth(work, tmp_path, capsys):
    ds = load_records(work / "data.jsonl")
    write_records(ds, tmp_path / "nt.jsonl", write_truth=False)
    assert run(work, "eval", "--data", str(tmp_path / "nt.jsonl"), "--oracle") == EXIT_DATA


def test_retrieve_full_ranking(work, tmp_path, capsys):
    ft = tmp_path / "ft.ckpt"
    assert run(work, "finetune", *data_args(work), "--out", str(ft), "--stats", str(tmp_path / "s")) == 0
    capsys.readouterr()
    argv = ["--checkpoint", str(ft), "--scenario", "1", "--user", "3", "--all", "--corpus-out", str(tmp_path / "c")]
    assert run(work, "retrieve", *data_args(work), *argv) == EXIT_OK
    rec = json.loads(capsys.readouterr().out.splitlines()[0])
    corpus = ItemCorpus.load(tmp_path / "c")
    assert sorted(rec["items"]) == corpus.item_ids.tolist()
    scores = np.array(rec["scores"])
    assert np.all(np.diff(scores) <= 0)
    # the top-5 call returns the head of the full ranking
    assert run(work, "retrieve", *data_args(work), "--checkpoint", str(ft), "--scenario", "1", "--user", "3", "--k", "5") == 0
    head = json.loads(capsys.readouterr().out.splitlines()[0])
    assert head["items"] == rec["items"][:5]


def test_retrieve_errors(work, tmp_path):
    ft = tmp_path / "ft.ckpt"
    assert run(work, "finetune", *data_args(work), "--out", str(ft), "--set", "finetune.epochs=0") == 0
    base = ["--checkpoint", str(ft), "--user", "3"]
    assert run(work, "retrieve", *data_args(work), *base, "--scenario", "9") == EXIT_DATA
    assert run(work, "retrieve", *data_args(work), *base, "--scenario", "0", "--k", "100000") == EXIT_RUNTIME
    assert run(work, "retrieve", *data_args(work), "--checkpoint", str(ft), "--user", "-1", "--scenario", "0") == EXIT_DATA


def test_one_cell_ablate_equals_finetune_then_eval(work, tmp_path):
    pre, ft = tmp_path / "pre.ckpt", tmp_path / "ft.ckpt"
    assert run(work, "pretrain", *data_args(work), "--out", str(pre), "--stats", str(tmp_path / "s")) == 0
    assert run(work, "finetune", *data_args(work), "--pretrained", str(pre), "--out", str(ft), "--stats", str(tmp_path / "s")) == 0
    assert run(work, "eval", *data_args(work), "--checkpoint", str(ft), "--out", str(tmp_path / "rep")) == 0
    (tmp_path / "grid.yaml").write_text("only:\n  pretrain.enabled: true\n")
    assert run(work, "ablate", *data_args(work), "--grid", str(tmp_path / "grid.yaml"), "--out", str(tmp_path / "abl")) == 0
    row = json.loads((tmp_path / "abl").read_text())
    rep = [json.loads(x) for x in (tmp_path / "rep").read_text().splitlines()]
    for r in rep:
        m = row["metrics"][str(r["scenario"])]
        assert m["hr"] == r["hr"] and m["ndcg"] == r["ndcg"]


def test_ablate_failing_cell_keeps_going(work, tmp_path):
    grid = {"good": {"pretrain.enabled": False, "finetune.epochs": 1}, "bad": {"model.gate": "nonsense"}}
    (tmp_path / "grid.yaml").write_text(yaml.safe_dump(grid, sort_keys=False))
    argv = ["--grid", str(tmp_path / "grid.yaml"), "--out", str(tmp_path / "abl"), "--seeds", "0,1"]
    assert run(work, "ablate", *data_args(work), *argv) == EXIT_RUNTIME
    rows = [json.loads(x) for x in (tmp_path / "abl").read_text().splitlines()]
    assert [(r["variant"], r["seed"], r["status"]) for r in rows] == [
        ("good", 0, "ok"), ("bad", 0, "failed"), ("good", 1, "ok"), ("bad", 1, "failed"),
    ]


@pytest.mark.parametrize(
    "argv, code",
    [
        (["eval", "--data", "missing.jsonl", "--oracle"], EXIT_DATA),
        (["eval", "--oracle"], EXIT_CONFIG),
        (["eval", "--oracle", "--set", "model.nope=1"], EXIT_CONFIG),
        (["eval", "--oracle", "--set", "novalue"], EXIT_CONFIG),
        (["eval", "--oracle", "--config", "missing.yaml"], EXIT_CONFIG),
        (["ablate", "--seeds", "a,b"], EXIT_CONFIG),
    ],
)
def test_usage_errors(work, argv, code, monkeypatch):
    monkeypatch.chdir(work)
    if "--config" not in argv:
        argv = [argv[0], "--config", "run.yaml", *argv[1:]]
    if argv[0] == "eval" and "--data" not in argv and "--set" in argv:
        argv += ["--data", "data.jsonl"]
    assert main(argv) == code


def test_missing_and_corrupt_checkpoint(work, tmp_path):
    assert run(work, "eval", *data_args(work), "--checkpoint", str(tmp_path / "none.ckpt")) == EXIT_CHECKPOINT
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    assert run(work, "eval", *data_args(work), "--checkpoint", str(bad)) == EXIT_CHECKPOINT
    code = run(work, "finetune", *data_args(work), "--pretrained", str(bad), "--out", str(tmp_path / "x"))
    assert code == EXIT_CHECKPOINT


def test_checkpoint_schema_mismatch(work, tmp_path):
    ft = tmp_path / "ft.ckpt"
    assert run(work, "finetune", *data_args(work), "--out", str(ft), "--set", "finetune.epochs=0") == 0
    code = run(work, "eval", *data_args(work), "--checkpoint", str(ft), "--set", "features.id_dim=5")
    assert code == EXIT_CHECKPOINT
    code = run(work, "finetune", *data_args(work), "--pretrained", str(ft), "--layers", "3", "--out", str(tmp_path / "y"))
    assert code == EXIT_CHECKPOINT


def test_argparse_usage_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_CONFIG
