import json

import pytest

from srttt.cli import main

from helpers import brute_force_routing

TINY = [
    "model.n_layers=1", "model.d_model=16", "model.n_heads=2", "model.max_seq_len=512",
    "model.chunk_size=8", "model.warmup_tokens=16", "train.seq_len=96", "train.total_steps=12",
    "train.stage2_start=8", "train.checkpoint_every=6", "train.warmup_steps=2", "train.lr=3e-3",
]


def _err(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    sets = [a for kv in TINY for a in ("--set", kv)]
    assert main(["train", "--out", str(root / "srttt"), *sets]) == 0
    assert main(["train", "--baseline", "--out", str(root / "base"), *sets]) == 0
    return root


def test_usage_errors_exit_1(capsys):
    assert main(["frobnicate"]) == 1
    assert _err(capsys)["error"] == "usage"
    assert main([]) == 1
    assert main(["niah", "--checkpoint", "x", "--depths", "a,b"]) == 1


def test_help_lists_every_flag(capsys):
    assert main(["niah", "--help"]) == 0
    out = capsys.readouterr().out
    for flag in ("--checkpoint", "--mode", "--seq-len", "--depths", "--samples", "--factor", "--out", "--tag"):
        assert flag in out


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--set", "model.nope=1", "--out", str(tmp_path)]) == 2
    assert "nope" in _err(capsys)["message"]
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert "missing.cfg" in _err(capsys)["message"]
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt")]) == 2
    # schema violations are reported before any compute: nothing is written
    assert not any(tmp_path.iterdir())


def test_corrupt_checkpoint_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(bad)]) == 2
    assert _err(capsys)["error"] == "config"


def test_config_file_from_env_dir(tmp_path, monkeypatch, capsys):
    (tmp_path / "tiny.cfg").write_text("\n".join(kv.replace("=", " = ") for kv in TINY) + "\ntrain.total_steps = 4\ntrain.stage2_start = 4\n")
    monkeypatch.setenv("SRTTT_CONFIG_DIR", str(tmp_path))
    assert main(["train", "--config", "tiny.cfg", "--out", str(tmp_path / "run")]) == 0
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["steps"] == 4


def test_train_writes_artifacts(runs):
    for name in ("srttt", "base"):
        d = runs / name
        assert (d / "final.ckpt").is_file() and (d / "stage1.ckpt").is_file()
        assert len((d / "metrics.jsonl").read_text().splitlines()) == 12


def test_niah_two_rows_and_extrapolation(runs, capsys):
    out = runs / "niah"
    rc = main(["niah", "--checkpoint", str(runs / "srttt" / "final.ckpt"), "--depths", "0.5,0.75", "--samples", "2", "--factor", "2", "--out", str(out)])
    assert rc == 0
    reps = [json.loads(ln) for ln in (out / "report.jsonl").read_text().splitlines()]
    assert [r["seq_len"] for r in reps] == [96, 192]
    assert all(len(r["rows"]) == 2 and r["mode"] == "cache_enabled" for r in reps)


def test_eval_reports_share_schema(runs, capsys):
    keys = []
    for name in ("srttt", "base"):
        out = runs / f"eval_{name}"
        assert main(["eval", "--checkpoint", str(runs / name / "final.ckpt"), "--depths", "0.5", "--samples", "1", "--out", str(out)]) == 0
        rep = json.loads((out / "report.jsonl").read_text())
        assert rep["perplexity"] > 1
        keys.append(sorted(rep))
    assert keys[0] == keys[1]
    # auto mode: the baseline never reached stage 2
    assert json.loads((runs / "eval_base" / "report.jsonl").read_text())["mode"] == "cache_disabled"


def test_inspect_cache_trace_matches_router_oracle(runs, capsys):
    trace = runs / "trace.jsonl"
    ck = runs / "srttt" / "final.ckpt"
    assert main(["inspect-cache", "--checkpoint", str(ck), "--depth", "0.5", "--seed", "7", "--out", str(trace)]) == 0
    summary = json.loads(capsys.readouterr().out.splitlines()[0])
    assert len(summary["needle_captured"]) == 1 and len(summary["needle_code"]) == 8
    recs = [json.loads(ln) for ln in trace.read_text().splitlines()]
    losses = [r["loss"] for r in recs if r["layer"] == 0]
    routed = [r["routed"] for r in recs if r["layer"] == 0]
    assert routed == brute_force_routing(losses, chunk=8, warmup=16).tolist()
    c0, c1 = summary["code_span"]
    assert summary["needle_captured"][0] == any(routed[c0:c1])


def test_commands_are_deterministic(runs, capsys):
    outs = []
    for i in range(2):
        out = runs / f"det{i}"
        main(["niah", "--checkpoint", str(runs / "srttt" / "final.ckpt"), "--depths", "0.5", "--samples", "1", "--out", str(out)])
        outs.append([(out / n).read_bytes() for n in ("exact_match.csv", "report.jsonl", "exact_match.svg")])
    assert outs[0] == outs[1]


def test_plot_from_reports_and_metrics(runs, capsys):
    main(["niah", "--checkpoint", str(runs / "base" / "final.ckpt"), "--depths", "0.5", "--samples", "1", "--out", str(runs / "pb")])
    out = runs / "plots"
    rc = main(["plot", "--reports", str(runs / "pb" / "report.jsonl"), "--metrics", str(runs / "srttt"), str(runs / "base"), "--out", str(out)])
    assert rc == 0
    assert (out / "training.svg").is_file() and (out / "exact_match.svg").is_file()
