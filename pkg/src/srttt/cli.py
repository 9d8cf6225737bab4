"""Command-line entry point: ``srttt {train,eval,niah,inspect-cache,plot}``.

Exit codes: 0 success, 1 usage, 2 config, 3 runtime. Failures print one JSON
line ``{"error": kind, "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .data import gen_corpus, load_text_source, make_sample, tokenize
from .evaluate import (
    DepthResult,
    EvalReport,
    diagnostics,
    emit_report,
    eval_seed,
    exact_match_eval,
    extrapolation_probe,
    perplexity,
    trace_records,
)
from .model import CACHE_DISABLED, CACHE_ENABLED
from .train import load_checkpoint, run_curriculum

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fail(kind: str, msg: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": str(msg)}), file=sys.stderr)
    return code


def _depths(text: str) -> list[float]:
    try:
        ds = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--depths expects comma-separated floats, got {text!r}") from None
    if not ds:
        raise UsageError("--depths needs at least one value, e.g. --depths 0.25,0.5")
    return ds


def _mode(arg: str, run_cfg, step: int) -> str:
    if arg == "enabled":
        return CACHE_ENABLED
    if arg == "disabled":
        return CACHE_DISABLED
    # auto: a checkpoint that never reached stage 2 is a pure TTT baseline
    return CACHE_ENABLED if step > run_cfg.train.stage2_start else CACHE_DISABLED


def _load(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, _, step, run_cfg = load_checkpoint(ckpt)
    return model, step, run_cfg


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.preset, args.set or [])
    if args.baseline:
        cfg.train.stage2_start = cfg.train.total_steps
    if args.out:
        cfg.out_dir = args.out
    source = load_text_source(args.text) if args.text else None
    _, metrics = run_curriculum(cfg, cfg.out_dir, resume=not args.no_resume, source=source)
    last = metrics[-1] if metrics else {}
    print(json.dumps({"out_dir": cfg.out_dir, "steps": len(metrics), "final_loss": last.get("loss")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    given = _depths(args.depths) if args.depths else None
    model, step, run_cfg = _load(args)
    mode = _mode(args.mode, run_cfg, step)
    seq_len = args.seq_len or run_cfg.train.seq_len
    depths = given or run_cfg.eval.depths
    n = args.samples or run_cfg.eval.n_samples
    tag = args.tag or Path(args.checkpoint).parent.name
    rep = exact_match_eval(model, depths, n, seq_len, run_cfg.eval.seed, mode, tag)
    held_out = tokenize(gen_corpus(eval_seed(run_cfg.eval.seed, 999, 0), 4 * seq_len))
    rep.perplexity = perplexity(model, held_out, mode, window=seq_len)
    paths = emit_report([rep], args.out or Path(args.checkpoint).parent / "eval")
    _print_report(rep)
    print(json.dumps({"written": [str(p) for p in paths]}))
    return EXIT_OK


def cmd_niah(args) -> int:
    given = _depths(args.depths) if args.depths else None
    model, step, run_cfg = _load(args)
    mode = _mode(args.mode, run_cfg, step)
    train_len = run_cfg.train.seq_len
    depths = given or run_cfg.eval.depths
    n = args.samples or run_cfg.eval.n_samples
    tag = args.tag or Path(args.checkpoint).parent.name
    reps = [exact_match_eval(model, depths, n, train_len, run_cfg.eval.seed, mode, tag)]
    factor = args.factor if args.factor is not None else run_cfg.eval.extrapolation_factor
    if factor != 1:
        reps.append(extrapolation_probe(model, train_len, factor, depths, n, run_cfg.eval.seed, mode, tag))
    paths = emit_report(reps, args.out or Path(args.checkpoint).parent / "niah")
    for r in reps:
        _print_report(r)
    print(json.dumps({"written": [str(p) for p in paths]}))
    return EXIT_OK


def cmd_inspect_cache(args) -> int:
    model, step, run_cfg = _load(args)
    mode = _mode(args.mode, run_cfg, step)
    sample = make_sample(args.seed, args.depth, args.seq_len or run_cfg.train.seq_len)
    diag = diagnostics(model, sample, mode)
    out = Path(args.out) if args.out else None
    fh = open(out, "w") if out else sys.stdout
    try:
        for rec in trace_records(diag):
            fh.write(json.dumps(rec) + "\n")
    finally:
        if out:
            fh.close()
    summary = {
        "needle_code": sample.needle_code,
        "code_span": list(sample.code_span),
        "needle_captured": [d["needle_captured"] for d in diag],
        "final_occupancy": [d["final_occupancy"] for d in diag],
        "alpha": [d["alpha"] for d in diag],
    }
    print(json.dumps(summary), file=sys.stderr if out is None else sys.stdout)
    for d in diag:
        print(f"# layer {d['layer']}", file=sys.stderr if out is None else sys.stdout)
        print(d["cache_dump"], end="", file=sys.stderr if out is None else sys.stdout)
    return EXIT_OK


def _report_from_dict(d: dict) -> EvalReport:
    rows = [DepthResult(r["depth"], r["n_samples"], r["successes"], r["captured"], r["successes_captured"]) for r in d["rows"]]
    return EvalReport(
        d["model_tag"], d["seq_len"], d["mode"], rows, d.get("perplexity"), d.get("mean_alpha", []),
        d.get("cache_occupancy", []), d.get("routed_fraction", []),
    )


def cmd_plot(args) -> int:
    reps = []
    for path in args.reports:
        for ln in Path(path).read_text().splitlines():
            if ln.strip():
                reps.append(_report_from_dict(json.loads(ln)))
    metrics = {}
    for run in args.metrics or []:
        p = Path(run) / "metrics.jsonl"
        metrics[Path(run).name] = [json.loads(ln) for ln in p.read_text().splitlines() if ln.strip()]
    paths = emit_report(reps, args.out, metrics_by_tag=metrics or None)
    print(json.dumps({"written": [str(p) for p in paths]}))
    return EXIT_OK


def _print_report(rep: EvalReport):
    print(f"[{rep.model_tag}] seq_len={rep.seq_len} mode={rep.mode}")
    for r in rep.rows:
        print(f"  depth {r.depth:.2f}: exact match {r.exact_match:.3f} ({r.successes}/{r.n_samples}), needle captured {r.captured}/{r.n_samples}")
    if rep.perplexity is not None:
        print(f"  perplexity {rep.perplexity:.3f}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="srttt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the two-stage curriculum (or a stage-1-only baseline)")
    t.add_argument("--config", help="key = value config file (SRTTT_CONFIG_DIR is searched for relative paths)")
    t.add_argument("--preset", choices=["desk", "paper"], help="base preset (default: desk, or the file's preset key)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. --set train.seed=1")
    t.add_argument("--baseline", action="store_true", help="stage 1 only: pure TTT baseline")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--text", help="optional UTF-8 text file (one story per line) used as background")
    t.add_argument("--no-resume", action="store_true", help="ignore an existing latest.ckpt")
    t.set_defaults(fn=cmd_train)

    def common(p):
        p.add_argument("--checkpoint", required=True, help="checkpoint file")
        p.add_argument("--mode", choices=["auto", "enabled", "disabled"], default="auto", help="cache mode (auto: by checkpoint stage)")
        p.add_argument("--seq-len", type=int, help="evaluation length (default: training length)")
        p.add_argument("--tag", help="model tag in reports (default: checkpoint directory name)")
        p.add_argument("--out", help="report directory")

    e = sub.add_parser("eval", help="exact match over depths plus held-out perplexity")
    common(e)
    e.add_argument("--depths", help="comma-separated needle depths")
    e.add_argument("--samples", type=int, help="samples per depth")
    e.set_defaults(fn=cmd_eval)

    n = sub.add_parser("niah", help="depth sweep plus extrapolation probe")
    common(n)
    n.add_argument("--depths", help="comma-separated needle depths")
    n.add_argument("--samples", type=int, help="samples per depth")
    n.add_argument("--factor", type=float, help="extrapolation factor (1 disables the probe)")
    n.set_defaults(fn=cmd_niah)

    i = sub.add_parser("inspect-cache", help="replay one sample and emit the per-token routing trace")
    common(i)
    i.add_argument("--depth", type=float, default=0.5, help="needle depth")
    i.add_argument("--seed", type=int, default=7, help="sample seed")
    i.set_defaults(fn=cmd_inspect_cache)

    pl = sub.add_parser("plot", help="render report files from report.jsonl and metrics logs")
    pl.add_argument("--reports", nargs="+", required=True, help="report.jsonl files")
    pl.add_argument("--metrics", nargs="*", help="run directories holding metrics.jsonl")
    pl.add_argument("--out", required=True, help="output directory")
    pl.set_defaults(fn=cmd_plot)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except UsageError as e:
        return _fail("usage", e, EXIT_USAGE)
    except SystemExit as e:  # --help
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        return _fail("usage", e, EXIT_USAGE)
    except (ConfigError, CheckpointError) as e:
        return _fail("config", e, EXIT_CONFIG)
    except FileNotFoundError as e:
        return _fail("config", e, EXIT_CONFIG)
    except (OSError, ValueError, FloatingPointError, KeyError) as e:
        return _fail("runtime", e, EXIT_RUNTIME)



def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
