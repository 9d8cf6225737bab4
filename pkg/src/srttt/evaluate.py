"""Needle-in-a-haystack exact match, perplexity, diagnostics and report files."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .data import STREAM_EVAL, NEEDLE_LEN, detokenize, make_sample, rng_for
from .model import CACHE_DISABLED, CACHE_ENABLED, SRTTTModel

REPORT_SCHEMA = 1
# reference values at 2048 tokens, 15.8M parameters; never asserted at desk scale
PUBLISHED_REFERENCE = {
    "baseline": {0.5: 0.10, 0.75: 0.17},
    "srttt": {0.5: 0.33, 0.75: 0.37},
    "extrapolation_4096": {"baseline": 0.0, "srttt": 0.0},
    "gate_alpha_deep_layers": 0.10,
}


@dataclass
class DepthResult:
    depth: float
    n_samples: int
    successes: int
    captured: int  # samples where some layer routed a needle code token
    successes_captured: int

    @property
    def exact_match(self) -> float:
        return self.successes / self.n_samples


@dataclass
class EvalReport:
    model_tag: str
    seq_len: int
    mode: str
    rows: list[DepthResult]
    perplexity: float | None = None
    mean_alpha: list[float] = field(default_factory=list)
    cache_occupancy: list[float] = field(default_factory=list)
    routed_fraction: list[float] = field(default_factory=list)
    samples: list[dict] = field(default_factory=list)

    def exact_match(self, depth: float) -> float:
        for r in self.rows:
            if math.isclose(r.depth, depth):
                return r.exact_match
        raise KeyError(depth)

    def to_dict(self) -> dict:
        d = asdict(self)
        for r, rd in zip(self.rows, d["rows"]):
            rd["exact_match"] = r.exact_match
        d["schema"] = REPORT_SCHEMA
        return d


def eval_seed(seed: int, depth_index: int, i: int) -> int:
    """Sample seeds live in [2**31, 2**32); training draws from [0, 2**31)."""
    return int(rng_for(seed, STREAM_EVAL, depth_index, i).integers(2**31, 2**32))


def greedy_decode(model: SRTTTModel, context, n: int, mode: str) -> tuple[list[int], list]:
    toks = list(context)
    aux = []
    with ag.no_grad():
        for _ in range(n):
            logits, aux = model.forward(toks, mode)
            toks.append(int(np.argmax(logits.data[-1])))
    return toks[len(context) :], aux


def score_sample(model: SRTTTModel, sample, mode: str) -> dict:
    out, aux = greedy_decode(model, sample.context, NEEDLE_LEN, mode)
    decoded = detokenize(out)
    c0, c1 = sample.code_span
    captured = [bool(a.routed[c0:c1].any()) for a in aux]
    return {
        "seed": sample.seed,
        "depth": sample.depth,
        "needle_code": sample.needle_code,
        "decoded": decoded,
        # exact, case-sensitive, whole-code equality; a short decode scores 0
        "success": len(out) == NEEDLE_LEN and decoded == sample.needle_code,
        "captured_layers": captured,
        "occupancy": [len(a.cache) for a in aux],
        "routed_fraction": [float(a.routed.mean()) for a in aux],
    }


def exact_match_eval(
    model: SRTTTModel,
    depths,
    n_samples: int = 30,
    seq_len: int = 256,
    seed: int = 1_000_003,
    mode: str = CACHE_ENABLED,
    tag: str = "model",
    source=None,
) -> EvalReport:
    depths = list(depths)
    if not depths:
        raise ValueError("at least one depth is required (e.g. --depths 0.25,0.5)")
    rows, samples = [], []
    for di, depth in enumerate(depths):
        recs = []
        for i in range(n_samples):
            s = make_sample(eval_seed(seed, di, i), depth, seq_len, source)
            recs.append(score_sample(model, s, mode))
        samples += recs
        rows.append(
            DepthResult(
                depth=float(depth),
                n_samples=n_samples,
                successes=sum(r["success"] for r in recs),
                captured=sum(any(r["captured_layers"]) for r in recs),
                successes_captured=sum(r["success"] and any(r["captured_layers"]) for r in recs),
            )
        )
    nl = model.cfg.n_layers
    return EvalReport(
        model_tag=tag,
        seq_len=seq_len,
        mode=mode,
        rows=rows,
        mean_alpha=[float(np.mean(a)) for a in model.alphas()] if mode == CACHE_ENABLED else [0.0] * nl,
        cache_occupancy=[float(np.mean([r["occupancy"][i] for r in samples])) for i in range(nl)],
        routed_fraction=[float(np.mean([r["routed_fraction"][i] for r in samples])) for i in range(nl)],
        samples=samples,
    )


def perplexity(model: SRTTTModel, tokens, mode: str = CACHE_ENABLED, window: int | None = None) -> float:
    """exp(mean next-token cross-entropy), over consecutive windows of at most ``window`` tokens."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) < 2:
        raise ValueError("need at least two tokens")
    window = window or model.cfg.max_seq_len
    total, count = 0.0, 0
    with ag.no_grad():
        for start in range(0, len(tokens) - 1, window):
            chunk = tokens[start : start + window + 1]
            if len(chunk) < 2:
                break
            logits, _ = model.forward(chunk[:-1], mode)
            total += ag.cross_entropy(logits, chunk[1:]).item() * (len(chunk) - 1)
            count += len(chunk) - 1
    return math.exp(total / count)


def extrapolation_probe(model: SRTTTModel, train_len: int, factor: float, depths, n_samples=30, seed=1_000_003, mode=CACHE_ENABLED, tag="model") -> EvalReport:
    if factor < 1:
        raise ValueError("factor must be >= 1")
    return exact_match_eval(model, depths, n_samples, int(round(factor * train_len)), seed, mode, tag)


def diagnostics(model: SRTTTModel, sample, mode: str = CACHE_ENABLED) -> list[dict]:
    """Per-layer trace over the sample's context."""
    with ag.no_grad():
        _, aux = model.forward(sample.context, mode)
    c0, c1 = sample.code_span
    out = []
    for i, a in enumerate(aux):
        out.append(
            {
                "layer": i,
                "tau_ema": a.tau_trace.tolist(),
                "losses": a.losses.tolist(),
                "chunk_loss": a.chunk_loss.tolist(),
                "routed": a.routed.tolist(),
                "occupancy": a.occupancy.tolist(),
                "final_occupancy": len(a.cache),
                "alpha": np.asarray(a.alpha).tolist() if mode == CACHE_ENABLED else [0.0] * model.cfg.n_heads,
                "needle_captured": bool(a.routed[c0:c1].any()),
                "cache_dump": a.cache.dump(),
            }
        )
    return out


def trace_records(diag: list[dict]):
    """Flatten diagnostics into per-token routing-trace records."""
    for layer in diag:
        for t, (lt, cl, tau, r) in enumerate(zip(layer["losses"], layer["chunk_loss"], layer["tau_ema"], layer["routed"])):
            yield {"layer": layer["layer"], "position": t, "loss": lt, "chunk_loss": cl, "tau_ema": tau, "routed": r}


# ---------------------------------------------------------------- report files

TABLE_HEADER = ["model_tag", "seq_len", "mode", "depth", "n_samples", "successes", "exact_match", "captured"]


def report_table(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for rep in reports:
        for r in rep.rows:
            w.writerow([rep.model_tag, rep.seq_len, rep.mode, r.depth, r.n_samples, r.successes, f"{r.exact_match:.6f}", r.captured])
    return buf.getvalue()


def parse_table(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        r["depth"] = float(r["depth"])
        r["exact_match"] = float(r["exact_match"])
        for k in ("seq_len", "n_samples", "successes", "captured"):
            r[k] = int(r[k])
    return rows


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "srttt"
    plt.rcParams["svg.fonttype"] = "path"
    return plt


def plot_exact_match(reports, path):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    depths = sorted({r.depth for rep in reports for r in rep.rows})
    width = 0.8 / max(1, len(reports))
    for j, rep in enumerate(reports):
        em = {r.depth: r.exact_match for r in rep.rows}
        xs = [i + j * width for i, d in enumerate(depths) if d in em]
        ax.bar(xs, [em[d] for d in depths if d in em], width, label=f"{rep.model_tag} ({rep.seq_len})")
    ax.set_xticks([i + width * (len(reports) - 1) / 2 for i in range(len(depths))])
    ax.set_xticklabels([f"{d:.2f}" for d in depths])
    ax.set_xlabel("needle depth")
    ax.set_ylabel("exact match")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_training(metrics_by_tag: dict[str, list[dict]], path, smooth: int = 50):
    plt = _plt()
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    for tag, recs in metrics_by_tag.items():
        steps = np.array([r["step"] for r in recs])
        loss = np.array([r["loss"] for r in recs])
        k = max(1, min(smooth, len(loss)))
        sm = np.convolve(loss, np.ones(k) / k, mode="valid")
        ax1.plot(steps[k - 1 :], sm, label=tag, lw=1)
        alphas = np.array([r["mean_alpha"] for r in recs])
        for li in range(alphas.shape[1]):
            ax2.plot(steps, alphas[:, li], lw=1, label=f"{tag} layer {li}")
    ax1.set_ylabel("train loss")
    ax1.legend(fontsize=8)
    ax2.set_ylabel("mean alpha")
    ax2.set_xlabel("step")
    ax2.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_report(reports, out_dir, formats=("table", "structured-lines", "vector-plot"), metrics_by_tag=None) -> list[Path]:
    """Write the report files; returns the written paths."""
    reports = list(reports)
    if not reports or not any(rep.rows for rep in reports):
        raise ValueError("empty report: evaluate at least one depth (e.g. niah --depths 0.5)")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write reports to {out}: {e}") from e
    written = []
    if "table" in formats:
        p = out / "exact_match.csv"
        p.write_text(report_table(reports))
        written.append(p)
    if "structured-lines" in formats:
        p = out / "report.jsonl"
        with open(p, "w") as fh:
            for rep in reports:
                d = rep.to_dict()
                d["published_reference"] = {k: {str(kk): vv for kk, vv in v.items()} if isinstance(v, dict) else v for k, v in PUBLISHED_REFERENCE.items()}
                fh.write(json.dumps(d, sort_keys=True) + "\n")
        written.append(p)
    if "vector-plot" in formats:
        p = out / "exact_match.svg"
        plot_exact_match(reports, p)
        written.append(p)
        if metrics_by_tag:
            p = out / "training.svg"
            plot_training(metrics_by_tag, p)
            written.append(p)
    return written
