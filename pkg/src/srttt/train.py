"""Two-stage curriculum: backbone pretraining, then frozen-backbone gate training."""

from __future__ import annotations

import enum
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoint
from .config import ConfigError, RunConfig, TrainConfig, config_from_dict
from .data import training_sequence
from .model import CACHE_DISABLED, CACHE_ENABLED, SRTTTModel

log = logging.getLogger(__name__)

METRICS_SCHEMA = 1


class Stage(enum.Enum):
    STAGE1 = 1
    STAGE2 = 2


def stage_of(step: int, cfg: TrainConfig) -> Stage:
    if not 1 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [1, {cfg.total_steps}]")
    return Stage.STAGE1 if step <= cfg.stage2_start else Stage.STAGE2


class AdamW:
    """Adam with decoupled weight decay; decay only touches matrices."""

    def __init__(self, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "AdamW":
        return cls(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    def step(self, params: dict, grads: dict[str, np.ndarray], lr: float):
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            if self.weight_decay and p.data.ndim >= 2:
                p.data = p.data * (1 - lr * self.weight_decay)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.m:
            out[f"adam_m/{n}"] = self.m[n]
            out[f"adam_v/{n}"] = self.v[n]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], counts: dict[str, int]):
        self.m = {k.split("/", 1)[1]: v.copy() for k, v in tensors.items() if k.startswith("adam_m/")}
        self.v = {k.split("/", 1)[1]: v.copy() for k, v in tensors.items() if k.startswith("adam_v/")}
        self.t = dict(counts)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def lr_at(step: int, cfg: TrainConfig) -> float:
    stage_start = 0 if step <= cfg.stage2_start else cfg.stage2_start
    if cfg.warmup_steps == 0:
        return cfg.lr
    return cfg.lr * min(1.0, (step - stage_start) / cfg.warmup_steps)


def train_step(model: SRTTTModel, tokens, step: int, cfg: TrainConfig, opt: AdamW) -> dict:
    """One optimizer step on one sequence in the stage's mode.

    Stage 1 trains the backbone with the cache off; Stage 2 trains only the
    gates and the cache read-out projection with the cache on.
    """
    stage = stage_of(step, cfg)
    if stage is Stage.STAGE1:
        names, mode = model.backbone_names(), CACHE_DISABLED
    else:
        names, mode = model.retrieval_names(), CACHE_ENABLED
    model.set_trainable(names)
    loss, aux = model.loss(tokens, mode)
    if not np.isfinite(loss.item()):
        raise FloatingPointError(
            f"non-finite loss at step {step}; per-layer mean reconstruction loss "
            f"{[float(np.mean(a.losses)) for a in aux]}"
        )
    if loss.requires_grad:
        ag.backward(loss)
    # nothing routed means no path to the gates: the step sees zero gradient
    grads = {n: model.params[n].grad if model.params[n].grad is not None else np.zeros_like(model.params[n].data) for n in names}
    gnorm = clip_global_norm(grads, cfg.grad_clip)
    opt.step(model.params, grads, lr_at(step, cfg))
    for n in names:
        model.params[n].grad = None
    return {
        "schema": METRICS_SCHEMA,
        "step": step,
        "stage": stage.value,
        "loss": loss.item(),
        "grad_norm": gnorm,
        "routed_tokens": [int(a.routed.sum()) for a in aux],
        "cache_insertions": [int(a.insertions) for a in aux],
        "mean_alpha": [float(np.mean(model.alphas()[i])) for i in range(len(aux))],
        "tau_ema": [float(a.surprisal.tau_ema) for a in aux],
    }


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: SRTTTModel, opt: AdamW, step: int, run_cfg: RunConfig):
    tensors = {f"param/{n}": t.data for n, t in model.params.items()}
    tensors.update(opt.state_tensors())
    meta = {
        "step": step,
        "config": run_cfg.to_dict(),
        "config_hash": run_cfg.hash(),
        "adam_t": opt.t,
    }
    checkpoint.save(path, tensors, meta)


def load_checkpoint(path) -> tuple[SRTTTModel, AdamW, int, RunConfig]:
    tensors, meta = checkpoint.load(path)
    run_cfg = config_from_dict(meta["config"])
    model = SRTTTModel(run_cfg.model, seed=run_cfg.train.seed)
    model.load_state_dict({k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("param/")})
    opt = AdamW.from_config(run_cfg.train)
    opt.load_state(tensors, meta["adam_t"])
    return model, opt, int(meta["step"]), run_cfg


# ---------------------------------------------------------------- curriculum


def _read_metrics(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    recs = [json.loads(ln) for ln in path.read_text().splitlines() if ln.strip()]
    return [r for r in recs if r["step"] <= upto]


def run_curriculum(run_cfg: RunConfig, out_dir=None, resume: bool = True, stop_at: int | None = None, source=None):
    """Train for ``total_steps``; returns (model, metrics list).

    Writes ``metrics.jsonl`` (one record per step), ``timing.jsonl``,
    ``latest.ckpt`` every ``checkpoint_every`` steps, ``stage1.ckpt`` at the
    stage boundary and ``final.ckpt``. With ``resume`` an existing
    ``latest.ckpt`` with the same config hash is continued; a different hash
    is refused. ``stop_at`` ends the run early (for interruption tests).
    """
    run_cfg.validate()
    tc = run_cfg.train
    out = Path(out_dir or run_cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    latest = out / "latest.ckpt"
    metrics_path = out / "metrics.jsonl"
    timing_path = out / "timing.jsonl"
    start = 0
    if resume and latest.exists():
        model, opt, start, saved_cfg = load_checkpoint(latest)
        if saved_cfg.hash() != run_cfg.hash():
            raise ConfigError(f"{latest}: config hash {saved_cfg.hash()} does not match {run_cfg.hash()}")
        log.info("resuming from step %d", start)
    else:
        model = SRTTTModel(run_cfg.model, seed=tc.seed)
        opt = AdamW.from_config(tc)
    metrics = _read_metrics(metrics_path, start)
    with open(metrics_path, "w") as fh:
        for r in metrics:
            fh.write(json.dumps(r) + "\n")
    (out / "config.txt").write_text(_config_text(run_cfg))
    end = tc.total_steps if stop_at is None else min(stop_at, tc.total_steps)
    with open(metrics_path, "a") as mf, open(timing_path, "a") as tf:
        for step in range(start + 1, end + 1):
            t0 = time.perf_counter()
            tokens = training_sequence(tc.seed, step, tc.seq_len, tc.needle_mix_fraction, source)
            rec = train_step(model, tokens, step, tc, opt)
            wall = (time.perf_counter() - t0) * 1000
            # wall time breaks bitwise-reproducible logs, so it is opt-in
            rec["wall_ms"] = round(wall, 3) if tc.log_wall_time else None
            mf.write(json.dumps(rec) + "\n")
            tf.write(json.dumps({"step": step, "wall_ms": round(wall, 3)}) + "\n")
            metrics.append(rec)
            if step == tc.stage2_start:
                save_checkpoint(out / "stage1.ckpt", model, opt, step, run_cfg)
            if step % tc.checkpoint_every == 0 or step == end:
                mf.flush()
                save_checkpoint(latest, model, opt, step, run_cfg)
            if step % 100 == 0:
                log.info("step %d stage %d loss %.4f alpha %s", step, rec["stage"], rec["loss"], rec["mean_alpha"])
    if end == tc.total_steps:
        save_checkpoint(out / "final.ckpt", model, opt, end, run_cfg)
    return model, metrics


def _config_text(cfg: RunConfig) -> str:
    from .config import dump_config

    return dump_config(cfg)
