"""Loss-gated routing of incompressible tokens.

A token is flagged when its reconstruction loss beats an EMA-smoothed
percentile threshold *and* the mean loss of its fixed chunk beats a fraction
of that threshold. Decisions for a chunk use the threshold from before the
chunk; the chunk's losses are folded into the threshold afterwards.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


@dataclass
class SurprisalState:
    tau_ema: float = 0.0
    ema_decay: float = 0.99
    percentile: float = 0.95
    chunk_size: int = 16
    chunk_factor: float = 0.8
    warmup_tokens: int = 32
    tokens_seen: int = 0
    initialized: bool = False

    @classmethod
    def from_config(cls, cfg) -> "SurprisalState":
        return cls(
            ema_decay=cfg.ema_decay,
            percentile=cfg.percentile,
            chunk_size=cfg.chunk_size,
            chunk_factor=cfg.chunk_factor,
            warmup_tokens=cfg.warmup_tokens,
        )

    def reset(self):
        self.tau_ema = 0.0
        self.tokens_seen = 0
        self.initialized = False


def percentile(values, p: float) -> float:
    """Linear-interpolation percentile: rank ``p*(n-1)`` over the sorted values."""
    if len(values) == 0:
        raise ValueError("percentile of an empty sequence")
    if not 0 < p < 1:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    xs = sorted(float(v) for v in values)
    r = p * (len(xs) - 1)
    lo = math.floor(r)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (r - lo) * (xs[hi] - xs[lo])


def update_threshold(state: SurprisalState, chunk_losses) -> float:
    q = percentile(chunk_losses, state.percentile)
    if not state.initialized:
        state.tau_ema = q
        state.initialized = True
    else:
        state.tau_ema = state.ema_decay * state.tau_ema + (1.0 - state.ema_decay) * q
    return state.tau_ema


def route(loss: float, chunk_loss: float, state: SurprisalState) -> bool:
    if state.tokens_seen < state.warmup_tokens or not state.initialized:
        return False
    return loss > state.tau_ema and chunk_loss > state.chunk_factor * state.tau_ema


def route_chunk(state: SurprisalState, losses) -> tuple[np.ndarray, float, float]:
    """Decide a whole chunk, then fold it into the threshold.

    Returns (flags, chunk mean loss, threshold used for the decisions).
    Warmup is counted per token: a token is eligible once ``warmup_tokens``
    tokens precede it.
    """
    losses = np.asarray(losses, dtype=np.float64)
    chunk_mean = float(losses.mean())
    tau_used = state.tau_ema
    flags = np.zeros(len(losses), dtype=bool)
    for i, lt in enumerate(losses):
        flags[i] = route(float(lt), chunk_mean, state)
        state.tokens_seen += 1
    update_threshold(state, losses)
    return flags, chunk_mean, tau_used


def route_stream(losses, state: SurprisalState, trace: list | None = None) -> np.ndarray:
    """Route a full loss stream chunk by chunk (a trailing partial chunk counts as a chunk)."""
    losses = np.asarray(losses, dtype=np.float64)
    flags = np.zeros(len(losses), dtype=bool)
    cs = state.chunk_size
    for start in range(0, len(losses), cs):
        f, cm, tau = route_chunk(state, losses[start : start + cs])
        flags[start : start + cs] = f
        if trace is not None:
            for i, (lt, fl) in enumerate(zip(losses[start : start + cs], f)):
                trace.append(
                    {"position": start + i, "loss": float(lt), "chunk_loss": cm, "tau_ema": tau, "routed": bool(fl)}
                )
    return flags


def write_trace(records, fh, **extra):
    """Emit routing-trace records as JSON lines."""
    for r in records:
        fh.write(json.dumps({**extra, **r}) + "\n")
