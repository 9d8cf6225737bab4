"""TTT language model with a loss-gated residual cache.

Each layer keeps per-head fast weights ``W`` (d_head x d_head) that are
trained online on the reconstruction loss ``||W k - v||^2``. Tokens whose loss
the surprisal filter flags have their post-RoPE key/value parked in a
bounded cache; a multi-head attention over that cache is mixed back into the
TTT output through a clamped gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .cache import CacheEntry, ResidualCache
from .config import ModelConfig
from .data import STREAM_INIT, rng_for
from .router import SurprisalState, route_chunk

CACHE_DISABLED = "cache_disabled"
CACHE_ENABLED = "cache_enabled"


class DivergenceError(FloatingPointError):
    pass


# ---------------------------------------------------------------- rotary


def rope_tables(positions, d_head: int, base: float = 10000.0):
    if d_head % 2:
        raise ValueError(f"rotary embedding needs an even head dim, got {d_head}")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.size and positions.min() < 0:
        raise ValueError("positions must be non-negative")
    inv_freq = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    ang = positions[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def rope_apply(x, positions, base: float = 10000.0):
    """Rotate feature pairs (2i, 2i+1) of ``x`` (seq, n_heads, d_head) by
    ``pos / base**(2i/d_head)``. Accepts a Tensor (differentiable) or array."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    cos, sin = rope_tables(positions, data.shape[-1], base)
    cos, sin = cos[:, None, :], sin[:, None, :]
    out = _rotate(data, cos, sin)
    if not isinstance(x, Tensor):
        return out

    def bwd(g):
        x._accum(_rotate(g, cos, -sin))

    return ag._make(out, (x,), "rope", bwd)


# ---------------------------------------------------------------- TTT inner loop


def ttt_inner_step(W: np.ndarray, k: np.ndarray, v: np.ndarray, eta: float):
    """One online step on ``||W k - v||^2``; returns (W', loss before the step)."""
    if eta <= 0:
        raise ValueError("inner learning rate must be positive")
    with np.errstate(over="ignore", invalid="ignore"):
        e = W @ k - v
        loss = float(e @ e)
        W_new = W - eta * 2.0 * np.outer(e, k)
    if not np.all(np.isfinite(W_new)):
        raise DivergenceError("fast weights became non-finite")
    return W_new, loss


def ttt_scan(q: Tensor, k: Tensor, v: Tensor, W0: Tensor, eta: float, layer: int = -1):
    """Run the per-token inner loop over a sequence for all heads at once.

    q, k, v: (seq, H, d); W0: (H, d, d). Returns (outputs Tensor (seq, H, d)
    read as ``W_t q_t`` after token t's update, per-head losses (seq, H),
    final fast weights (H, d, d)). The backward pass differentiates through
    the closed-form update, so earlier tokens receive gradient via the fast
    weights.
    """
    Q, K, V = q.data, k.data, v.data
    T, H, d = K.shape
    Ws = np.empty((T + 1, H, d, d))
    Ws[0] = W0.data
    E = np.empty((T, H, d))
    out = np.empty((T, H, d))
    c = 2.0 * eta
    W = Ws[0].copy()
    # finiteness is checked below, so overflow here is expected on divergence
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            kt = K[t]
            e = np.matmul(W, kt[:, :, None])[:, :, 0] - V[t]
            E[t] = e
            W -= c * e[:, :, None] * kt[:, None, :]
            Ws[t + 1] = W
            out[t] = np.matmul(W, Q[t][:, :, None])[:, :, 0]
        losses = np.sum(E * E, axis=-1)
    if not np.all(np.isfinite(Ws[-1])):
        bad = int(np.argmax(~np.all(np.isfinite(Ws[1:].reshape(T, -1)), axis=1)))
        raise DivergenceError(f"fast weights diverged in layer {layer} at position {bad}")

    def bwd(g):
        dW = np.zeros((H, d, d))
        dq = np.empty((T, H, d))
        dk = np.empty((T, H, d))
        dv = np.empty((T, H, d))
        for t in range(T - 1, -1, -1):
            gt, qt, kt, et = g[t], Q[t], K[t], E[t]
            dW += gt[:, :, None] * qt[:, None, :]
            dq[t] = np.matmul(np.swapaxes(Ws[t + 1], 1, 2), gt[:, :, None])[:, :, 0]
            de = -c * np.matmul(dW, kt[:, :, None])[:, :, 0]
            dk[t] = -c * np.matmul(np.swapaxes(dW, 1, 2), et[:, :, None])[:, :, 0] + np.matmul(
                np.swapaxes(Ws[t], 1, 2), de[:, :, None]
            )[:, :, 0]
            dv[t] = -de
            dW += de[:, :, None] * kt[:, None, :]
        if q.requires_grad:
            q._accum(dq)
        if k.requires_grad:
            k._accum(dk)
        if v.requires_grad:
            v._accum(dv)
        if W0.requires_grad:
            W0._accum(dW)

    return ag._make(out, (q, k, v, W0), "ttt_scan", bwd), losses, Ws[-1].copy()


# ---------------------------------------------------------------- cache retrieval


def cache_attention(q: np.ndarray, snapshot) -> np.ndarray:
    """Scaled dot-product attention of one query (H, d) over a cache snapshot."""
    H, d = q.shape
    if len(snapshot) == 0:
        return np.zeros((H, d))
    scores = np.einsum("hd,mhd->hm", q, snapshot.keys) / math.sqrt(d)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    return np.einsum("hm,mhd->hd", w, snapshot.values)


def masked_cache_attention(q: Tensor, keys: np.ndarray, values: np.ndarray, visible: np.ndarray):
    """Attention for every position at once; ``visible[t, e]`` says whether
    cache entry ``e`` is resident when token ``t`` queries. Keys/values are
    constants (detached history). Returns (Tensor (T, H, d), peak weight (T,))."""
    T, H, d = q.shape
    if keys.shape[0] == 0:
        return Tensor(np.zeros((T, H, d))), np.zeros(T)
    qh = ag.transpose(q, (1, 0, 2))  # H, T, d
    kh = Tensor(np.transpose(keys, (1, 2, 0)))  # H, d, m
    vh = Tensor(np.transpose(values, (1, 0, 2)))  # H, m, d
    scores = ag.scale(ag.matmul(qh, kh), 1.0 / math.sqrt(d))
    p = ag.softmax(scores, mask=visible[None, :, :])
    out = ag.transpose(ag.matmul(p, vh), (1, 0, 2))
    return out, p.data.max(axis=-1).mean(axis=0)


def gate_alpha(theta, alpha_max: float):
    if isinstance(theta, Tensor):
        return ag.clamp(theta, 0.0, alpha_max)
    return np.clip(np.asarray(theta, dtype=np.float64), 0.0, alpha_max)


def fuse(ttt_out, cache_out, theta, alpha_max: float):
    """Per-head ``ttt_out + clamp(theta, 0, alpha_max) * cache_out``.

    Arrays of shape (..., H, d) or flat (d_model,) with H = len(theta).
    """
    if isinstance(ttt_out, Tensor) or isinstance(cache_out, Tensor) or isinstance(theta, Tensor):
        alpha = gate_alpha(ag.as_tensor(theta), alpha_max)
        return ag.add(ttt_out, ag.mul(ag.reshape(alpha, (-1, 1)), cache_out))
    theta = np.asarray(theta, dtype=np.float64)
    t = np.asarray(ttt_out, dtype=np.float64)
    c = np.asarray(cache_out, dtype=np.float64)
    flat = t.ndim == 1
    if flat:
        t, c = t.reshape(len(theta), -1), c.reshape(len(theta), -1)
    out = t + gate_alpha(theta, alpha_max)[:, None] * c
    return out.reshape(-1) if flat else out


# ---------------------------------------------------------------- model


@dataclass
class LayerOutput:
    y: np.ndarray
    losses: np.ndarray  # (seq,) mean over heads
    routed: np.ndarray  # (seq,) bool
    hit_mass: np.ndarray  # (seq,) peak cache attention weight
    alpha: np.ndarray
    tau_trace: np.ndarray  # threshold used for each token's decision
    chunk_loss: np.ndarray
    cache: ResidualCache | None = None
    surprisal: SurprisalState | None = None
    insertions: int = 0
    occupancy: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    fast_weights: np.ndarray | None = None  # (H, d, d) after the last token


BACKBONE_LAYER_PARAMS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wq_prev", "wk_prev", "wv_prev", "w0", "tn_g", "tn_b", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")
RETRIEVAL_LAYER_PARAMS = ("theta_gate", "wc")


class SRTTTModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = rng_for(seed, STREAM_INIT)
        D, V, F = cfg.d_model, cfg.vocab_size, cfg.mlp_ratio * cfg.d_model
        H, dh = cfg.n_heads, cfg.d_head

        def normal(*shape, std=0.02):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        def const(arr):
            return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)

        p: dict[str, Tensor] = {"embed": normal(V, D)}
        for i in range(cfg.n_layers):
            p[f"l{i}.ln1_g"] = const(np.ones(D))
            p[f"l{i}.ln1_b"] = const(np.zeros(D))
            p[f"l{i}.wq"] = normal(D, D)
            p[f"l{i}.wk"] = normal(D, D)
            p[f"l{i}.wv"] = normal(D, D)
            if cfg.token_shift:
                for name in ("wq", "wk", "wv"):
                    p[f"l{i}.{name}_prev"] = normal(D, D)
            p[f"l{i}.w0"] = const(np.zeros((H, dh, dh)))
            if cfg.ttt_norm:
                p[f"l{i}.tn_g"] = const(np.ones(dh))
                p[f"l{i}.tn_b"] = const(np.zeros(dh))
            p[f"l{i}.wo"] = normal(D, D, std=0.02 / math.sqrt(2 * cfg.n_layers))
            p[f"l{i}.ln2_g"] = const(np.ones(D))
            p[f"l{i}.ln2_b"] = const(np.zeros(D))
            p[f"l{i}.w1"] = normal(D, F)
            p[f"l{i}.b1"] = const(np.zeros(F))
            p[f"l{i}.w2"] = normal(F, D, std=0.02 / math.sqrt(2 * cfg.n_layers))
            p[f"l{i}.b2"] = const(np.zeros(D))
            p[f"l{i}.theta_gate"] = const(np.full(H, cfg.gate_init))
            p[f"l{i}.wc"] = const(np.eye(D))
        p["lnf_g"] = const(np.ones(D))
        p["lnf_b"] = const(np.zeros(D))
        p["w_out"] = normal(D, V)
        p["b_out"] = const(np.zeros(V))
        self.params = p

    # parameter groups
    def retrieval_names(self) -> list[str]:
        return [n for n in self.params if n.split(".")[-1] in RETRIEVAL_LAYER_PARAMS]

    def backbone_names(self) -> list[str]:
        r = set(self.retrieval_names())
        return [n for n in self.params if n not in r]

    def num_parameters(self, names=None) -> int:
        names = self.params if names is None else names
        return int(sum(self.params[n].data.size for n in names))

    def parameter_report(self) -> dict:
        return {
            "total": self.num_parameters(),
            "backbone": self.num_parameters(self.backbone_names()),
            "retrieval": self.num_parameters(self.retrieval_names()),
        }

    def alphas(self) -> np.ndarray:
        return np.stack(
            [gate_alpha(self.params[f"l{i}.theta_gate"].data, self.cfg.alpha_max) for i in range(self.cfg.n_layers)]
        )

    def fast_state_size(self) -> int:
        c = self.cfg
        return c.n_layers * c.n_heads * c.d_head * c.d_head

    # forward
    def _route_and_cache(self, losses: np.ndarray, kd: np.ndarray, vd: np.ndarray, enabled: bool) -> dict:
        """Run the surprisal filter chunk by chunk and (when enabled) replay the
        cache inserts. A chunk's routed tokens enter the cache when the chunk
        completes, so they are visible from the next chunk onwards."""
        c = self.cfg
        T = len(losses)
        state = SurprisalState.from_config(c)
        cache = ResidualCache(c.cache_capacity, c.n_heads, c.d_head)
        routed = np.zeros(T, dtype=bool)
        tau_trace = np.zeros(T)
        chunk_loss = np.zeros(T)
        occupancy = np.zeros(T, dtype=np.int64)
        src, ins_at, ev_at = [], [], []  # per insert attempt
        slot_of: dict[int, int] = {}
        for start in range(0, T, c.chunk_size):
            sl = slice(start, min(start + c.chunk_size, T))
            occupancy[sl] = len(cache)
            flags, cm, tau = route_chunk(state, losses[sl])
            routed[sl], tau_trace[sl], chunk_loss[sl] = flags, tau, cm
            if not enabled:
                continue
            boundary = sl.stop
            for t in np.flatnonzero(flags) + start:
                slot_of[cache.next_insertion_seq] = len(src)
                src.append(int(t))
                ins_at.append(boundary)
                ev_at.append(T)
                victim = cache.insert(CacheEntry(kd[t].copy(), vd[t].copy(), float(losses[t]), source_position=int(t)))
                if victim is not None:
                    ev_at[slot_of[victim.insertion_seq]] = boundary
        live = [s for s in range(len(src)) if ev_at[s] > ins_at[s]]
        tpos = np.arange(T)[:, None]
        lo = np.array([ins_at[s] for s in live], dtype=np.int64)
        hi = np.array([ev_at[s] for s in live], dtype=np.int64)
        pos = np.array([src[s] for s in live], dtype=np.int64)
        return {
            "state": state,
            "cache": cache,
            "routed": routed,
            "tau": tau_trace,
            "chunk_loss": chunk_loss,
            "occupancy": occupancy,
            "insertions": len(src),
            "positions": pos,
            "visible": (tpos >= lo[None, :]) & (tpos < hi[None, :]),
        }

    def layer_forward(self, i: int, x: Tensor, positions: np.ndarray, mode: str, alpha_override=None):
        c, p = self.cfg, self.params
        T = x.shape[0]
        H, dh, D = c.n_heads, c.d_head, c.d_model
        h = ag.layer_norm(x, p[f"l{i}.ln1_g"], p[f"l{i}.ln1_b"])
        if c.token_shift:
            prev = ag.concat([Tensor(np.zeros((1, D))), ag.index(h, slice(0, T - 1))], axis=0)

            def proj(name):
                return ag.add(ag.matmul(h, p[f"l{i}.{name}"]), ag.matmul(prev, p[f"l{i}.{name}_prev"]))
        else:

            def proj(name):
                return ag.matmul(h, p[f"l{i}.{name}"])

        q = ag.reshape(proj("wq"), (T, H, dh))
        k = ag.l2_normalize(ag.reshape(proj("wk"), (T, H, dh)))
        v = ag.l2_normalize(ag.reshape(proj("wv"), (T, H, dh)))
        q = rope_apply(q, positions, c.rope_base)
        k = rope_apply(k, positions, c.rope_base)
        o, head_losses, w_final = ttt_scan(q, k, v, p[f"l{i}.w0"], c.inner_lr, layer=i)
        losses = head_losses.mean(axis=1)
        if c.ttt_norm:
            o = ag.layer_norm(o, p[f"l{i}.tn_g"], p[f"l{i}.tn_b"])

        enabled = mode == CACHE_ENABLED
        rc = self._route_and_cache(losses, k.data, v.data, enabled)
        hit = np.zeros(T)
        if alpha_override is not None:
            theta = Tensor(np.full(H, float(alpha_override)))
        else:
            theta = p[f"l{i}.theta_gate"]
        if enabled:
            pos = rc["positions"]
            att, hit = masked_cache_attention(q, k.data[pos], v.data[pos], rc["visible"])
            if len(pos):
                att = ag.reshape(ag.matmul(ag.reshape(att, (T, D)), p[f"l{i}.wc"]), (T, H, dh))
                o = fuse(o, att, theta, c.alpha_max)
        y = ag.matmul(ag.reshape(o, (T, D)), p[f"l{i}.wo"])
        x = ag.add(x, y)
        h2 = ag.layer_norm(x, p[f"l{i}.ln2_g"], p[f"l{i}.ln2_b"])
        hidden = ag.gelu(ag.add(ag.matmul(h2, p[f"l{i}.w1"]), p[f"l{i}.b1"]))
        x = ag.add(x, ag.add(ag.matmul(hidden, p[f"l{i}.w2"]), p[f"l{i}.b2"]))
        out = LayerOutput(
            y=x.data,
            losses=losses,
            routed=rc["routed"],
            hit_mass=hit,
            alpha=gate_alpha(theta.data, c.alpha_max),
            tau_trace=rc["tau"],
            chunk_loss=rc["chunk_loss"],
            cache=rc["cache"],
            surprisal=rc["state"],
            insertions=rc["insertions"],
            occupancy=rc["occupancy"],
            fast_weights=w_final,
        )
        return x, out

    def forward(self, tokens, mode: str = CACHE_ENABLED, alpha_override=None):
        """tokens -> (logits Tensor (seq, vocab), list of LayerOutput)."""
        c, p = self.cfg, self.params
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or len(tokens) == 0:
            raise ValueError("tokens must be a non-empty 1-D sequence")
        if len(tokens) > c.max_seq_len:
            raise ValueError(f"sequence length {len(tokens)} exceeds max_seq_len {c.max_seq_len}")
        if tokens.min() < 0 or tokens.max() >= c.vocab_size:
            raise IndexError(f"token ids must lie in [0, {c.vocab_size})")
        if mode not in (CACHE_ENABLED, CACHE_DISABLED):
            raise ValueError(f"unknown mode {mode!r}")
        positions = np.arange(len(tokens))
        x = ag.embedding(p["embed"], tokens)
        aux = []
        for i in range(c.n_layers):
            x, lo = self.layer_forward(i, x, positions, mode, alpha_override)
            aux.append(lo)
        x = ag.layer_norm(x, p["lnf_g"], p["lnf_b"])
        logits = ag.add(ag.matmul(x, p["w_out"]), p["b_out"])
        return logits, aux

    def loss(self, tokens, mode: str = CACHE_ENABLED):
        """Mean next-token cross-entropy over the sequence."""
        logits, aux = self.forward(tokens[:-1], mode)
        return ag.cross_entropy(logits, np.asarray(tokens[1:])), aux

    # state helpers
    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, sd: dict[str, np.ndarray]):
        missing = set(self.params) ^ set(sd)
        if missing:
            raise KeyError(f"state dict mismatch on {sorted(missing)}")
        for n, arr in sd.items():
            if arr.shape != self.params[n].shape:
                raise ValueError(f"{n}: shape {arr.shape} != {self.params[n].shape}")
            self.params[n].data = np.array(arr, dtype=np.float64)

    def clone(self) -> "SRTTTModel":
        m = SRTTTModel.__new__(SRTTTModel)
        m.cfg = self.cfg
        m.params = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.params.items()}
        return m

    def set_trainable(self, names):
        names = set(names)
        for n, t in self.params.items():
            t.requires_grad = n in names
            t.grad = None


def model_forward(model: SRTTTModel, tokens, mode: str = CACHE_ENABLED):
    return model.forward(tokens, mode)
