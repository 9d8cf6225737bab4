"""Shared fixtures-by-function: gradient cases and tiny model configs."""

from __future__ import annotations

import numpy as np

from srttt import autograd as ag
from srttt.autograd import Tensor
from srttt.config import ModelConfig
from srttt.model import SRTTTModel, fuse, masked_cache_attention, rope_apply, ttt_scan


def tiny_config(**kw) -> ModelConfig:
    base = dict(
        n_layers=1, d_model=8, n_heads=2, vocab_size=16, max_seq_len=64, chunk_size=4, warmup_tokens=4, cache_capacity=6
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, **kw) -> SRTTTModel:
    return SRTTTModel(tiny_config(**kw), seed=seed)


class _Contract:
    """Reduce to a scalar with fixed random weights (drawn on first use) so
    every output entry matters."""

    def __init__(self, seed):
        self.seed, self.w = seed, None

    def __call__(self, out: Tensor) -> Tensor:
        if self.w is None:
            self.w = np.random.default_rng(self.seed).normal(size=out.shape)
        return ag.sum_all(ag.mul(out, Tensor(self.w)))


def _off_kinks(rng, shape=(3, 4)):
    """Samples in [-1, 1] at least 0.05 away from the clamp bounds +-0.5."""
    lo = rng.choice([-1.0, -0.45, 0.55], size=shape)
    width = np.where(lo == -0.45, 0.9, 0.45)
    return lo + rng.uniform(0, 1, size=shape) * width


def primitive_cases():
    """name -> (make_point(rng), build(rng) -> fn(x) scalar). The build step
    draws any constants once so fn is a fixed function of x."""

    def unary(op, shape=(3, 4), sampler=None):
        def point(rng):
            return sampler(rng) if sampler else rng.normal(size=shape)

        def build(rng):
            red = _Contract(int(rng.integers(1 << 30)))
            return lambda x: red(op(x))

        return point, build

    def with_const(op, shape, cshape):
        def point(rng):
            return rng.normal(size=shape)

        def build(rng):
            c = Tensor(rng.normal(size=cshape))
            red = _Contract(int(rng.integers(1 << 30)))
            return lambda x: red(op(x, c))

        return point, build

    cases = {
        "add": with_const(ag.add, (3, 4), (4,)),
        "sub": with_const(lambda x, c: ag.sub(c, x), (3, 4), (3, 4)),
        "mul": with_const(ag.mul, (3, 4), (3, 1)),
        "scale": unary(lambda x: ag.scale(x, -1.7)),
        "matmul_left": with_const(ag.matmul, (3, 4), (4, 2)),
        "matmul_right": with_const(lambda x, c: ag.matmul(c, x), (4, 2), (3, 4)),
        "matmul_batched": with_const(ag.matmul, (2, 3, 4), (2, 4, 3)),
        "reshape": unary(lambda x: ag.reshape(x, (2, 6))),
        "transpose": unary(lambda x: ag.transpose(x, (1, 0))),
        "index": unary(lambda x: ag.index(x, (slice(0, 2), slice(1, 4)))),
        "concat": with_const(lambda x, c: ag.concat([c, x, x], axis=0), (3, 4), (2, 4)),
        "sum_all": unary(ag.sum_all),
        "mean_all": unary(ag.mean_all),
        "sq_l2": unary(ag.sq_l2),
        "exp": unary(ag.exp),
        "tanh": unary(ag.tanh),
        "gelu": unary(ag.gelu),
        # keep away from the kinks at the bounds
        "clamp": unary(lambda x: ag.clamp(x, -0.5, 0.5), sampler=_off_kinks),
        "softmax": unary(ag.softmax),
        "softmax_masked": unary(lambda x: ag.softmax(x, mask=np.array([[1, 1, 0, 1]] * 3, dtype=bool))),
        "layer_norm": with_const(lambda x, c: ag.layer_norm(x, c, Tensor(np.arange(4.0))), (3, 4), (4,)),
        "layer_norm_gain": with_const(lambda g, c: ag.layer_norm(c, g, Tensor(np.zeros(4))), (4,), (3, 4)),
        "l2_normalize": unary(ag.l2_normalize, shape=(3, 2, 4)),
        "embedding": unary(lambda x: ag.embedding(x, np.array([0, 3, 3, 1])), shape=(5, 3)),
        "cross_entropy": unary(lambda x: ag.cross_entropy(x, np.array([1, 0, 3])), shape=(3, 5)),
        "rope": unary(lambda x: rope_apply(x, np.array([0, 5, 17]), 100.0), shape=(3, 2, 4)),
    }

    # fused sequence primitives: differentiate with respect to each input in turn
    def ttt_case(slot):
        def point(rng):
            return rng.normal(size=(2, 3, 3) if slot == 3 else (5, 2, 3)) * (0.3 if slot == 3 else 1.0)

        def build(rng):
            base = [rng.normal(size=(5, 2, 3)) for _ in range(3)]
            base[1] /= np.linalg.norm(base[1], axis=-1, keepdims=True)
            W0 = rng.normal(size=(2, 3, 3)) * 0.3
            w = rng.normal(size=(5, 2, 3))

            def fn(x):
                args = [Tensor(b) for b in base] + [Tensor(W0)]
                args[slot] = x
                out, _, _ = ttt_scan(*args, eta=0.1)
                return ag.sum_all(ag.mul(out, Tensor(w)))

            return fn

        return point, build

    for slot, nm in enumerate("qkv"):
        cases[f"ttt_scan_{nm}"] = ttt_case(slot)
    cases["ttt_scan_w0"] = ttt_case(3)

    def cache_point(rng):
        return rng.normal(size=(4, 2, 3))

    def cache_build(rng):
        keys = rng.normal(size=(3, 2, 3))
        vals = rng.normal(size=(3, 2, 3))
        vis = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 1]], dtype=bool)
        w = rng.normal(size=(4, 2, 3))
        return lambda x: ag.sum_all(ag.mul(masked_cache_attention(x, keys, vals, vis)[0], Tensor(w)))

    cases["cache_attention"] = (cache_point, cache_build)

    def gate_point(rng):
        return rng.uniform(0.02, 0.48, size=2)

    def gate_build(rng):
        t_out, c_out = Tensor(rng.normal(size=(4, 2, 3))), Tensor(rng.normal(size=(4, 2, 3)))
        w = rng.normal(size=(4, 2, 3))
        return lambda th: ag.sum_all(ag.mul(fuse(t_out, c_out, th, 0.5), Tensor(w)))

    cases["fuse_gate"] = (gate_point, gate_build)
    return cases


def check_primitive(name: str, n_points: int = 100, seed: int = 0, tol: float = 1e-4) -> float:
    """Largest relative error over ``n_points`` random points."""
    point, build = primitive_cases()[name]
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    for _ in range(n_points):
        fn = build(rng)
        rep = ag.grad_check(fn, point(rng), tol=tol)
        worst = max(worst, rep["max_rel_error"])
    return worst


def model_loss_grad_error(n_points: int = 100, seed: int = 0, mode: str = "cache_disabled", names=None, **model_kw) -> float:
    """Finite-difference check of the full model loss at ``n_points`` random
    coordinates spread over ``names`` (default: every parameter).

    With the cache enabled, cached keys/values are constants to the tape, so
    only parameters that do not feed the cache (the gate and read-out, the
    Stage 2 trainable set) have exact gradients there.
    """
    rng = np.random.default_rng([seed, 99])
    model = tiny_model(seed=seed, gate_init=0.3, **model_kw)
    # move away from the init so every path carries signal
    for t in model.params.values():
        t.data = t.data + rng.normal(0, 0.05, size=t.shape)
    tokens = rng.integers(0, 16, size=25)
    names = list(model.params) if names is None else list(names(model) if callable(names) else names)
    model.set_trainable(names)
    loss, aux = model.loss(tokens, mode)
    ag.backward(loss)
    grads = {n: model.params[n].grad if model.params[n].grad is not None else np.zeros(model.params[n].shape) for n in names}
    model.set_trainable([])
    worst, h = 0.0, 1e-6
    for j in range(n_points):
        n = names[j % len(names)]
        t = model.params[n]
        idx = tuple(int(rng.integers(s)) for s in t.shape)
        orig = t.data[idx]
        t.data[idx] = orig + h
        fp = model.loss(tokens, mode)[0].item()
        t.data[idx] = orig - h
        fm = model.loss(tokens, mode)[0].item()
        t.data[idx] = orig
        num, ana = (fp - fm) / (2 * h), grads[n][idx]
        worst = max(worst, abs(num - ana) / max(1.0, abs(num), abs(ana)))
    return worst


# ---------------------------------------------------------------- oracles


def brute_force_routing(losses, p=0.95, beta=0.99, chunk=16, factor=0.8, warmup=32):
    """Direct evaluation of the dual rule from whole-stream quantities:
    thresholds via numpy's linear percentile, decisions against the threshold
    in force before each chunk."""
    losses = np.asarray(losses, dtype=np.float64)
    n_chunks = -(-len(losses) // chunk)
    q = [np.percentile(losses[c * chunk : (c + 1) * chunk], 100 * p) for c in range(n_chunks)]
    taus = [q[0]]
    for c in range(1, n_chunks):
        taus.append(beta * taus[-1] + (1 - beta) * q[c])
    out = np.zeros(len(losses), dtype=bool)
    for t, lt in enumerate(losses):
        c = t // chunk
        if t < warmup or c == 0:
            continue
        tau = taus[c - 1]
        mean = losses[c * chunk : (c + 1) * chunk].mean()
        out[t] = lt > tau and mean > factor * tau
    return out


def brute_force_cache(ops, capacity):
    """O(n*C) reference for the eviction rule. ``ops`` is a list of
    priorities; returns (resident (seq, priority) in insertion order, list of
    returned entries' seq or None per op)."""
    resident, returned = [], []
    for seq, pr in enumerate(ops):
        if len(resident) < capacity:
            resident.append((seq, pr))
            returned.append(None)
            continue
        victim = min(resident, key=lambda e: (e[1], e[0]))
        if pr >= victim[1]:
            resident.remove(victim)
            resident.append((seq, pr))
            returned.append(victim[0])
        else:
            returned.append(seq)
    return resident, returned


def tiny_run(out_dir, total=30, stage2=20, seq_len=96, **model_kw):
    from srttt.config import EvalConfig, RunConfig, TrainConfig

    mk = dict(n_layers=1, d_model=16, n_heads=2, vocab_size=256, max_seq_len=512, chunk_size=8, warmup_tokens=16)
    mk.update(model_kw)
    return RunConfig(
        preset="desk",
        model=ModelConfig(**mk),
        train=TrainConfig(total_steps=total, stage2_start=stage2, seq_len=seq_len, checkpoint_every=10, warmup_steps=5, lr=3e-3),
        eval=EvalConfig(depths=[0.5], n_samples=2),
        out_dir=str(out_dir),
    )


# criterion number -> "criterion N: PASS/FAIL ..." line, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(n: int, title: str, passed: bool, detail: str):
    line = f"criterion {n:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    return passed
