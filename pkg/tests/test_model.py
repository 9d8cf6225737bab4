import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from srttt import autograd as ag
from srttt.autograd import Tensor
from srttt.cache import CacheEntry, ResidualCache
from srttt.config import ModelConfig, paper_preset
from srttt.model import (
    CACHE_DISABLED,
    CACHE_ENABLED,
    DivergenceError,
    SRTTTModel,
    cache_attention,
    fuse,
    masked_cache_attention,
    rope_apply,
    ttt_inner_step,
    ttt_scan,
)
from srttt.router import SurprisalState, route_chunk

from helpers import tiny_config, tiny_model

vec = lambda n: arrays(np.float64, n, elements=st.floats(-2, 2, allow_nan=False))  # noqa: E731


# ---------------------------------------------------------------- rotary


def test_rope_position_zero_is_identity():
    x = np.random.default_rng(0).normal(size=(1, 2, 8))
    assert np.array_equal(rope_apply(x, [0]), x)


@settings(max_examples=50, deadline=None)
@given(vec((5, 2, 8)), st.lists(st.integers(0, 5000), min_size=5, max_size=5))
def test_rope_preserves_pair_norms(x, pos):
    out = rope_apply(x, pos)
    n_in = np.hypot(x[..., 0::2], x[..., 1::2])
    n_out = np.hypot(out[..., 0::2], out[..., 1::2])
    np.testing.assert_allclose(n_out, n_in, rtol=0, atol=1e-12)


def test_rope_scores_depend_on_offset_only():
    rng = np.random.default_rng(1)
    q, k = rng.normal(size=(1, 1, 16)), rng.normal(size=(1, 1, 16))
    for _ in range(50):
        m, n = rng.integers(0, 3000, size=2)
        shift = int(rng.integers(0, 3000))
        a = np.sum(rope_apply(q, [m]) * rope_apply(k, [n]))
        b = np.sum(rope_apply(q, [m + shift]) * rope_apply(k, [n + shift]))
        assert abs(a - b) < 1e-10


def test_rope_rejects_odd_head_dim():
    with pytest.raises(ValueError, match="even"):
        rope_apply(np.ones((1, 1, 3)), [0])


# ---------------------------------------------------------------- inner loop


def test_inner_step_fixed_point_and_zero_key():
    rng = np.random.default_rng(2)
    W, k = rng.normal(size=(4, 4)), rng.normal(size=4)
    W2, L = ttt_inner_step(W, k, W @ k, 0.1)
    assert L == 0.0 and np.array_equal(W2, W)
    v = rng.normal(size=4)
    W3, L = ttt_inner_step(W, np.zeros(4), v, 0.1)
    assert L == pytest.approx(v @ v) and np.array_equal(W3, W)


@settings(max_examples=200, deadline=None)
@given(vec((4, 4)), vec(4), vec(4), st.floats(0.01, 1.0))
def test_inner_step_never_increases_loss(W, k, v, frac):
    kk = float(k @ k)
    assume(kk > 1e-6)
    eta = frac / (2 * kk)
    W2, before = ttt_inner_step(W, k, v, eta)
    e = W2 @ k - v
    after = float(e @ e)
    assert after <= before + 1e-12
    if before > 1e-12 and frac < 1.0:
        assert after < before


def test_inner_step_divergence_and_bad_eta():
    with pytest.raises(DivergenceError):
        ttt_inner_step(np.full((2, 2), 1e308), np.full(2, 1e10), np.zeros(2), 1.0)
    with pytest.raises(ValueError):
        ttt_inner_step(np.eye(2), np.ones(2), np.ones(2), 0.0)


def test_scan_matches_sequential_inner_steps():
    rng = np.random.default_rng(3)
    T, H, d = 9, 2, 4
    q, k, v = (rng.normal(size=(T, H, d)) for _ in range(3))
    W0 = rng.normal(size=(H, d, d)) * 0.1
    out, losses, w_final = ttt_scan(Tensor(q), Tensor(k), Tensor(v), Tensor(W0), eta=0.05)
    for h in range(H):
        W = W0[h]
        for t in range(T):
            W, L = ttt_inner_step(W, k[t, h], v[t, h], 0.05)
            assert losses[t, h] == pytest.approx(L, abs=1e-12)
            np.testing.assert_allclose(out.data[t, h], W @ q[t, h], atol=1e-12)
        np.testing.assert_allclose(w_final[h], W, atol=1e-12)


def test_scan_reports_layer_and_position_on_divergence():
    T, H, d = 120, 1, 2
    k = np.full((T, H, d), 30.0)
    with pytest.raises(DivergenceError, match="layer 3"):
        ttt_scan(Tensor(np.ones((T, H, d))), Tensor(k), Tensor(np.ones((T, H, d))), Tensor(np.zeros((H, d, d))), 5.0, layer=3)


# ---------------------------------------------------------------- cache attention


def _snapshot(rng, m, H=2, d=4):
    c = ResidualCache(8, H, d)
    for i in range(m):
        c.insert(CacheEntry(rng.normal(size=(H, d)), rng.normal(size=(H, d)), 1.0, source_position=i))
    return c.snapshot()


def test_cache_attention_degenerate_cases():
    rng = np.random.default_rng(4)
    q = rng.normal(size=(2, 4))
    assert np.array_equal(cache_attention(q, _snapshot(rng, 0)), np.zeros((2, 4)))
    snap = _snapshot(rng, 1)
    np.testing.assert_array_equal(cache_attention(q, snap), snap.values[0])


def test_cache_attention_matches_brute_force():
    rng = np.random.default_rng(5)
    snap = _snapshot(rng, 5)
    q = rng.normal(size=(2, 4))
    expect = np.zeros((2, 4))
    for h in range(2):
        s = [sum(q[h, j] * snap.keys[e, h, j] for j in range(4)) / 2.0 for e in range(5)]
        w = [math.exp(x) for x in s]
        for e in range(5):
            expect[h] += w[e] / sum(w) * snap.values[e, h]
    np.testing.assert_allclose(cache_attention(q, snap), expect, rtol=0, atol=1e-10)


def test_masked_attention_rows_equal_single_query_attention():
    rng = np.random.default_rng(6)
    T, m = 5, 4
    keys, vals = rng.normal(size=(m, 2, 4)), rng.normal(size=(m, 2, 4))
    vis = rng.random((T, m)) < 0.6
    vis[0] = False
    q = rng.normal(size=(T, 2, 4))
    out, _ = masked_cache_attention(Tensor(q), keys, vals, vis)
    for t in range(T):
        c = ResidualCache(m, 2, 4)
        for e in np.flatnonzero(vis[t]):
            c.insert(CacheEntry(keys[e], vals[e], 1.0))
        np.testing.assert_allclose(out.data[t], cache_attention(q[t], c.snapshot()), atol=1e-12)


@pytest.mark.parametrize(
    "theta, amax, expect",
    [(-0.5, 0.5, 0.0), (0.05, 0.2, 0.05), (5.0, 0.2, 0.2)],
)
def test_fuse_clamp(theta, amax, expect):
    t, c = np.arange(8.0), np.ones(8)
    out = fuse(t, c, [theta, theta], amax)
    np.testing.assert_allclose(out, t + expect)


# ---------------------------------------------------------------- full model


def test_alpha_zero_matches_cache_disabled():
    m = tiny_model(seed=1)
    rng = np.random.default_rng(7)
    for _ in range(20):
        toks = rng.integers(0, 16, size=40)
        with ag.no_grad():
            a, aux = m.forward(toks, CACHE_ENABLED, alpha_override=0.0)
            b, _ = m.forward(toks, CACHE_DISABLED)
        assert sum(x.insertions for x in aux) > 0
        assert np.max(np.abs(a.data - b.data)) <= 1e-12


def test_cache_disabled_routes_but_never_inserts():
    m = tiny_model(seed=2)
    toks = np.random.default_rng(8).integers(0, 16, size=48)
    with ag.no_grad():
        _, aux = m.forward(toks, CACHE_DISABLED)
    assert aux[0].routed.any()
    assert aux[0].insertions == 0 and len(aux[0].cache) == 0


def test_state_is_constant_size_and_cache_bounded():
    cfg = ModelConfig(max_seq_len=2048, n_layers=1)
    m = SRTTTModel(cfg, seed=0)
    sizes = []
    for T in (256, 2048):
        toks = np.random.default_rng(T).integers(32, 127, size=T)
        with ag.no_grad():
            _, aux = m.forward(toks, CACHE_ENABLED)
        sizes.append(sum(a.fast_weights.size for a in aux))
        assert aux[0].occupancy.max() <= cfg.cache_capacity and len(aux[0].cache) <= cfg.cache_capacity
    assert sizes[0] == sizes[1] == m.fast_state_size() == cfg.n_layers * cfg.n_heads * cfg.d_head**2


def test_repeated_token_loss_falls_and_nothing_routed_late():
    m = SRTTTModel(ModelConfig(), seed=0)
    with ag.no_grad():
        _, aux = m.forward([ord("a")] * 256, CACHE_ENABLED)
    for a in aux:
        assert a.losses[128:].mean() < a.losses[:128].mean()
        assert not a.routed[128:].any()


def test_chunk_end_visibility_matches_replay():
    """Entries flagged in a chunk become visible from the next chunk on, and
    stop being visible at the chunk boundary where they are evicted."""
    cfg = tiny_config(cache_capacity=3, chunk_size=4, warmup_tokens=4)
    m = SRTTTModel(cfg, seed=0)
    rng = np.random.default_rng(9)
    T = 64
    losses = rng.exponential(size=T)
    kd, vd = rng.normal(size=(T, 2, 4)), rng.normal(size=(T, 2, 4))
    rc = m._route_and_cache(losses, kd, vd, True)

    state, cache = SurprisalState.from_config(cfg), ResidualCache(3, 2, 4)
    for start in range(0, T, 4):
        resident = sorted(cache.snapshot().positions.tolist())
        for t in range(start, start + 4):
            assert sorted(rc["positions"][rc["visible"][t]].tolist()) == resident
        flags, _, _ = route_chunk(state, losses[start : start + 4])
        for t in np.flatnonzero(flags) + start:
            cache.insert(CacheEntry(kd[t], vd[t], float(losses[t]), source_position=int(t)))


def test_gate_gradient_flows_when_cache_holds_needle():
    m = tiny_model(seed=3, gate_init=0.2)
    toks = np.random.default_rng(10).integers(0, 16, size=32)
    m.set_trainable(m.retrieval_names())
    loss, aux = m.loss(toks, CACHE_ENABLED)
    assert aux[0].insertions > 0
    ag.backward(loss)
    assert np.any(m.params["l0.theta_gate"].grad != 0)

    def fn(theta):
        m.params["l0.theta_gate"] = theta
        return m.loss(toks, CACHE_ENABLED)[0]

    rep = ag.grad_check(fn, np.full(2, 0.2))
    assert rep["passed"] and np.any(rep["numeric"] != 0)


def test_forward_contracts():
    m = tiny_model()
    with ag.no_grad():
        logits, aux = m.forward([3], CACHE_ENABLED)
        assert logits.shape == (1, 16) and not aux[0].routed.any()
        a = m.forward([1, 2, 3, 4, 5], CACHE_ENABLED)[0].data
        b = m.forward([1, 2, 3, 4, 5], CACHE_ENABLED)[0].data
    assert a.tobytes() == b.tobytes()
    with pytest.raises(IndexError):
        m.forward([16])
    with pytest.raises(ValueError):
        m.forward([1] * 65)
    with pytest.raises(ValueError):
        m.forward([1, 2], "sometimes")


def test_same_seed_same_parameters():
    a, b = tiny_model(seed=4), tiny_model(seed=4)
    assert all(a.params[n].data.tobytes() == b.params[n].data.tobytes() for n in a.params)


def test_parameter_report():
    m = SRTTTModel(paper_preset().model)
    rep = m.parameter_report()
    assert rep["total"] == rep["backbone"] + rep["retrieval"]
    # 4 layers: per-head gate plus a d_model x d_model read-out each
    assert rep["retrieval"] == 4 * (4 + 256 * 256)


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4).validate()
    with pytest.raises(ValueError):
        ModelConfig(alpha_max=0.0).validate()
    with pytest.raises(ValueError):
        ModelConfig(chunk_factor=1.0).validate()
