import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdm.autodiff import Tensor, finite_difference_check, ops
from fdm.cache import (
    CacheConfig,
    CacheProjections,
    CacheState,
    cache_attend,
    cache_attend_dense,
    cache_mask,
    cache_update,
    offline_topk,
    prefill_cache,
    stream_cache,
)


def brute_mask(i, j, scores, W, K):
    """Mask by enumeration: window test, then count strictly-better positions."""
    if j >= i:
        return False
    if i - W <= j:
        return True
    better = [k for k in range(i) if scores[k] > scores[j] or (scores[k] == scores[j] and k < j)]
    return len(better) < K


def row_oracle(x, scores, proj, W, K, bias=False):
    """Row-by-row attention over the brute-force mask."""
    d_k = proj.W_q.shape[1]
    q, k, v = x @ proj.W_q.data, x @ proj.W_k.data, x @ proj.W_v.data
    out = np.zeros((len(x), proj.W_o.shape[1]))
    for i in range(len(x)):
        cols = [j for j in range(i) if brute_mask(i, j, scores, W, K)]
        if not cols:
            continue
        logits = np.array([q[i] @ k[j] / np.sqrt(d_k) + (scores[j] if bias and j < i - W else 0.0) for j in cols])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        out[i] = (w @ v[cols]) @ proj.W_o.data
    return out


def make_proj(rng, d=6, dk=5):
    return CacheProjections.init(d, dk, dk, rng)


# ---------------------------------------------------------------- masks
def test_window_arithmetic():
    cfg = CacheConfig(4, 0, 2, 2)
    scores = np.zeros(11)
    assert cache_mask(10, 7, scores, cfg)
    assert not cache_mask(10, 5, scores, cfg)


def test_position_zero_has_empty_row():
    cfg = CacheConfig(4, 2, 2, 2)
    assert not cache_mask(0, 0, np.zeros(1), cfg)


def test_global_top1_outside_window():
    cfg = CacheConfig(2, 1, 2, 2)
    assert cache_mask(4, 0, [9, 1, 1, 1], cfg)
    assert not cache_mask(4, 1, [9, 1, 1, 1], cfg)


def test_future_access_rejected():
    with pytest.raises(ValueError):
        cache_mask(3, 4, np.zeros(5), CacheConfig(2, 1, 2, 2))


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(0, 4))
def test_mask_matches_enumeration(seed, W, K):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 4, 20).astype(float)  # many ties
    cfg = CacheConfig(W, K, 2, 2)
    for i in range(20):
        for j in range(i + 1):
            assert cache_mask(i, j, scores, cfg) == brute_mask(i, j, scores, W, K)


# -------------------------------------------------------------- attention
def test_single_slot_returns_projected_value():
    rng = np.random.default_rng(0)
    proj = make_proj(rng)
    state = CacheState(CacheConfig(1, 0, 5, 5))
    x0 = rng.normal(size=6)
    cache_update(state, x0, 0, 0.0, proj)
    out = cache_attend(rng.normal(size=6), state, proj)
    assert np.allclose(out, (x0 @ proj.W_v.data) @ proj.W_o.data, atol=1e-14)


def test_duplicate_slots_same_as_one():
    rng = np.random.default_rng(1)
    proj = make_proj(rng)
    x0, q = rng.normal(size=6), rng.normal(size=6)
    one = CacheState(CacheConfig(2, 0, 5, 5))
    cache_update(one, x0, 0, 0.0, proj)
    two = CacheState(CacheConfig(2, 0, 5, 5))
    cache_update(two, x0, 0, 0.0, proj)
    cache_update(two, x0, 1, 0.0, proj)
    assert np.allclose(cache_attend(q, one, proj), cache_attend(q, two, proj), atol=1e-14)


def test_empty_state_returns_zeros():
    rng = np.random.default_rng(2)
    proj = make_proj(rng)
    assert np.array_equal(cache_attend(rng.normal(size=6), CacheState(CacheConfig(2, 1, 5, 5)), proj), np.zeros(6))


def test_toy_matches_row_oracle():
    rng = np.random.default_rng(3)
    proj = make_proj(rng)
    x = rng.normal(size=(5, 6))
    scores = rng.normal(size=5)
    cfg = CacheConfig(2, 1, 5, 5)
    dense = cache_attend_dense(Tensor(x[None]), scores[None], proj, cfg).data[0]
    _, streamed = stream_cache(x, scores, proj, cfg)
    oracle = row_oracle(x, scores, proj, 2, 1)
    assert np.abs(dense - oracle).max() < 1e-12
    assert np.abs(streamed - oracle).max() < 1e-12


@pytest.mark.parametrize("bias", [False, True])
def test_stream_matches_dense(bias):
    rng = np.random.default_rng(4)
    proj = make_proj(rng)
    cfg = CacheConfig(8, 4, 5, 5, score_bias=bias)
    for _ in range(10):
        T = int(rng.integers(1, 60))
        x = rng.normal(size=(T, 6))
        scores = rng.integers(-2, 3, T).astype(float)
        dense = cache_attend_dense(Tensor(x[None]), scores[None], proj, cfg).data[0]
        _, streamed = stream_cache(x, scores, proj, cfg)
        assert np.abs(dense - streamed).max() < 1e-10
        assert np.abs(dense - row_oracle(x, scores, proj, 8, 4, bias)).max() < 1e-10


# ----------------------------------------------------------------- updates
def test_ring_eviction():
    rng = np.random.default_rng(5)
    proj = make_proj(rng)
    state = CacheState(CacheConfig(2, 0, 5, 5))
    for i in range(3):
        cache_update(state, rng.normal(size=6), i, 0.0, proj)
    assert state.local_positions() == [1, 2]
    assert state.global_positions() == []


def test_position_mismatch_rejected():
    rng = np.random.default_rng(6)
    proj = make_proj(rng)
    state = CacheState(CacheConfig(2, 1, 5, 5))
    with pytest.raises(ValueError):
        cache_update(state, rng.normal(size=6), 1, 0.0, proj)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_streaming_topk_equals_offline(seed):
    rng = np.random.default_rng(seed)
    proj = make_proj(rng)
    scores = rng.integers(0, 6, 64).astype(float)
    state, _ = stream_cache(rng.normal(size=(64, 6)), scores, proj, CacheConfig(8, 4, 5, 5))
    assert state.global_positions() == offline_topk(scores, 4)


def test_slot_budget():
    rng = np.random.default_rng(7)
    proj = make_proj(rng)
    state = CacheState(CacheConfig(8, 4, 5, 5))
    nbytes = state.nbytes()
    for i in range(100):
        cache_update(state, rng.normal(size=6), i, float(rng.normal()), proj)
        assert state.slot_count == min(i + 1, 8) + min(i + 1, 4)
        assert all(p <= i for p in state.local_positions() + state.global_positions())
        assert state.nbytes() == nbytes


def test_large_window_slot_count():
    rng = np.random.default_rng(8)
    proj = make_proj(rng, d=4, dk=2)
    x = rng.normal(size=(2048, 4))
    state, _ = prefill_cache(x[:2048], rng.normal(size=2048), proj, CacheConfig(256, 16, 2, 2))
    assert state.slot_count == 272


# ------------------------------------------------------------- equivalence
def test_short_sequence_without_globals_is_causal_attention():
    rng = np.random.default_rng(9)
    proj = make_proj(rng)
    x = rng.normal(size=(6, 6))
    out = cache_attend_dense(Tensor(x[None]), np.zeros((1, 6)), proj, CacheConfig(10, 0, 5, 5)).data[0]
    q, k, v = x @ proj.W_q.data, x @ proj.W_k.data, x @ proj.W_v.data
    logits = q @ k.T / np.sqrt(5)
    mask = np.tril(np.ones((6, 6), bool), -1)
    att = np.where(mask, np.exp(logits - logits.max(1, keepdims=True)), 0.0)
    att = att / np.where(att.sum(1, keepdims=True) > 0, att.sum(1, keepdims=True), 1)
    assert np.abs(out - att @ v @ proj.W_o.data).max() < 1e-12


def test_prefill_then_decode_equals_longer_prefill():
    rng = np.random.default_rng(10)
    proj = make_proj(rng)
    cfg = CacheConfig(4, 2, 5, 5)
    x = rng.normal(size=(20, 6))
    scores = rng.normal(size=20)
    state, _ = prefill_cache(x[:19], scores[:19], proj, cfg)
    step = cache_attend(x[19], state, proj)
    _, full = prefill_cache(x, scores, proj, cfg)
    assert np.abs(step - full[19]).max() < 1e-10


def test_causality():
    rng = np.random.default_rng(11)
    proj = make_proj(rng)
    cfg = CacheConfig(3, 2, 5, 5)
    x, scores = rng.normal(size=(12, 6)), rng.normal(size=12)
    base = cache_attend_dense(Tensor(x[None]), scores[None], proj, cfg).data[0]
    x2, s2 = x.copy(), scores.copy()
    x2[7:] += 1.0
    s2[7:] = 50.0
    out = cache_attend_dense(Tensor(x2[None]), s2[None], proj, cfg).data[0]
    assert np.array_equal(out[:7], base[:7])


@pytest.mark.parametrize("bias", [False, True])
def test_attention_gradient(bias):
    rng = np.random.default_rng(12)
    proj = make_proj(rng, d=4, dk=3)
    cfg = CacheConfig(2, 2, 3, 3, score_bias=bias)
    x = Tensor(rng.normal(size=(2, 7, 4)), requires_grad=True)
    scores = Tensor(rng.normal(size=(2, 7)), requires_grad=True)
    target = rng.normal(size=(2, 7, 4))

    def loss(_):
        return ops.sum(ops.tanh(cache_attend_dense(x, scores, proj, cfg)) * Tensor(target))

    assert finite_difference_check(loss, [x, scores, proj.W_q, proj.W_k, proj.W_v, proj.W_o]) < 1e-4
