"""KV cache growth, attention products and prefill."""
import math

import numpy as np
import pytest

from conftest import make_engine
from errors import CacheEmpty, CacheFull, LayoutMismatch
from kv_attention import (
    AttentionConfig,
    AttentionWeights,
    KVCache,
    distribute_v,
    k_append,
    plaintext_attention,
    prefill,
    qk_dot,
    softmax_times_v,
    v_append,
)
from layouts import decode_batched, decode_interleaved, encode_batched, encode_interleaved, head_permutation, \
    inverse_head_permutation
from model import apply_rope
from verify import append_matches_prefill


def grow_cache(engine, acfg, K, V):
    """Append already-projected (head-reordered) keys and values one token at a time"""
    cache = KVCache()
    for tau in range(K.shape[0]):
        layout = acfg.hidden_layout(tau % acfg.t)
        k = engine.encrypt(encode_interleaved(K[tau], layout), layout=layout)
        v = engine.encrypt(encode_interleaved(V[tau], layout), layout=layout.deferred())
        cache = k_append(engine, cache, k, acfg)
        cache = v_append(engine, cache, distribute_v(engine, v, acfg, tau), acfg)
    return cache


SLOTS_FOR_D = {4: 16, 16: 64, 64: 128}


def multi_map_shapes():
    """(d, H, n') around the one-map capacity N/H, including several maps"""
    cases = []
    for d, N in SLOTS_FOR_D.items():
        for H in (1, 2, 4):
            cap = N // H
            for n in sorted({1, 3, cap - 1, cap + 1, cap + 3, 2 * cap}):
                cases.append(pytest.param(d, H, n, id=f"d{d}-H{H}-n{n}"))
    return cases


# =============================================================================
# Cache growth
# =============================================================================


class TestCacheGrowth:

    @pytest.fixture
    def acfg(self):
        return AttentionConfig(N=64, d=16, H=2, n_max=8)

    def test_key_append_costs_one_addition(self, acfg, rng):
        engine = make_engine()
        cache = KVCache()
        for tau in range(3):
            layout = acfg.hidden_layout(tau % acfg.t)
            k = engine.encrypt(encode_interleaved(rng.standard_normal(16), layout), layout=layout)
            before = engine.ledger.snapshot().additions
            cache = k_append(engine, cache, k, acfg)
            added = engine.ledger.snapshot().additions - before
            assert added == (0 if tau == 0 else 1), f"token {tau}: {added} additions"
        assert cache.n_prime == 3 and cache.n_k == 1

    def test_new_ciphertext_every_t_tokens(self, acfg, rng):
        engine = make_engine()
        cache = grow_cache(engine, acfg, rng.standard_normal((5, 16)), rng.standard_normal((5, 16)))
        assert cache.n_k == 2
        assert len(cache.v_groups) == 1 and len(cache.v_groups[0]) == acfg.d_head
        assert cache.v_tokens == 5

    def test_key_at_wrong_offset_rejected(self, acfg, rng):
        engine = make_engine()
        layout = acfg.hidden_layout(2)
        k = engine.encrypt(encode_interleaved(rng.standard_normal(16), layout), layout=layout)
        with pytest.raises(LayoutMismatch):
            k_append(engine, KVCache(), k, acfg)

    def test_cache_full(self, rng):
        acfg = AttentionConfig(N=64, d=16, H=2, n_max=2)
        engine = make_engine()
        cache = grow_cache(engine, acfg, rng.standard_normal((2, 16)), rng.standard_normal((2, 16)))
        layout = acfg.hidden_layout(2)
        k = engine.encrypt(encode_interleaved(np.ones(16), layout), layout=layout)
        with pytest.raises(CacheFull):
            k_append(engine, cache, k, acfg)

    @pytest.mark.parametrize("n0", [0, 5, 8])
    def test_appends_match_prefill(self, n0):
        diff = append_matches_prefill(n0=n0)
        assert diff < 1e-9, f"n0={n0}: max slot difference {diff:.3e}"


# =============================================================================
# Attention products
# =============================================================================


class TestAttention:

    @pytest.mark.parametrize("n_tokens", [1, 3, 6])
    def test_scores_and_output_match_cleartext(self, n_tokens, rng):
        acfg = AttentionConfig(N=64, d=16, H=2, n_max=8)
        engine = make_engine()
        K, V = rng.standard_normal((n_tokens, 16)), rng.standard_normal((n_tokens, 16))
        q = rng.standard_normal(16)
        cache = grow_cache(engine, acfg, K, V)
        hidden = acfg.hidden_layout()
        q_ct = engine.encrypt(encode_interleaved(q, hidden), layout=hidden)

        maps = qk_dot(engine, q_ct, cache, acfg)
        scores, expected = plaintext_attention(q, K, V, acfg.H)
        layout = maps[0].layout
        for h in range(acfg.H):
            for tau in range(n_tokens):
                g, slot = layout.locate(h, tau)
                assert maps[g].slots[slot] == pytest.approx(scores[h, tau], abs=1e-9)
        valid = layout.token_masks(n_tokens)[0] != 0
        assert np.all(maps[0].slots[~valid] == 0.0)

        out = softmax_times_v(engine, maps, cache, acfg)
        assert np.allclose(decode_interleaved(out.slots, out.layout), expected, atol=1e-9)
        assert q_ct.level - out.level == 4

    @pytest.mark.parametrize("d,H,n_tokens", multi_map_shapes())
    def test_map_split_matches_cleartext(self, d, H, n_tokens):
        N = SLOTS_FOR_D[d]
        acfg = AttentionConfig(N=N, d=d, H=H, n_max=n_tokens)
        rng = np.random.default_rng([d, H, n_tokens])
        engine = make_engine(N, 8)
        K, V = rng.standard_normal((n_tokens, d)), rng.standard_normal((n_tokens, d))
        q = rng.standard_normal(d)
        cache = grow_cache(engine, acfg, K, V)
        hidden = acfg.hidden_layout()
        q_ct = engine.encrypt(encode_interleaved(q, hidden), layout=hidden)

        before = engine.ledger.snapshot().ct_ct_mults
        maps = qk_dot(engine, q_ct, cache, acfg)
        ct_ct = engine.ledger.snapshot().ct_ct_mults - before
        assert ct_ct == math.ceil(n_tokens / acfg.t), f"{ct_ct} ct-ct products for {n_tokens} tokens"
        assert len(maps) == math.ceil(n_tokens / (N // H))

        scores, expected = plaintext_attention(q, K, V, H)
        layout = maps[0].layout
        for h in range(H):
            for tau in range(n_tokens):
                g, slot = layout.locate(h, tau)
                assert maps[g].slots[slot] == pytest.approx(scores[h, tau], abs=1e-9), \
                    f"head {h} token {tau} in map {g}"
        for m, mask in zip(maps, layout.token_masks(n_tokens)):
            assert np.all(m.slots[mask == 0] == 0.0)

        out = softmax_times_v(engine, maps, cache, acfg)
        assert np.allclose(decode_interleaved(out.slots, out.layout), expected, atol=1e-9)
        assert q_ct.level - out.level == 4

    def test_empty_cache(self):
        acfg = AttentionConfig(N=64, d=16, H=2, n_max=8)
        engine = make_engine()
        q = engine.encrypt(np.zeros(64), layout=acfg.hidden_layout())
        with pytest.raises(CacheEmpty):
            qk_dot(engine, q, KVCache(), acfg)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AttentionConfig(N=64, d=16, H=3)
        with pytest.raises(ValueError):
            AttentionConfig(N=64, d=16, n0=9, n_max=8)


# =============================================================================
# Prefill
# =============================================================================


class TestPrefill:

    def test_causal_outputs(self, rng):
        N, d, H, n0 = 64, 16, 2, 6
        acfg = AttentionConfig(N=N, d=d, H=H, n0=n0, n_max=8)
        engine = make_engine(N, 8)
        Wq, Wk, Wv = (rng.standard_normal((d, d)) / math.sqrt(d) for _ in range(3))
        X = rng.standard_normal((n0, d))
        t = acfg.t
        batches = []
        for s in range(0, n0, t):
            layout = acfg.batch_layout(min(t, n0 - s))
            batches.append(engine.encrypt(encode_batched(X[s:s + t], layout), layout=layout))

        outputs, cache = prefill(engine, batches, AttentionWeights(Wq, Wk, Wv), acfg)
        assert cache.n_prime == n0 and cache.n_k == 2
        assert all(c.level == engine.L for c in cache.ciphertexts())

        perm, inv = head_permutation(d, H), inverse_head_permutation(d, H)

        def rope(v, tau):
            return apply_rope(v[inv], tau, H)[perm]

        Q = np.stack([rope(X[tau] @ Wq, tau) for tau in range(n0)])
        K = np.stack([rope(X[tau] @ Wk, tau) for tau in range(n0)])
        V = X @ Wv
        got = np.vstack([decode_batched(o.slots, o.layout) for o in outputs])
        for tau in range(n0):
            _, expected = plaintext_attention(Q[tau], K[:tau + 1], V[:tau + 1], H, softmax=True)
            assert np.allclose(got[tau], expected, atol=1e-9), f"token {tau} differs"

    def test_prompt_too_long(self, rng):
        acfg = AttentionConfig(N=64, d=16, H=2, n_max=3)
        engine = make_engine()
        layout = acfg.batch_layout(4)
        x = engine.encrypt(encode_batched(rng.standard_normal((4, 16)), layout), layout=layout)
        weights = AttentionWeights(*(np.eye(16) for _ in range(3)))
        with pytest.raises(CacheFull):
            prefill(engine, [x], weights, acfg)
