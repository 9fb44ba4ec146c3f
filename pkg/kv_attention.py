#!/usr/bin/env python3

"""
KV-cache attention
Interleaved K/V caches, the two ciphertext-ciphertext attention products and
prefill-stage cache generation over t-token batches.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from errors import CacheEmpty, CacheFull, LayoutMismatch, ShapeMismatch
from layouts import (
    AttentionMapLayout,
    InterleavedLayout,
    batched_diagonals,
    column_mask,
    log2i,
    make_mask,
)
from nonlinear import exact_softmax
from slot_engine import BackendBase, CiphertextHandle, is_power_of_two, with_layout
from vmm import RoPEParams, Successor, fused_extract, vmm_batched

logger = logging.getLogger(__name__)

SoftmaxFn = Callable[[BackendBase, List[CiphertextHandle], int], List[CiphertextHandle]]


class AttentionConfig(BaseModel):
    """Shape of one attention layer: d = H * d_head hidden elements over N = d * t slots"""

    model_config = ConfigDict(frozen=True)

    N: int
    d: int
    H: int = 1
    n0: int = 0
    n_max: int = 64

    @model_validator(mode="after")
    def _check_shape(self) -> "AttentionConfig":
        if not (is_power_of_two(self.N) and is_power_of_two(self.d) and is_power_of_two(self.H)):
            raise ValueError("N, d and H must be powers of two")
        if self.d > self.N or self.d % self.H:
            raise ValueError(f"d={self.d} must divide N={self.N} and be divisible by H={self.H}")
        if self.n_max < 1 or self.n0 > self.n_max:
            raise ValueError(f"need 0 <= n0 <= n_max, got n0={self.n0}, n_max={self.n_max}")
        return self

    @property
    def t(self) -> int:
        return self.N // self.d

    @property
    def d_head(self) -> int:
        return self.d // self.H

    def hidden_layout(self, offset: int = 0) -> InterleavedLayout:
        return InterleavedLayout(d=self.d, t=self.t, offset=offset, H=self.H)

    def batch_layout(self, lanes: Optional[int] = None) -> InterleavedLayout:
        return InterleavedLayout(d=self.d, t=self.t, H=self.H, kind="batched", n_lanes=lanes)

    def map_layout(self, n_tokens: int) -> AttentionMapLayout:
        return AttentionMapLayout(N=self.N, t=self.t, H=self.H, n_tokens=n_tokens)


@dataclass(frozen=True)
class KVCache:
    """Immutable cache version; appends return a new KVCache.

    k_cts[c] holds tokens c*t .. c*t + t - 1, token tau at interleaved offset
    tau mod t. v_groups[g][j] holds column j of the N/H tokens of group g in
    attention-map slot order.
    """

    k_cts: Tuple[CiphertextHandle, ...] = ()
    v_groups: Tuple[Tuple[CiphertextHandle, ...], ...] = ()
    n_prime: int = 0
    v_tokens: int = 0

    @property
    def n_k(self) -> int:
        return len(self.k_cts)

    def ciphertexts(self) -> List[CiphertextHandle]:
        return list(self.k_cts) + [c for group in self.v_groups for c in group]


def empty_cache() -> KVCache:
    return KVCache()


def k_append(engine: BackendBase, cache: KVCache, k_new: CiphertextHandle, cfg: AttentionConfig) -> KVCache:
    """Land a key produced at offset n' mod t in the cache: one addition or none"""
    n = cache.n_prime
    if n >= cfg.n_max:
        raise CacheFull(f"K cache holds {n} of {cfg.n_max} tokens")
    offset = n % cfg.t
    layout = k_new.layout
    if isinstance(layout, InterleavedLayout) and (layout.offset != offset or layout.deferred_mask):
        raise LayoutMismatch(f"key for token {n} must sit clean at offset {offset}, got {layout}")
    if offset == 0:
        k_cts = cache.k_cts + (k_new,)
    else:
        k_cts = cache.k_cts[:-1] + (engine.add(cache.k_cts[-1], k_new),)
    logger.debug("k_append token %d into K ciphertext %d", n, len(k_cts) - 1)
    return replace(cache, k_cts=k_cts, n_prime=n + 1)


def v_append(engine: BackendBase, cache: KVCache, v_new_parts: Sequence[CiphertextHandle],
             cfg: AttentionConfig) -> KVCache:
    """Add the d/H distributed column pieces of one value vector.

    The first token of a group seeds fresh ciphertexts without additions.
    """
    tau = cache.v_tokens
    if tau >= cfg.n_max:
        raise CacheFull(f"V cache holds {tau} of {cfg.n_max} tokens")
    if len(v_new_parts) != cfg.d_head:
        raise ShapeMismatch(f"expected {cfg.d_head} value pieces, got {len(v_new_parts)}")
    group = tau // (cfg.N // cfg.H)
    if group == len(cache.v_groups):
        groups = cache.v_groups + (tuple(v_new_parts),)
    else:
        merged = tuple(engine.add(old, new) for old, new in zip(cache.v_groups[group], v_new_parts))
        groups = cache.v_groups[:group] + (merged,) + cache.v_groups[group + 1:]
    return replace(cache, v_groups=groups, v_tokens=tau + 1)


def distribute_v(engine: BackendBase, v_out: CiphertextHandle, cfg: AttentionConfig,
                 token_index: int) -> List[CiphertextHandle]:
    """Split a value vector at offset tau mod t into its d/H cache pieces.

    Piece j keeps the elements j*H + h (vcache mask fused into the
    extraction) and moves them to the map slots of token tau.
    """
    t, H = cfg.t, cfg.H
    c_local = (token_index // t) % (cfg.N // (t * H))
    pieces = []
    for j in range(cfg.d_head):
        piece = fused_extract(engine, v_out, Successor("vcache-mask", column=j))
        piece = engine.rotate(piece, t * H * (j - c_local))
        pieces.append(with_layout(piece, cfg.map_layout(token_index + 1)))
    return pieces


def replicate_query(engine: BackendBase, q: CiphertextHandle, cfg: AttentionConfig) -> CiphertextHandle:
    """Copy each query element into the t slots of its interleave window"""
    layout = q.layout
    if isinstance(layout, InterleavedLayout) and (layout.offset != 0 or layout.deferred_mask):
        raise LayoutMismatch("query must be clean at offset 0 before replication")
    for l in range(log2i(cfg.t)):
        q = engine.add(q, engine.rotate(q, -(1 << l)))
    return q


def qk_dot(engine: BackendBase, q: CiphertextHandle, cache: KVCache, cfg: AttentionConfig,
           n_prime: Optional[int] = None) -> List[CiphertextHandle]:
    """Attention scores of a query against the first n' cached keys.

    Returns one map ciphertext per N/H tokens; with H = 1 and n' <= N the
    single map is [m_0, ..., m_{n'-1}, 0, ...]. Every map slot outside the
    n' valid tokens is zero.
    """
    n = cache.n_prime if n_prime is None else n_prime
    if n <= 0 or cache.n_k == 0:
        raise CacheEmpty("attention over an empty K cache")
    if n > cache.n_prime:
        raise ShapeMismatch(f"{n} tokens requested from a cache of {cache.n_prime}")

    t, H, N = cfg.t, cfg.H, cfg.N
    hidden = cfg.hidden_layout()
    per_map = N // (t * H)
    map_layout = cfg.map_layout(n)
    q_rep = replicate_query(engine, q, cfg)

    maps: List[Optional[CiphertextHandle]] = [None] * map_layout.n_maps
    for c_idx in range(-(-n // t)):
        prod = engine.mul(q_rep, cache.k_cts[c_idx])
        # sum the d_head elements of every head into the first t*H slots
        for l in range(log2i(cfg.d_head)):
            prod = engine.add(prod, engine.rotate(prod, (t * H) << l))
        lanes = min(t, n - c_idx * t)
        prod = engine.mul(prod, make_mask(hidden, "replicate-extract", n_tokens=lanes))
        prod = engine.rotate(prod, -(c_idx % per_map) * t * H)
        g = c_idx // per_map
        maps[g] = prod if maps[g] is None else engine.add(maps[g], prod)
    return [with_layout(m, map_layout) for m in maps]


def softmax_times_v(engine: BackendBase, scores: Sequence[CiphertextHandle], cache: KVCache,
                    cfg: AttentionConfig) -> CiphertextHandle:
    """Score-weighted sum of cached values, clean interleaved at offset 0.

    Consumes exactly two levels: the ct-ct product and the column mask.
    """
    if isinstance(scores, CiphertextHandle):
        scores = [scores]
    if len(scores) > len(cache.v_groups):
        raise ShapeMismatch(f"{len(scores)} score maps for {len(cache.v_groups)} value groups")
    t, H = cfg.t, cfg.H
    hidden = cfg.hidden_layout()
    out = None
    for j in range(cfg.d_head):
        acc = engine.add_many(engine.mul(sc, cache.v_groups[g][j]) for g, sc in enumerate(scores))
        for l in range(log2i(t)):
            acc = engine.add(acc, engine.rotate(acc, 1 << l))
        for l in range(log2i(cfg.N // (t * H))):
            acc = engine.add(acc, engine.rotate(acc, (t * H) << l))
        acc = engine.mul(acc, column_mask(hidden, j))
        out = acc if out is None else engine.add(out, acc)
    return with_layout(out, hidden)


def _ensure_level(engine: BackendBase, c: CiphertextHandle, need: int) -> CiphertextHandle:
    if c.level >= need:
        return c
    return engine.bootstrap(c, engine.L)


@dataclass(frozen=True)
class AttentionWeights:
    """Head-reordered projection matrices (queries pre-scaled by 1/sqrt(d_head))"""

    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray


def prefill(engine: BackendBase, x_prompt: Sequence[CiphertextHandle], weights: AttentionWeights,
            cfg: AttentionConfig, rope_base: float = 10000.0,
            softmax_fn: Optional[SoftmaxFn] = None) -> Tuple[List[CiphertextHandle], KVCache]:
    """Causal attention over a prompt packed t tokens per batched ciphertext.

    Keys and values come from the batched VMM and land directly in cache
    order; each query is then extracted from its lane and attends to the
    tokens up to itself. Returns the batched attention outputs (before the
    output projection) and the cache, with every cache ciphertext
    bootstrapped to the top level. Levels are restored just in time.
    """
    softmax_fn = softmax_fn or exact_softmax
    t, H, N = cfg.t, cfg.H, cfg.N
    n0 = sum((c.layout.lanes if isinstance(c.layout, InterleavedLayout) else t) for c in x_prompt)
    if n0 > cfg.n_max:
        raise CacheFull(f"prompt of {n0} tokens exceeds n_max={cfg.n_max}")
    diagonals = [batched_diagonals(W, N) for W in (weights.W_q, weights.W_k, weights.W_v)]
    per_map = N // (t * H)

    queries, k_cts, v_groups = [], [], []
    for b, x in enumerate(x_prompt):
        if not isinstance(x.layout, InterleavedLayout) or x.layout.kind != "batched":
            raise LayoutMismatch("prefill input must use the batched layout")
        x = _ensure_level(engine, x, 2)
        q, k, v = vmm_batched(engine, x, diagonals)
        positions = tuple(b * t + s for s in range(t))
        rope = Successor("rope", RoPEParams(cfg.d_head, positions, rope_base))
        queries.append(fused_extract(engine, q, rope))
        k_cts.append(fused_extract(engine, k, rope))

        c_local = b % per_map
        pieces = []
        for j in range(cfg.d_head):
            piece = fused_extract(engine, v, Successor("vcache-mask", column=j))
            pieces.append(engine.rotate(piece, t * H * (j - c_local)))
        group = (b * t) // (N // H)
        if group == len(v_groups):
            v_groups.append(pieces)
        else:
            v_groups[group] = [engine.add(a, p) for a, p in zip(v_groups[group], pieces)]

    map_layout = cfg.map_layout(n0)
    k_cts = [with_layout(engine.bootstrap(c, engine.L), cfg.hidden_layout()) for c in k_cts]
    v_groups = [tuple(with_layout(engine.bootstrap(c, engine.L), map_layout) for c in grp) for grp in v_groups]
    cache = KVCache(k_cts=tuple(k_cts), v_groups=tuple(v_groups), n_prime=n0, v_tokens=n0)

    hidden = cfg.hidden_layout()
    outputs = []
    for b, qb in enumerate(queries):
        lanes = x_prompt[b].layout.lanes
        qb = _ensure_level(engine, qb, 3)
        packed = None
        for s in range(lanes):
            tau = b * t + s
            q_tau = engine.rotate(engine.mul(qb, make_mask(hidden, "cache-slot", offset=s)), s)
            q_tau = with_layout(q_tau, hidden)
            scores = softmax_fn(engine, qk_dot(engine, q_tau, cache, cfg, n_prime=tau + 1), tau + 1)
            scores = [_ensure_level(engine, sc, 2) for sc in scores]
            o = softmax_times_v(engine, scores, cache, cfg)
            o = engine.rotate(o, -s)
            packed = o if packed is None else engine.add(packed, o)
        outputs.append(with_layout(packed, cfg.batch_layout(lanes)))
    logger.debug("prefill built cache of %d tokens in %d K ciphertexts", n0, cache.n_k)
    return outputs, cache


def plaintext_attention(q: np.ndarray, K: np.ndarray, V: np.ndarray, H: int,
                        softmax: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Reference per-head scores (H, n) and the score-weighted values (d,).

    q, K, V use the head-reordered element order. With softmax=False the
    raw scores weight the values directly.
    """
    d = q.shape[0]
    n = K.shape[0]
    d_head = d // H
    scores = np.zeros((H, n))
    out = np.zeros(d)
    for h in range(H):
        idx = np.arange(d_head) * H + h
        s = K[:, idx] @ q[idx]
        if softmax:
            s = np.exp(s - s.max())
            s = s / s.sum()
        scores[h] = s
        out[idx] = s @ V[:, idx]
    return scores, out
