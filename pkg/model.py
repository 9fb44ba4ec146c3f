#!/usr/bin/env python3

"""
Toy decoder model
Model configuration, seeded weights, the weight directory format and the
cleartext forward pass every encrypted run is checked against.

Blocks are LLaMA-style: RMSNorm, rotary attention with a KV cache, a
residual add, RMSNorm and a SwiGLU feed-forward network. Weights use the
natural head-major element order (head h owns elements h*d_head ..).
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from errors import ShapeMismatch
from layouts import load_weights, save_weights
from slot_engine import is_power_of_two

logger = logging.getLogger(__name__)

SEED_ENV = "SLOTFORGE_SEED"
BLOCK_TENSORS = ("norm1", "W_q", "W_k", "W_v", "W_o", "norm2", "W_up", "W_gate", "W_down")


class ModelConfig(BaseModel):
    """Shape, parameter set and run settings of the toy decoder"""

    model_config = ConfigDict(frozen=True)

    d: int = 64
    H: int = 4
    n_layers: int = 2
    ffn_alpha: int = 4
    N: int = 256
    L: int = 13
    rope_base: float = 10000.0
    mode: Literal["exact", "approx"] = "exact"
    seed: int = 0
    n0: int = 8
    gen: int = 8
    vocab: int = 32
    norm_eps: float = 1e-5

    @model_validator(mode="after")
    def _check_shape(self) -> "ModelConfig":
        for name in ("N", "d", "H", "ffn_alpha"):
            if not is_power_of_two(getattr(self, name)):
                raise ValueError(f"{name} must be a power of two, got {getattr(self, name)}")
        if self.d % self.H or (self.d // self.H) % 2:
            raise ValueError(f"d={self.d} must split into H={self.H} heads of even size")
        if self.d * self.ffn_alpha > self.N or self.d * self.d < self.N:
            raise ValueError(f"need d*d >= N and d*alpha <= N, got d={self.d}, alpha={self.ffn_alpha}, N={self.N}")
        if self.n_layers < 1 or self.L < 1:
            raise ValueError("need at least one block and one level")
        if self.n0 < 1 or self.gen < 0:
            raise ValueError(f"need n0 >= 1 and gen >= 0, got n0={self.n0}, gen={self.gen}")
        if self.vocab < 2:
            raise ValueError("vocabulary needs at least two tokens")
        return self

    @property
    def d_head(self) -> int:
        return self.d // self.H

    @property
    def t(self) -> int:
        return self.N // self.d

    @property
    def n_max(self) -> int:
        """Cache capacity: the prompt plus one token per decode step"""
        return self.n0 + self.gen

    @classmethod
    def load(cls, path: str) -> "ModelConfig":
        with open(path, "r") as f:
            data = json.load(f)
        return apply_env_overrides(cls.model_validate(data))

    def save(self, path: str):
        with open(path, "w") as f:
            f.write(self.model_dump_json(indent=2))


def apply_env_overrides(cfg: ModelConfig) -> ModelConfig:
    """SLOTFORGE_SEED replaces the configured seed when it holds an integer"""
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return cfg
    try:
        seed = int(raw)
    except ValueError:
        logger.warning("ignoring %s=%r: not an integer", SEED_ENV, raw)
        return cfg
    return cfg.model_copy(update={"seed": seed})


@dataclass(frozen=True)
class BlockWeights:
    norm1: np.ndarray
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W_o: np.ndarray
    norm2: np.ndarray
    W_up: np.ndarray
    W_gate: np.ndarray
    W_down: np.ndarray


@dataclass(frozen=True)
class ModelWeights:
    embed: np.ndarray
    blocks: Tuple[BlockWeights, ...]
    final_norm: np.ndarray
    unembed: np.ndarray

    def check(self, cfg: ModelConfig):
        d, f = cfg.d, cfg.d * cfg.ffn_alpha
        shapes = {"norm1": (d,), "W_q": (d, d), "W_k": (d, d), "W_v": (d, d), "W_o": (d, d),
                  "norm2": (d,), "W_up": (d, f), "W_gate": (d, f), "W_down": (f, d)}
        if self.embed.shape != (cfg.vocab, d) or self.unembed.shape != (d, cfg.vocab):
            raise ShapeMismatch(f"embedding shapes {self.embed.shape}/{self.unembed.shape} do not match config")
        if self.final_norm.shape != (d,):
            raise ShapeMismatch(f"final norm of shape {self.final_norm.shape}, expected ({d},)")
        if len(self.blocks) != cfg.n_layers:
            raise ShapeMismatch(f"{len(self.blocks)} blocks for n_layers={cfg.n_layers}")
        for b, blk in enumerate(self.blocks):
            for name, shape in shapes.items():
                if getattr(blk, name).shape != shape:
                    raise ShapeMismatch(f"block {b} {name} has shape {getattr(blk, name).shape}, expected {shape}")


def init_weights(cfg: ModelConfig) -> ModelWeights:
    """Seeded Gaussian weights, matrices scaled by 1/sqrt(fan-in)"""
    rng = np.random.default_rng(cfg.seed)
    d, f = cfg.d, cfg.d * cfg.ffn_alpha

    def gauss(rows: int, cols: int) -> np.ndarray:
        return rng.standard_normal((rows, cols)) / math.sqrt(rows)

    def gain() -> np.ndarray:
        return 1.0 + 0.1 * rng.standard_normal(d)

    embed = rng.standard_normal((cfg.vocab, d))
    blocks = tuple(
        BlockWeights(norm1=gain(), W_q=gauss(d, d), W_k=gauss(d, d), W_v=gauss(d, d), W_o=gauss(d, d),
                     norm2=gain(), W_up=gauss(d, f), W_gate=gauss(d, f), W_down=gauss(f, d))
        for _ in range(cfg.n_layers)
    )
    return ModelWeights(embed=embed, blocks=blocks, final_norm=gain(), unembed=gauss(d, cfg.vocab))


def zero_weights(cfg: ModelConfig) -> ModelWeights:
    d, f = cfg.d, cfg.d * cfg.ffn_alpha
    z = np.zeros
    blocks = tuple(
        BlockWeights(norm1=z(d), W_q=z((d, d)), W_k=z((d, d)), W_v=z((d, d)), W_o=z((d, d)),
                     norm2=z(d), W_up=z((d, f)), W_gate=z((d, f)), W_down=z((f, d)))
        for _ in range(cfg.n_layers)
    )
    return ModelWeights(embed=z((cfg.vocab, d)), blocks=blocks, final_norm=z(d), unembed=z((d, cfg.vocab)))


def save_weight_dir(directory: str, weights: ModelWeights):
    save_weights(directory, "embed", weights.embed)
    save_weights(directory, "final_norm", weights.final_norm)
    save_weights(directory, "unembed", weights.unembed)
    for b, blk in enumerate(weights.blocks):
        for name in BLOCK_TENSORS:
            save_weights(directory, f"block{b}.{name}", getattr(blk, name))
    logger.info("wrote %d blocks of weights to %s", len(weights.blocks), directory)


def load_weight_dir(directory: str, cfg: ModelConfig) -> ModelWeights:
    def vector(name: str) -> np.ndarray:
        return load_weights(directory, name).reshape(-1)

    blocks = []
    for b in range(cfg.n_layers):
        tensors = {}
        for name in BLOCK_TENSORS:
            tensors[name] = vector(f"block{b}.{name}") if name.startswith("norm") \
                else load_weights(directory, f"block{b}.{name}")
        blocks.append(BlockWeights(**tensors))
    weights = ModelWeights(embed=load_weights(directory, "embed"), blocks=tuple(blocks),
                           final_norm=vector("final_norm"), unembed=load_weights(directory, "unembed"))
    weights.check(cfg)
    return weights


def has_weight_dir(directory: str) -> bool:
    return os.path.exists(os.path.join(directory, "embed.json"))


def default_prompt(cfg: ModelConfig) -> List[int]:
    rng = np.random.default_rng(cfg.seed + 1)
    return [int(v) for v in rng.integers(0, cfg.vocab, size=cfg.n0)]


# ----------------------------------------------------------------------------
# Cleartext forward pass

def rms_norm(x: np.ndarray, gamma: np.ndarray, eps: float) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x) + eps) * gamma


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def apply_rope(x: np.ndarray, position: int, H: int, base: float = 10000.0) -> np.ndarray:
    """Rotary embedding of a head-major vector: pairs (2m, 2m+1) of every head"""
    heads = np.asarray(x, dtype=np.float64).reshape(H, -1)
    d_head = heads.shape[1]
    theta = position * base ** (-2.0 * np.arange(d_head // 2) / d_head)
    cos, sin = np.cos(theta), np.sin(theta)
    even, odd = heads[:, 0::2], heads[:, 1::2]
    out = np.empty_like(heads)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = odd * cos + even * sin
    return out.reshape(-1)


def final_logits(cfg: ModelConfig, weights: ModelWeights, hidden: np.ndarray) -> np.ndarray:
    """Client-side output norm and vocabulary projection"""
    return rms_norm(hidden, weights.final_norm, cfg.norm_eps) @ weights.unembed


@dataclass
class ReferenceCache:
    """Post-rotary keys and values per block, one row per cached token"""

    keys: List[List[np.ndarray]]
    values: List[List[np.ndarray]]

    @classmethod
    def empty(cls, n_layers: int) -> "ReferenceCache":
        return cls(keys=[[] for _ in range(n_layers)], values=[[] for _ in range(n_layers)])

    def matrices(self, block: int) -> Tuple[np.ndarray, np.ndarray]:
        return np.array(self.keys[block]), np.array(self.values[block])

    @property
    def n_tokens(self) -> int:
        return len(self.keys[0]) if self.keys else 0


@dataclass
class ReferenceResult:
    """hidden[i] and logits[i] belong to prediction i: the last prompt token,
    then one row per decode step"""

    hidden: np.ndarray
    logits: np.ndarray
    tokens: List[int]
    cache: ReferenceCache
    samples: Dict[str, List[np.ndarray]] = field(default_factory=dict)


def _record(samples: Optional[Dict[str, List[np.ndarray]]], name: str, values):
    if samples is not None:
        samples.setdefault(name, []).append(np.atleast_1d(np.asarray(values, dtype=np.float64)))


def forward_token(cfg: ModelConfig, weights: ModelWeights, token: int, position: int,
                  cache: ReferenceCache, samples: Optional[Dict[str, List[np.ndarray]]] = None) -> np.ndarray:
    """One token through every block; appends its keys and values to cache"""
    H, d_head = cfg.H, cfg.d_head
    x = weights.embed[token].astype(np.float64)
    for b, blk in enumerate(weights.blocks):
        _record(samples, "norm", np.mean(x * x))
        a = rms_norm(x, blk.norm1, cfg.norm_eps)
        q = apply_rope(a @ blk.W_q, position, H, cfg.rope_base) / math.sqrt(d_head)
        k = apply_rope(a @ blk.W_k, position, H, cfg.rope_base)
        v = a @ blk.W_v
        cache.keys[b].append(k)
        cache.values[b].append(v)
        K, V = cache.matrices(b)

        attn = np.zeros(cfg.d)
        for h in range(H):
            idx = slice(h * d_head, (h + 1) * d_head)
            scores = K[:, idx] @ q[idx]
            _record(samples, "softmax", scores)
            p = np.exp(scores - scores.max())
            attn[idx] = (p / p.sum()) @ V[:, idx]
        x = x + attn @ blk.W_o

        _record(samples, "norm", np.mean(x * x))
        a = rms_norm(x, blk.norm2, cfg.norm_eps)
        gate = a @ blk.W_gate
        _record(samples, "silu", gate)
        x = x + (silu(gate) * (a @ blk.W_up)) @ blk.W_down
    return x


def plaintext_reference(cfg: ModelConfig, weights: ModelWeights, prompt: Sequence[int], gen_len: int,
                        samples: Optional[Dict[str, List[np.ndarray]]] = None) -> ReferenceResult:
    """Greedy generation in double precision.

    The prompt fills the cache and yields the first prediction; each of the
    gen_len decode steps consumes the latest prediction and yields the next.
    """
    weights.check(cfg)
    if len(prompt) < 1:
        raise ShapeMismatch("prompt needs at least one token")
    cache = ReferenceCache.empty(cfg.n_layers)
    hidden = None
    for pos, token in enumerate(prompt):
        hidden = forward_token(cfg, weights, int(token), pos, cache, samples)

    states, logits, tokens = [hidden], [final_logits(cfg, weights, hidden)], []
    tokens.append(int(np.argmax(logits[-1])))
    for step in range(gen_len):
        hidden = forward_token(cfg, weights, tokens[-1], len(prompt) + step, cache, samples)
        states.append(hidden)
        logits.append(final_logits(cfg, weights, hidden))
        tokens.append(int(np.argmax(logits[-1])))
    return ReferenceResult(hidden=np.array(states), logits=np.array(logits), tokens=tokens,
                           cache=cache, samples=samples if samples is not None else {})


def flatten_samples(samples: Dict[str, List[np.ndarray]]) -> Dict[str, np.ndarray]:
    return {name: np.concatenate(values) for name, values in samples.items() if values}
