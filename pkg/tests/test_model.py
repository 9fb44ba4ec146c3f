"""Toy model configuration, weights and the cleartext reference."""
import os

import numpy as np
import pytest

from conftest import ROOT, toy_config
from errors import ShapeMismatch
from model import (
    ModelConfig,
    apply_rope,
    default_prompt,
    final_logits,
    flatten_samples,
    has_weight_dir,
    init_weights,
    load_weight_dir,
    plaintext_reference,
    save_weight_dir,
    zero_weights,
)


# =============================================================================
# Configuration
# =============================================================================


class TestConfig:

    def test_defaults_are_valid(self):
        cfg = ModelConfig()
        assert (cfg.d_head, cfg.t, cfg.n_max) == (16, 4, 16)

    @pytest.mark.parametrize("overrides", [
        dict(H=3),
        dict(d=16, H=16),
        dict(ffn_alpha=8),
        dict(N=8192),
        dict(n0=0),
        dict(vocab=1),
        dict(mode="fast"),
    ])
    def test_invalid_configs(self, overrides):
        with pytest.raises(ValueError):
            ModelConfig(**overrides)

    def test_load_and_save(self, tmp_path):
        path = str(tmp_path / "model.json")
        toy_config().save(path)
        assert ModelConfig.load(path) == toy_config()

    def test_seed_from_environment(self, tmp_path, monkeypatch):
        path = str(tmp_path / "model.json")
        toy_config().save(path)
        monkeypatch.setenv("SLOTFORGE_SEED", "42")
        assert ModelConfig.load(path).seed == 42

    def test_bad_seed_is_ignored(self, tmp_path, monkeypatch):
        path = str(tmp_path / "model.json")
        toy_config(seed=5).save(path)
        monkeypatch.setenv("SLOTFORGE_SEED", "forty-two")
        assert ModelConfig.load(path).seed == 5

    def test_shipped_config_loads(self):
        cfg = ModelConfig.load(os.path.join(ROOT, "configs", "toy_model.json"))
        assert (cfg.d, cfg.H, cfg.N, cfg.L) == (64, 4, 256, 13)


# =============================================================================
# Weights
# =============================================================================


class TestWeights:

    def test_seeded_weights_are_reproducible(self, toy_cfg):
        a, b = init_weights(toy_cfg), init_weights(toy_cfg)
        assert np.array_equal(a.blocks[1].W_down, b.blocks[1].W_down)
        other = init_weights(toy_config(seed=4))
        assert not np.array_equal(a.embed, other.embed)

    def test_shapes(self, toy_cfg, toy_weights):
        toy_weights.check(toy_cfg)
        assert toy_weights.blocks[0].W_up.shape == (16, 64)
        assert toy_weights.blocks[0].W_down.shape == (64, 16)

    def test_weight_dir_round_trip(self, tmp_path, toy_cfg, toy_weights):
        directory = str(tmp_path / "weights")
        assert not has_weight_dir(directory)
        save_weight_dir(directory, toy_weights)
        assert has_weight_dir(directory)
        loaded = load_weight_dir(directory, toy_cfg)
        assert np.array_equal(loaded.blocks[1].W_gate, toy_weights.blocks[1].W_gate)
        assert np.array_equal(loaded.final_norm, toy_weights.final_norm)

    def test_weight_dir_for_other_shape(self, tmp_path, toy_weights):
        directory = str(tmp_path / "weights")
        save_weight_dir(directory, toy_weights)
        with pytest.raises(ShapeMismatch):
            load_weight_dir(directory, toy_config(d=32, ffn_alpha=2))


# =============================================================================
# Reference forward pass
# =============================================================================


class TestReference:

    def test_rope_at_position_zero_is_identity(self, rng):
        x = rng.standard_normal(16)
        assert np.allclose(apply_rope(x, 0, 2), x)

    def test_rope_preserves_pair_norms(self, rng):
        x = rng.standard_normal(16)
        y = apply_rope(x, 9, 2)
        assert np.allclose(np.hypot(y[0::2], y[1::2]), np.hypot(x[0::2], x[1::2]))

    def test_default_prompt(self, toy_cfg):
        prompt = default_prompt(toy_cfg)
        assert len(prompt) == toy_cfg.n0
        assert all(0 <= tok < toy_cfg.vocab for tok in prompt)
        assert prompt == default_prompt(toy_cfg)

    def test_generation_shape(self, toy_cfg, toy_weights):
        result = plaintext_reference(toy_cfg, toy_weights, default_prompt(toy_cfg), toy_cfg.gen)
        assert result.hidden.shape == (toy_cfg.gen + 1, toy_cfg.d)
        assert len(result.tokens) == toy_cfg.gen + 1
        assert result.cache.n_tokens == toy_cfg.n0 + toy_cfg.gen
        assert np.allclose(result.logits[-1], final_logits(toy_cfg, toy_weights, result.hidden[-1]))

    def test_generation_is_causal(self, toy_cfg, toy_weights):
        prompt = default_prompt(toy_cfg)
        short = plaintext_reference(toy_cfg, toy_weights, prompt, 1)
        long = plaintext_reference(toy_cfg, toy_weights, prompt, 3)
        assert long.tokens[:2] == short.tokens
        assert np.allclose(long.hidden[:2], short.hidden)

    def test_zero_weights_give_zero_logits(self, toy_cfg):
        result = plaintext_reference(toy_cfg, zero_weights(toy_cfg), [1, 2, 3], 2)
        assert np.all(result.logits == 0.0)
        assert result.tokens == [0, 0, 0]

    def test_samples_recorded(self, toy_cfg, toy_weights):
        samples = {}
        plaintext_reference(toy_cfg, toy_weights, default_prompt(toy_cfg), 1, samples=samples)
        flat = flatten_samples(samples)
        assert set(flat) == {"norm", "softmax", "silu"}
        assert np.all(flat["norm"] > 0)

    def test_empty_prompt(self, toy_cfg, toy_weights):
        with pytest.raises(ShapeMismatch):
            plaintext_reference(toy_cfg, toy_weights, [], 1)
