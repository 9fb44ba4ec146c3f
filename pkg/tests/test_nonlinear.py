"""Polynomial and Goldschmidt approximations, traces and profiling."""
import math

import numpy as np
import pytest

from conftest import make_engine
from errors import DomainViolation
from layouts import AttentionMapLayout, InterleavedLayout, decode_interleaved, encode_interleaved
from nonlinear import (
    ApproxSpec,
    SubLayerStep,
    approx_exp,
    approx_gelu,
    approx_norm,
    approx_silu,
    approx_softmax,
    choose_iterations,
    default_spec,
    exact_norm,
    exact_softmax,
    goldschmidt,
    goldschmidt_plain,
    group_steps,
    inverse_depth,
    map_state,
    poly_depth,
    profile_ranges,
    rmse_bits,
    rsqrt_depth,
    sublayer_trace,
)
from verify import check_nonlinear


def interleaved(engine, x, d=32, t=8):
    layout = InterleavedLayout(d=d, t=t)
    return engine.encrypt(encode_interleaved(x, layout), layout=layout), layout


# =============================================================================
# Goldschmidt
# =============================================================================


class TestGoldschmidt:

    def test_plain_iteration_converges(self):
        v = np.linspace(0.05, 1.0, 50)
        assert np.allclose(goldschmidt_plain(v, "inverse", 8), 1.0 / v, rtol=1e-9)
        assert np.allclose(goldschmidt_plain(v, "rsqrt", 10), 1.0 / np.sqrt(v), rtol=1e-6)

    def test_tighter_targets_need_more_iterations(self):
        loose = choose_iterations("inverse", (1.0 / 64, 1.0), 2.0 ** -8)
        tight = choose_iterations("inverse", (1.0 / 64, 1.0), 2.0 ** -30)
        assert tight > loose

    @pytest.mark.parametrize("kind,domain", [("inverse", (1.0 / 32, 1.0)), ("rsqrt", (0.25, 1.0))])
    def test_ciphertext_matches_cleartext(self, kind, domain, rng):
        engine = make_engine(64, 40)
        n = choose_iterations(kind, domain, 2.0 ** -20)
        spec = ApproxSpec(function=kind, domain=domain, iterations=n)
        v = rng.uniform(*domain, size=64)
        out = goldschmidt(engine, engine.encrypt(v), kind, spec)
        exact = 1.0 / v if kind == "inverse" else 1.0 / np.sqrt(v)
        assert rmse_bits(engine.decrypt(out), exact) >= 16
        depth = inverse_depth(n) if kind == "inverse" else rsqrt_depth(n)
        assert out.level == engine.L - depth

    def test_out_of_domain_raises_in_debug(self):
        engine = make_engine(64, 40)
        spec = ApproxSpec(function="inverse", domain=(0.1, 1.0), iterations=4)
        c = engine.encrypt(np.full(64, 2.0))
        with pytest.raises(DomainViolation):
            goldschmidt(engine, c, "inverse", spec, debug=True)


# =============================================================================
# Approximated layers
# =============================================================================


class TestApproximations:

    def test_silu_accuracy_and_depth(self, rng):
        engine = make_engine(256, 20)
        x = rng.uniform(-8.0, 8.0, size=32)
        c, layout = interleaved(engine, x)
        out = approx_silu(engine, c, default_spec("silu", (-8.0, 8.0)))
        got = decode_interleaved(out.slots, layout)
        assert rmse_bits(got, x / (1.0 + np.exp(-x))) >= 8
        assert out.level == engine.L - 1 - poly_depth(127)

    def test_gelu_accuracy(self, rng):
        engine = make_engine(256, 20)
        x = rng.uniform(-6.0, 6.0, size=32)
        c, layout = interleaved(engine, x)
        out = approx_gelu(engine, c, default_spec("gelu", (-6.0, 6.0)))
        expected = 0.5 * x * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))
        assert rmse_bits(decode_interleaved(out.slots, layout), expected) >= 8
        with pytest.raises(ValueError):
            approx_gelu(engine, c, default_spec("silu", (-6.0, 6.0)))

    def test_exp_over_wide_domain(self):
        engine = make_engine(256, 20)
        domain = (-24.38, 23.12)
        x = np.append(np.linspace(*domain, 31), 0.0)
        c, layout = interleaved(engine, x)
        spec = default_spec("exp", domain)
        out = approx_exp(engine, c, spec)
        got = decode_interleaved(out.slots, layout)
        assert np.allclose(got, np.exp(x), rtol=1e-6, atol=0.0)
        assert got[-1] == pytest.approx(1.0, abs=1e-6)
        assert c.level - out.level == sublayer_trace("exp", spec).total_depth

    def test_silu_clamps_in_release_mode(self):
        engine = make_engine(256, 20)
        x = np.zeros(32)
        x[3] = 5.0
        c, layout = interleaved(engine, x)
        out = approx_silu(engine, c, default_spec("silu", (-2.0, 2.0)), debug=False)
        got = decode_interleaved(out.slots, layout)
        assert got[3] == pytest.approx(2.0 / (1.0 + np.exp(-2.0)), abs=1e-3)

    def test_silu_raises_in_debug_mode(self):
        engine = make_engine(256, 20)
        c, _ = interleaved(engine, np.full(32, 5.0))
        with pytest.raises(DomainViolation):
            approx_silu(engine, c, default_spec("silu", (-2.0, 2.0)), debug=True)

    def test_rms_norm(self, rng):
        engine = make_engine(256, 40)
        z = rng.standard_normal(32)
        x = z / np.sqrt(np.mean(z * z)) * 1.2
        c, layout = interleaved(engine, x)
        gamma = rng.uniform(0.5, 1.5, size=32)
        out = approx_norm(engine, c, layout, default_spec("norm", (0.5, 2.0)), gamma=gamma, center=False)
        expected = x / np.sqrt(np.mean(x * x)) * gamma
        assert rmse_bits(decode_interleaved(out.slots, layout), expected) >= 8

    def test_layer_norm_matches_exact(self, rng):
        engine = make_engine(256, 40)
        x = rng.standard_normal(32) + 0.3
        c, layout = interleaved(engine, x)
        xc = x - x.mean()
        ms = float(np.mean(xc * xc))
        spec = default_spec("norm", (ms / 2, ms * 2))
        approx = approx_norm(engine, c, layout, spec, center=True)
        exact = exact_norm(engine, c, center=True)
        assert rmse_bits(decode_interleaved(approx.slots, layout), decode_interleaved(exact.slots, layout)) >= 8

    def test_softmax_rows_sum_to_one(self, rng):
        engine = make_engine(64, 60)
        maps = AttentionMapLayout(N=64, t=4, H=2, n_tokens=6)
        slots = np.zeros(64)
        for h in range(2):
            for tau in range(6):
                slots[maps.locate(h, tau)[1]] = rng.uniform(-3.0, 3.0)
        c = engine.encrypt(slots, layout=maps)
        approx = approx_softmax(engine, c, 6, default_spec("softmax", (-4.0, 4.0), n_max=8))
        exact = exact_softmax(engine, [c], 6)[0]
        valid = maps.token_masks(6)[0] != 0
        assert rmse_bits(approx.slots[valid], exact.slots[valid]) >= 8
        for h in range(2):
            total = sum(approx.slots[maps.locate(h, tau)[1]] for tau in range(6))
            assert total == pytest.approx(1.0, abs=1e-2)

    def test_exact_softmax_zeroes_other_slots(self, rng):
        engine = make_engine(64, 4)
        maps = AttentionMapLayout(N=64, t=4, H=2, n_tokens=3)
        c = engine.encrypt(rng.standard_normal(64), layout=maps)
        out = exact_softmax(engine, [c], 3)[0]
        valid = maps.token_masks(3)[0] != 0
        assert np.all(out.slots[~valid] == 0.0)
        assert out.slots[valid].sum() == pytest.approx(2.0)
        assert out.level == c.level

    def test_self_check_suite(self):
        failed = [check.name for check in check_nonlinear() if not check.passed]
        assert not failed, f"failed checks: {failed}"


# =============================================================================
# Traces and schedules
# =============================================================================


class TestTraces:

    def test_norm_groups(self):
        spec = default_spec("norm", (0.5, 2.0))
        groups = sublayer_trace("norm", spec).groups()
        assert [g.name for g in groups] == ["norm-scale", "norm-variance+norm-rsqrt+norm-normalize"]
        assert groups[1].depth == 2 + rsqrt_depth(spec.iterations)

    def test_softmax_trace_depth(self):
        spec = default_spec("softmax", (-4.0, 4.0), n_max=16)
        trace = sublayer_trace("softmax", spec)
        r = spec.squarings
        per_round = 2 + inverse_depth(spec.iterations)
        assert trace.total_depth == 1 + poly_depth(spec.degree) + (r + 1) * per_round + r
        assert sum(g.depth for g in trace.groups()) == trace.total_depth
        assert len(trace.interruptible()) >= r + 2

    def test_more_maps_remove_boundaries(self):
        spec = default_spec("softmax", (-4.0, 4.0), n_max=16)
        one = sublayer_trace("softmax", spec, n_maps=1).interruptible()
        two = sublayer_trace("softmax", spec, n_maps=2).interruptible()
        assert len(two) < len(one)

    def test_group_steps(self):
        def noop(engine, state):
            return state

        steps = [SubLayerStep("a", 1, 1, noop), SubLayerStep("b", 1, 2, noop),
                 SubLayerStep("c", 2, 1, noop), SubLayerStep("d", 1, 3, noop)]
        assert [name for name, _ in group_steps(steps)] == ["a", "b+c", "d"]

    def test_map_state(self, engine):
        a, b = engine.encrypt(np.ones(64)), engine.encrypt(np.ones(64))
        out = map_state((a, [a, b]), lambda c: engine.level_drop(c, 2))
        assert out[0].level == 2 and [c.level for c in out[1]] == [2, 2]

    def test_depth_budget_checked(self):
        with pytest.raises(ValueError):
            ApproxSpec(function="norm", domain=(0.5, 2.0), iterations=3, depth_budget=2)

    def test_invalid_domains(self):
        with pytest.raises(ValueError):
            ApproxSpec(function="silu", domain=(1.0, 1.0), degree=7)
        with pytest.raises(ValueError):
            ApproxSpec(function="rsqrt", domain=(-1.0, 1.0), iterations=2)

    def test_profile_ranges(self):
        specs = profile_ranges({"silu": np.array([-2.0, 3.0]), "norm": np.array([0.5, 2.0])})
        assert specs["silu"].domain == pytest.approx((-2.75, 3.75))
        assert specs["norm"].domain == pytest.approx((0.4, 2.5))
        assert specs["silu"].degree == 127

    def test_rmse_bits(self):
        assert rmse_bits(np.ones(4), np.ones(4)) == float("inf")
        assert rmse_bits(np.full(4, 1.25), np.ones(4)) == pytest.approx(2.0)
