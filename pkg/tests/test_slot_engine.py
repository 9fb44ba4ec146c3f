"""Slot engine semantics, the cost ledger and backend discovery."""
import numpy as np
import pytest

from conftest import make_engine
from backend_system import BackendManager, backend_manager, get_app_setting
from errors import BackendError, InvalidTarget, LevelUnderflow
from slot_engine import CostLedger, EngineParams, OpCounters, create_engine, with_layout
from layouts import InterleavedLayout


# =============================================================================
# Operations
# =============================================================================


class TestOperations:

    def test_rotation_moves_slots_left(self, engine):
        c = engine.encrypt(np.arange(64.0))
        out = engine.decrypt(engine.rotate(c, 3))
        assert out[0] == 3.0
        assert out[-1] == 2.0
        assert engine.ledger.snapshot().rotations == 1

    def test_zero_rotation_is_free(self, engine):
        c = engine.encrypt(np.arange(64.0))
        assert engine.rotate(c, 64) is c
        assert engine.ledger.snapshot().all_rotations == 0

    def test_hoisted_rotation_counted_apart(self, engine):
        c = engine.encrypt(np.ones(64))
        engine.rotate(c, 1, hoisted=True)
        counts = engine.ledger.snapshot()
        assert (counts.rotations, counts.hoisted_rotations, counts.all_rotations) == (0, 1, 1)

    def test_multiplication_consumes_one_level(self, engine):
        a = engine.encrypt(np.full(64, 2.0))
        b = engine.encrypt(np.full(64, 3.0), level=5)
        assert engine.mul(a, np.ones(64)).level == engine.L - 1
        prod = engine.mul(a, b)
        assert prod.level == 4
        assert np.allclose(engine.decrypt(prod), 6.0)
        counts = engine.ledger.snapshot()
        assert (counts.ct_pt_mults, counts.ct_ct_mults) == (1, 1)

    def test_multiplication_at_level_zero_underflows(self, engine):
        c = engine.encrypt(np.ones(64), level=0)
        with pytest.raises(LevelUnderflow):
            engine.mul(c, 2.0)

    def test_addition_keeps_first_layout_and_min_level(self, engine):
        layout = InterleavedLayout(d=16, t=4)
        a = engine.encrypt(np.ones(64), level=6, layout=layout)
        b = engine.encrypt(np.ones(64), level=3)
        out = engine.add(a, b)
        assert out.layout == layout
        assert out.level == 3

    def test_bootstrap_and_drop_targets(self, engine):
        c = engine.encrypt(np.ones(64), level=2)
        assert engine.bootstrap(c, 7).level == 7
        assert engine.level_drop(c, 1).level == 1
        with pytest.raises(InvalidTarget):
            engine.bootstrap(c, engine.L + 1)
        with pytest.raises(InvalidTarget):
            engine.level_drop(c, 3)
        assert engine.ledger.snapshot().bootstraps == 1

    def test_exact_group_costs_nothing(self, engine):
        cts = [engine.encrypt(np.full(64, float(v)), level=4) for v in (1, 2)]
        outs = engine.evaluate_exact_group(cts, lambda vs: [v * 10 for v in vs], "scale")
        assert [o.level for o in outs] == [4, 4]
        assert np.allclose(engine.decrypt(outs[1]), 20.0)
        assert engine.ledger.snapshot() == OpCounters()

    def test_with_layout_retags_only(self, engine):
        c = engine.encrypt(np.arange(64.0), level=3)
        layout = InterleavedLayout(d=16, t=4).deferred()
        out = with_layout(c, layout)
        assert out.layout is layout and out.level == 3
        assert np.array_equal(out.slots, c.slots)


# =============================================================================
# Ledger
# =============================================================================


class TestLedger:

    def test_phases_sum_to_totals(self):
        engine = make_engine()
        c = engine.encrypt(np.ones(64))
        with engine.ledger.phase("A"):
            engine.rotate(c, 1)
            with engine.ledger.phase("B"):
                engine.mul(c, 2.0)
        engine.add(c, c)
        phases = engine.ledger.phase_snapshot()
        total = OpCounters()
        for counts in phases.values():
            total.add(counts)
        assert total == engine.ledger.snapshot()
        assert phases["A"].rotations == 1 and phases["B"].ct_pt_mults == 1

    def test_weighted_prices_hoisted_at_half(self):
        counts = OpCounters(rotations=2, hoisted_rotations=2)
        assert counts.weighted({"rotations": 1.0}) == pytest.approx(3.0)

    def test_merge_folds_worker_ledgers(self):
        main, worker = CostLedger(), CostLedger()
        with worker.phase("QKV"):
            worker.record("rotations", 4)
        worker.note_levels("QKV", 8, 7)
        main.merge(worker)
        assert main.phase_snapshot()["QKV"].rotations == 4
        assert main.phase_levels["QKV"].levels_out == 7

    def test_counters_are_monotone(self):
        with pytest.raises(ValueError):
            CostLedger().record("rotations", -1)


# =============================================================================
# Backends
# =============================================================================


class TestBackends:

    def test_simulator_is_discovered(self):
        assert "simulator" in backend_manager.get_available_backends()

    def test_unknown_backend_raises(self):
        with pytest.raises(BackendError):
            create_engine(EngineParams(N=8, L=2), "no-such-backend")

    def test_settings_defaults(self, tmp_path):
        manager = BackendManager(root=str(tmp_path))
        assert manager.enabled_backend == "simulator"
        assert manager.get_app_setting("hoisted_rotation_weight") == 0.5
        assert get_app_setting("missing-setting", 7) == 7

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError):
            EngineParams(N=12, L=3)
        with pytest.raises(ValueError):
            EngineParams(N=16, L=0)
