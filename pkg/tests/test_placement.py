"""Level graph construction, pruning and bootstrap placement."""
import math
import os

import numpy as np
import pytest

from conftest import ROOT
from errors import InfeasibleLayer
from nonlinear import SubLayerTrace, TracePhase
from placement import (
    CostModel,
    LayerSpec,
    PlacementPlan,
    PlanEntry,
    brute_force,
    build_graph,
    count_paths,
    expand_sublayers,
    plan_cost,
    prune_graph,
    random_block,
    random_cost_model,
    solve,
    solve_periodic,
)
from verify import check_placement

pytestmark = pytest.mark.placement


def flat_cost(boot=None) -> CostModel:
    return CostModel(boot_ms=boot or {1: 10.0, 2: 20.0})


def residual_block():
    return [
        LayerSpec(name="norm", depth=1, base_cost=1.0, fork="r"),
        LayerSpec(name="mix", depth=2, base_cost=2.0),
        LayerSpec(name="add", depth=0, base_cost=0.1, join="r"),
    ]


# =============================================================================
# Graph and shortest path
# =============================================================================


class TestShortestPath:

    def test_two_layer_plan_by_hand(self):
        layers = [LayerSpec(name="a", depth=2), LayerSpec(name="b", depth=2)]
        plan = solve(build_graph(layers, flat_cost(), 2))
        # compute a at level 2 (cost 3), bootstrap to 2 (cost 20), compute b (cost 3)
        assert plan.cost == pytest.approx(26.0)
        assert plan.bootstraps == 1
        assert [(e.layer, e.input_level, e.bootstrap_to) for e in plan.entries] == [("a", 2, None), ("b", 2, 2)]
        assert plan.terminal_level == 0

    def test_drop_when_cheaper(self):
        layers = [LayerSpec(name="a", depth=1, base_cost=5.0)]
        plan = solve(build_graph(layers, flat_cost(), 2))
        # a one-level layer computes cheapest at level 1
        assert plan.entries[0].input_level == 1
        assert plan.entries[0].drop_to == 1
        assert plan.cost == pytest.approx(10.0)

    def test_layer_deeper_than_budget(self):
        with pytest.raises(InfeasibleLayer):
            build_graph([LayerSpec(name="deep", depth=5)], flat_cost(), 3)

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        cost = random_cost_model(rng, 4)
        g = build_graph(random_block(rng, 4, 4), cost, 4)
        assert solve(g).cost == pytest.approx(brute_force(g))

    @pytest.mark.parametrize("seed", range(50))
    def test_pruning_keeps_optimum(self, seed):
        rng = np.random.default_rng(100 + seed)
        cost = random_cost_model(rng, 5)
        g = build_graph(random_block(rng, 5, 5), cost, 5)
        pruned = prune_graph(g)
        assert pruned.edge_count < g.edge_count
        assert solve(pruned).cost == pytest.approx(solve(g).cost)

    def test_edges_grow_linearly(self):
        rng = np.random.default_rng(3)
        cost = random_cost_model(rng, 6)
        block = random_block(rng, 5, 6)
        small = build_graph(block * 4, cost, 6).edge_count
        large = build_graph(block * 8, cost, 6).edge_count
        assert 1.8 <= large / small <= 2.2

    @pytest.mark.parametrize("seed", range(50))
    def test_removing_a_bootstrap_never_helps(self, seed):
        rng = np.random.default_rng(300 + seed)
        cost = random_cost_model(rng, 4)
        layers = random_block(rng, 6, 4)
        plan = solve(build_graph(layers, cost, 4))
        assert plan_cost(layers, plan.entries, cost, 4) == pytest.approx(plan.cost)
        for i, entry in enumerate(plan.entries):
            if entry.bootstrap_to is None:
                continue
            # keep the previous layer's output level instead
            level = plan.entries[i - 1].input_level - layers[i - 1].depth
            kept = entry.model_copy(update={"input_level": level, "bootstrap_to": None})
            perturbed = plan_cost(layers, plan.entries[:i] + [kept] + plan.entries[i + 1:], cost, 4)
            assert perturbed >= plan.cost - 1e-9, f"dropping the bootstrap before layer {i} saved cost"

    def test_plan_without_its_bootstrap_is_infeasible(self):
        layers = [LayerSpec(name="a", depth=2), LayerSpec(name="b", depth=2)]
        plan = solve(build_graph(layers, flat_cost(), 2))
        kept = plan.entries[1].model_copy(update={"input_level": 0, "bootstrap_to": None})
        assert plan_cost(layers, plan.entries, flat_cost(), 2) == pytest.approx(26.0)
        assert plan_cost(layers, [plan.entries[0], kept], flat_cost(), 2) == math.inf

    def test_replay_rejects_raised_level(self):
        layers = [LayerSpec(name="a", depth=1), LayerSpec(name="b", depth=1)]
        entries = [PlanEntry(layer="a", input_level=2), PlanEntry(layer="b", input_level=2)]
        assert plan_cost(layers, entries, flat_cost(), 2) == math.inf
        with pytest.raises(ValueError):
            plan_cost(layers, entries[:1], flat_cost(), 2)

    def test_brute_force_cap(self):
        rng = np.random.default_rng(0)
        g = build_graph(random_block(rng, 6, 6, max_depth=1), random_cost_model(rng, 6), 6)
        assert count_paths(g) > 10
        with pytest.raises(ValueError):
            brute_force(g, max_paths=10)


# =============================================================================
# Residual branches
# =============================================================================


class TestResiduals:

    def test_join_uses_branch_level(self):
        g = build_graph(residual_block(), flat_cost({1: 5.0, 4: 50.0}), 4)
        assert solve(g).cost == pytest.approx(brute_force(g))

    def test_branches_disable_pruning(self):
        g = build_graph(residual_block(), flat_cost({1: 5.0, 4: 50.0}), 4)
        assert prune_graph(g).edge_count == g.edge_count

    def test_join_never_exceeds_branch(self):
        plan = solve(build_graph(residual_block(), flat_cost({1: 5.0, 4: 50.0}), 4))
        norm, mix, add = plan.entries
        # the sum is computed at min(main, branch) and the branch holds norm's input level
        assert add.input_level <= mix.input_level
        assert norm.input_level >= 1


# =============================================================================
# Periodic blocks
# =============================================================================


class TestPeriodic:

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_unrolled(self, seed):
        rng = np.random.default_rng(50 + seed)
        cost = random_cost_model(rng, 5)
        block = random_block(rng, 3, 5)
        periodic = solve_periodic(block, 4, cost, 5)
        unrolled = solve(build_graph(block * 4, cost, 5))
        assert periodic.cost == pytest.approx(unrolled.cost)
        assert len(periodic.entries) == 12

    def test_matches_unrolled_with_branches(self):
        cost = flat_cost({1: 5.0, 4: 50.0})
        periodic = solve_periodic(residual_block(), 3, cost, 4)
        unrolled = solve(build_graph(residual_block() * 3, cost, 4))
        assert periodic.cost == pytest.approx(unrolled.cost)
        assert periodic.bootstraps == unrolled.bootstraps

    def test_single_block(self):
        rng = np.random.default_rng(9)
        cost = random_cost_model(rng, 4)
        block = random_block(rng, 4, 4)
        assert solve_periodic(block, 1, cost, 4).cost == pytest.approx(solve(build_graph(block, cost, 4)).cost)

    def test_block_work_independent_of_repetitions(self):
        rng = np.random.default_rng(21)
        cost = random_cost_model(rng, 5)
        block = random_block(rng, 4, 5)
        solve_periodic(block, 2, cost, 5)
        few = solve_periodic.last_relaxations
        solve_periodic(block, 16, cost, 5)
        many = solve_periodic.last_relaxations
        solve_periodic(block * 2, 2, cost, 5)
        longer = solve_periodic.last_relaxations
        assert many[0] == few[0], f"block relaxations {few[0]} at 2 blocks, {many[0]} at 16"
        assert many[1] > few[1]
        assert longer[0] > few[0]

    def test_needs_a_block(self):
        with pytest.raises(ValueError):
            solve_periodic([], 2, flat_cost(), 3)

    def test_self_check_suite(self):
        failed = [check.name for check in check_placement() if not check.passed]
        assert not failed, f"failed checks: {failed}"


# =============================================================================
# Sub-layer expansion
# =============================================================================


class TestSublayers:

    @pytest.fixture
    def deep_layer(self):
        trace = SubLayerTrace(function="softmax", phases=[
            TracePhase(name="exp", depth=3, count=1),
            TracePhase(name="sum", depth=1, count=2),
            TracePhase(name="normalize", depth=2, count=1),
        ])
        return LayerSpec(name="softmax", depth=6, base_cost=3.0, width=1, sublayers=trace)

    def test_expansion_shape(self, deep_layer):
        parts = expand_sublayers([deep_layer])
        assert [p.name for p in parts] == ["softmax/exp", "softmax/sum+normalize"]
        assert [p.depth for p in parts] == [3, 3]
        assert all(p.layer == "softmax" for p in parts)
        assert sum(p.base_cost for p in parts) == pytest.approx(3.0)

    def test_phase_names_with_plus_signs(self):
        trace = SubLayerTrace(function="gelu", phases=[
            TracePhase(name="x+y", depth=1, count=1),
            TracePhase(name="z", depth=1, count=2),
            TracePhase(name="w", depth=1, count=1),
        ])
        parts = expand_sublayers([LayerSpec(name="gelu", depth=3, base_cost=3.0, sublayers=trace)])
        assert [p.name for p in parts] == ["gelu/x+y", "gelu/z+w"]
        assert [p.base_cost for p in parts] == pytest.approx([1.0, 2.0])

    def test_bootstrap_inside_layer_makes_it_feasible(self, deep_layer):
        with pytest.raises(InfeasibleLayer):
            build_graph([deep_layer], flat_cost(), 4)
        plan = solve(build_graph(expand_sublayers([deep_layer]), flat_cost(), 4))
        assert plan.bootstraps == 1
        assert plan.entries[1].sublayer == "sum+normalize"

    def test_expansion_never_costs_more(self, deep_layer):
        layers = [LayerSpec(name="proj", depth=1, base_cost=1.0), deep_layer]
        cost = flat_cost({1: 10.0, 12: 60.0})
        coarse = solve(build_graph(layers, cost, 12)).cost
        fine = solve(build_graph(expand_sublayers(layers), cost, 12)).cost
        assert fine <= coarse + 1e-9

    def test_trace_depth_must_match(self, deep_layer):
        with pytest.raises(ValueError):
            LayerSpec(name="bad", depth=5, sublayers=deep_layer.sublayers)


# =============================================================================
# Cost model and plan files
# =============================================================================


class TestCostModel:

    def test_bootstrap_interpolation(self):
        cost = CostModel()
        assert cost.t_boot(1) == pytest.approx(51.30)
        assert cost.t_boot(13) == pytest.approx(125.58)
        assert cost.t_boot(1) < cost.t_boot(2) < cost.t_boot(4)

    def test_decreasing_table_rejected(self):
        with pytest.raises(ValueError):
            CostModel(boot_ms={1: 50.0, 2: 40.0})

    def test_table_round_trip(self, tmp_path):
        path = str(tmp_path / "cost.json")
        CostModel(boot_ms={1: 3.0, 8: 9.0}).to_table(path)
        loaded = CostModel.from_table(path)
        assert loaded.t_boot(8) == pytest.approx(9.0)

    def test_shipped_table_loads(self):
        cost = CostModel.from_table(os.path.join(ROOT, "configs", "cost_table.json"))
        assert cost.hoisted_rotation_weight == 0.5
        assert cost.t_boot(13) > cost.t_boot(1)

    def test_plan_round_trip(self, tmp_path):
        plan = solve(build_graph([LayerSpec(name="a", depth=2), LayerSpec(name="b", depth=2)], flat_cost(), 2))
        path = str(tmp_path / "plan.json")
        plan.to_json(path)
        loaded = PlacementPlan.from_json(path)
        assert loaded.entries == plan.entries
        assert loaded.bootstraps == 1
