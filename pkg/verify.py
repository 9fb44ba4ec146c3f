#!/usr/bin/env python3

"""
Self-checks for the slot kernels, attention, approximations and placement.
Each suite returns named checks; the CLI prints them as ✓/✗ lines.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from harness import bench_vmm
from kv_attention import (
    AttentionConfig,
    AttentionWeights,
    KVCache,
    distribute_v,
    k_append,
    prefill as prefill_attention,
    v_append,
)
from layouts import InterleavedLayout, encode_batched, encode_interleaved, extract_diagonals, plan_vmm
from nonlinear import (
    ApproxSpec,
    approx_norm,
    approx_silu,
    approx_softmax,
    choose_iterations,
    default_spec,
    exact_norm,
    exact_silu,
    exact_softmax,
    goldschmidt,
    rmse_bits,
)
from placement import (
    brute_force,
    build_graph,
    plan_cost,
    prune_graph,
    random_block,
    random_cost_model,
    solve,
    solve_periodic,
)
from slot_engine import EngineParams, create_engine
from vmm import RoPEParams, Successor, expected_rotations, fused_extract, vmm_generalized

logger = logging.getLogger(__name__)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


def _rotations(report) -> int:
    return report.extras["all_rotations"]


def _ctpt(report) -> int:
    return report.phases[0].ctpt_mult


# ----------------------------------------------------------------------------
# VMM

INTERLEAVED_COUNTS = ((4096, 52), (2048, 30), (768, 20))
TOY_COUNTS = {"direct": (6, 2), "replicated": (5, 3), "interleaved": (3, 1)}


def check_vmm() -> List[Check]:
    checks = []
    for d, rotations in INTERLEAVED_COUNTS:
        report = bench_vmm(32768, d)
        got = _rotations(report)
        checks.append(Check(f"interleaved VMM d={d}: {rotations} rotations", got == rotations, f"got {got}"))
    report = bench_vmm(32768, 4096)
    checks.append(Check("interleaved VMM d=4096: 512 ct-pt products", _ctpt(report) == 512,
                        f"got {_ctpt(report)}"))
    plan = plan_vmm(32768, 4096, 4096)
    checks.append(Check("closed-form rotation count matches", expected_rotations(plan) == 52,
                        f"got {expected_rotations(plan)}"))

    direct = bench_vmm(32768, 4096, scheme="direct", bsgs=True)
    checks.append(Check("direct BSGS d=4096: 252 rotations", _rotations(direct) == 252,
                        f"got {_rotations(direct)}"))
    replicated = bench_vmm(32768, 4096, scheme="replicated", bsgs=True)
    checks.append(Check("replicated BSGS d=4096: 101 rotations", _rotations(replicated) == 101,
                        f"got {_rotations(replicated)}"))

    for scheme, (rotations, depth) in TOY_COUNTS.items():
        report = bench_vmm(8, 4, scheme=scheme, bsgs=False)
        got = (_rotations(report), report.extras["depth"])
        checks.append(Check(f"{scheme} VMM N=8 d=4: {rotations} rotations, depth {depth}",
                            got == (rotations, depth), f"got {got}"))

    for scheme in TOY_COUNTS:
        for bsgs in (False, True):
            report = bench_vmm(64, 8, scheme=scheme, bsgs=bsgs, seed=3)
            err = report.extras["max_error"]
            checks.append(Check(f"{scheme} VMM product (bsgs={bsgs})", err < 1e-9, f"max error {err:.2e}"))
    for alpha in (2, 4):
        report = bench_vmm(256, 16, alpha=alpha, seed=4)
        err = report.extras["max_error"]
        checks.append(Check(f"up projection alpha={alpha}", err < 1e-9, f"max error {err:.2e}"))
    return checks


# ----------------------------------------------------------------------------
# Attention

def rope_counts(N: int = 256, d: int = 32, H: int = 2) -> Dict[str, int]:
    engine = create_engine(EngineParams(N=N, L=4))
    layout = InterleavedLayout(d=d, t=N // d, H=H).deferred()
    c = engine.encrypt(np.random.default_rng(0).standard_normal(N), layout=layout)
    out = fused_extract(engine, c, Successor("rope", RoPEParams(d // H, 5)))
    counts = engine.ledger.snapshot()
    return {"ct_pt_mults": counts.ct_pt_mults, "rotations": counts.all_rotations, "levels": c.level - out.level}


def append_matches_prefill(N: int = 256, d: int = 32, H: int = 2, n0: int = 5, n_prime: int = 33,
                           seed: int = 0) -> float:
    """Largest slot difference between a cache grown by decode appends and
    one prefilled with the same n' tokens"""
    rng = np.random.default_rng(seed)
    acfg = AttentionConfig(N=N, d=d, H=H, n0=n0, n_max=n_prime)
    t = acfg.t
    weights = AttentionWeights(*(rng.standard_normal((d, d)) / math.sqrt(d) for _ in range(3)))
    X = rng.standard_normal((n_prime, d))

    def prefilled(n):
        engine = create_engine(EngineParams(N=N, L=8))
        batches = []
        for s in range(0, n, t):
            layout = acfg.batch_layout(min(t, n - s))
            batches.append(engine.encrypt(encode_batched(X[s:min(s + t, n)], layout), layout=layout))
        return engine, prefill_attention(engine, batches, weights, acfg)[1]

    _, full = prefilled(n_prime)
    engine, cache = prefilled(n0) if n0 else (create_engine(EngineParams(N=N, L=8)), KVCache())
    sq_plan = plan_vmm(N, d, d)
    dk, dv = extract_diagonals(weights.W_k, sq_plan), extract_diagonals(weights.W_v, sq_plan)
    hidden = acfg.hidden_layout()
    for tau in range(n0, n_prime):
        x = engine.encrypt(encode_interleaved(X[tau], hidden), layout=hidden)
        k = vmm_generalized(engine, x, dk, out_offset=tau % t)
        v = vmm_generalized(engine, x, dv, out_offset=tau % t)
        k = fused_extract(engine, k, Successor("rope", RoPEParams(acfg.d_head, tau)))
        cache = k_append(engine, cache, k, acfg)
        cache = v_append(engine, cache, distribute_v(engine, v, acfg, tau), acfg)

    grown, reference = cache.ciphertexts(), full.ciphertexts()
    if len(grown) != len(reference):
        return math.inf
    return float(max(np.max(np.abs(a.slots - b.slots)) for a, b in zip(grown, reference)))


def check_attention() -> List[Check]:
    checks = []
    counts = rope_counts()
    want = {"ct_pt_mults": 3, "rotations": 2, "levels": 1}
    checks.append(Check("RoPE: 3 ct-pt products, 2 rotations, 1 level", counts == want, f"got {counts}"))
    for n0 in (0, 5, 8):
        diff = append_matches_prefill(n0=n0)
        checks.append(Check(f"appends from n0={n0} up to 33 tokens match prefill", diff < 1e-9,
                            f"max slot difference {diff:.2e}"))
    return checks


# ----------------------------------------------------------------------------
# Approximations

def _engine(N: int = 256, L: int = 64):
    return create_engine(EngineParams(N=N, L=L))


def check_nonlinear(min_bits: float = 8.0) -> List[Check]:
    checks = []
    rng = np.random.default_rng(7)

    for kind, domain in (("inverse", (1.0 / 64, 1.0)), ("rsqrt", (0.25, 1.0))):
        engine = _engine()
        spec = ApproxSpec(function=kind, domain=domain,
                          iterations=choose_iterations(kind, domain, 2.0 ** -20))
        v = rng.uniform(*domain, size=engine.N)
        out = engine.decrypt(goldschmidt(engine, engine.encrypt(v), kind, spec))
        exact = 1.0 / v if kind == "inverse" else 1.0 / np.sqrt(v)
        bits = rmse_bits(out, exact)
        checks.append(Check(f"Goldschmidt {kind} on {domain}", bits >= 16.0, f"{bits:.1f} bits"))

    engine = _engine()
    layout = InterleavedLayout(d=32, t=8)
    x = rng.uniform(-8.0, 8.0, size=32)
    c = engine.encrypt(encode_interleaved(x, layout), layout=layout)
    approx = engine.decrypt(approx_silu(engine, c, default_spec("silu", (-8.0, 8.0))))
    exact = engine.decrypt(exact_silu(engine, c))
    bits = rmse_bits(approx[layout.slot_positions()], exact[layout.slot_positions()])
    checks.append(Check("SiLU polynomial on [-8, 8]", bits >= min_bits, f"{bits:.1f} bits"))

    engine = _engine()
    z = rng.standard_normal(32)
    x = z / np.sqrt(np.mean(z * z)) * np.sqrt(1.3)
    c = engine.encrypt(encode_interleaved(x, layout), layout=layout)
    spec = default_spec("norm", (0.5, 2.0))
    approx = engine.decrypt(approx_norm(engine, c, layout, spec, center=False))
    exact = engine.decrypt(exact_norm(engine, c, center=False))
    bits = rmse_bits(approx[layout.slot_positions()], exact[layout.slot_positions()])
    checks.append(Check("RMS norm with Goldschmidt rsqrt", bits >= min_bits, f"{bits:.1f} bits"))

    engine = _engine()
    acfg = AttentionConfig(N=256, d=32, H=1, n_max=16)
    maps = acfg.map_layout(16)
    slots = np.zeros(256)
    for tau in range(16):
        g, slot = maps.locate(0, tau)
        slots[slot] = rng.uniform(-4.0, 4.0)
    c = engine.encrypt(slots, layout=maps)
    spec = default_spec("softmax", (-5.0, 5.0), n_max=16)
    approx = engine.decrypt(approx_softmax(engine, c, 16, spec))
    exact = engine.decrypt(exact_softmax(engine, [c], 16)[0])
    valid = maps.token_masks(16)[0] != 0
    bits = rmse_bits(approx[valid], exact[valid])
    checks.append(Check("softmax over 16 tokens", bits >= min_bits, f"{bits:.1f} bits"))
    return checks


# ----------------------------------------------------------------------------
# Placement

def check_placement(trials: int = 50, seed: int = 11) -> List[Check]:
    checks = []
    rng = np.random.default_rng(seed)
    L = 4
    worst = replay = 0.0
    for _ in range(trials):
        cost = random_cost_model(rng, L)
        block = random_block(rng, 4, L)
        g = build_graph(block, cost, L)
        plan = solve(g)
        worst = max(worst, abs(plan.cost - brute_force(g)), abs(plan.cost - solve(prune_graph(g)).cost))
        replay = max(replay, abs(plan.cost - plan_cost(block, plan.entries, cost, L)))
    checks.append(Check("shortest path equals brute force and pruned graph", worst < 1e-9,
                        f"worst gap {worst:.2e}"))
    checks.append(Check("plan replays at its reported cost", replay < 1e-9, f"worst gap {replay:.2e}"))

    worst = 0.0
    for _ in range(trials):
        cost = random_cost_model(rng, L)
        block = random_block(rng, 3, L)
        periodic = solve_periodic(block, 4, cost, L).cost
        unrolled = solve(build_graph(block * 4, cost, L)).cost
        worst = max(worst, abs(periodic - unrolled))
    checks.append(Check("periodic solve equals unrolled solve", worst < 1e-9, f"worst gap {worst:.2e}"))

    cost = random_cost_model(rng, 8)
    block = random_block(rng, 8, 8)
    small = build_graph(block, cost, 8).edge_count
    large = build_graph(block * 4, cost, 8).edge_count
    ratio = large / small
    checks.append(Check("level graph grows linearly in layers", 3.5 <= ratio <= 4.5, f"ratio {ratio:.2f}"))
    return checks


SUITES: Dict[str, Callable[[], List[Check]]] = {
    "vmm": check_vmm,
    "attn": check_attention,
    "nonlinear": check_nonlinear,
    "placement": check_placement,
}


def run_suites(name: str = "all") -> Dict[str, List[Check]]:
    names = list(SUITES) if name == "all" else [name]
    results = {}
    for suite in names:
        if suite not in SUITES:
            raise ValueError(f"unknown suite '{suite}'")
        logger.info("running %s checks", suite)
        results[suite] = SUITES[suite]()
    return results
