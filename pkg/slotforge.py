#!/usr/bin/env python3
"""
Command line front end: VMM and attention count benches, bootstrap
placement, encrypted decoding of the toy model and the self-check suites.
"""

import os
import sys
import logging
import argparse

from errors import SlotForgeError
from harness import bench_attention, bench_vmm, emit_report, plan_model, run_generation
from model import ModelConfig, has_weight_dir, init_weights, load_weight_dir, save_weight_dir
from placement import CostModel, PlacementPlan
from verify import run_suites

logger = logging.getLogger(__name__)


def print_phases(report):
    for row in report.phases:
        levels = ""
        if row.levels_in is not None:
            levels = f"  levels {row.levels_in}->{row.levels_out}"
        print(f"  {row.phase:<24} rot {row.rotations:>5} (+{row.hoisted} hoisted)  "
              f"ct-pt {row.ctpt_mult:>5}  ct-ct {row.ctct_mult:>4}  add {row.adds:>5}  "
              f"boot {row.bootstraps:>3}{levels}")


def report_paths(path):
    """JSON and CSV destinations for one --report path"""
    base, ext = os.path.splitext(path)
    if ext.lower() == ".csv":
        return base + ".json", path
    return path, base + ".csv"


def write_report(report, path):
    if path:
        json_path, csv_path = report_paths(path)
        emit_report(report, json_path, "json")
        emit_report(report, csv_path, "csv")
        print(f"✓ Report written to {json_path} and {csv_path}")


def cmd_vmm_bench(args):
    report = bench_vmm(args.N, args.d, args.alpha, args.scheme, args.bsgs, args.seed)
    extras = report.extras
    print(f"{args.scheme} VMM N={args.N} d={args.d} alpha={args.alpha}: "
          f"{extras['all_rotations']} rotations, depth {extras['depth']}")
    print_phases(report)
    if "max_error" in extras:
        mark = "✓" if extras["max_error"] < 1e-6 else "✗"
        print(f"{mark} max error against x @ W: {extras['max_error']:.3e}")
    write_report(report, args.report)


def cmd_attn_bench(args):
    report = bench_attention(args.N, args.d, args.H, args.n0, args.nprime, args.seed)
    print(f"attention N={args.N} d={args.d} H={args.H} n0={args.n0} n'={args.nprime}: "
          f"{report.extras['K_ciphertexts']} K ciphertexts, {report.extras['score_maps']} score maps")
    print_phases(report)
    write_report(report, args.report)


def load_model(args) -> ModelConfig:
    cfg = ModelConfig.load(args.model) if args.model else ModelConfig()
    updates = {}
    if getattr(args, "mode", None):
        updates["mode"] = args.mode
    if getattr(args, "n0", None) is not None:
        updates["n0"] = args.n0
    if getattr(args, "gen", None) is not None:
        updates["gen"] = args.gen
    return ModelConfig.model_validate({**cfg.model_dump(), **updates}) if updates else cfg


def load_or_create_weights(cfg: ModelConfig, directory):
    if not directory:
        return init_weights(cfg)
    if has_weight_dir(directory):
        return load_weight_dir(directory, cfg)
    weights = init_weights(cfg)
    save_weight_dir(directory, weights)
    print(f"✓ Generated weights saved to {directory}")
    return weights


def cmd_plan(args):
    cfg = load_model(args)
    cost = CostModel.from_table(args.cost_table) if args.cost_table else CostModel()
    weights = load_or_create_weights(cfg, args.weights)
    plan = plan_model(cfg, weights, cost, expand=not args.no_expand)
    plan.to_json(args.out)
    print(f"✓ Plan with {plan.bootstraps} bootstraps over {cfg.n_layers} blocks "
          f"(predicted {plan.cost:.2f} ms) written to {args.out}")


def cmd_decode(args):
    cfg = load_model(args)
    weights = load_or_create_weights(cfg, args.weights)
    plan = PlacementPlan.from_json(args.plan) if args.plan else None
    cost = CostModel.from_table(args.cost_table) if args.cost_table else None
    report = run_generation(cfg, weights, plan=plan, cost=cost)
    print(f"Decoded {len(report.tokens)} tokens in {cfg.mode} mode: {report.tokens}")
    print_phases(report)
    match = report.tokens == report.reference_tokens
    print(f"{'✓' if match else '✗'} Tokens {'match' if match else 'differ from'} the cleartext reference")
    print(f"  max hidden error {report.max_hidden_error:.3e}, max logit error {report.max_logit_error:.3e}")
    write_report(report, args.report)


def cmd_verify(args):
    failed = 0
    for suite, checks in run_suites(args.suite).items():
        print(f"[{suite}]")
        for check in checks:
            mark = "✓" if check.passed else "✗"
            detail = f" ({check.detail})" if check.detail else ""
            print(f"  {mark} {check.name}{detail}")
            failed += not check.passed
    if failed:
        print(f"✗ {failed} check(s) failed")
        sys.exit(1)
    print("✓ All checks passed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='Slot-packed encrypted transformer decoding on a simulated CKKS engine',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog='''
Examples:
  python slotforge.py vmm-bench --N 32768 --d 4096 --bsgs     # Interleaved VMM counts
  python slotforge.py vmm-bench --N 32768 --d 4096 --scheme direct
  python slotforge.py attn-bench --N 32768 --d 4096 --H 32 --n0 512 --nprime 513
  python slotforge.py plan --model-cfg configs/toy_model.json --cost-table configs/cost_table.json --out plan.json
  python slotforge.py decode --model configs/toy_model.json --weights weights/ --gen 4 --report run.json
  python slotforge.py verify --suite all                       # Run the self-checks
        '''
    )
    parser.add_argument('--verbose', action='store_true', help='Enable debug logging')
    sub = parser.add_subparsers(dest='command')

    p = sub.add_parser('vmm-bench', help='Count one vector-matrix product')
    p.add_argument('--N', type=int, default=32768, help='Slot count')
    p.add_argument('--d', type=int, default=4096, help='Hidden size (padded to a power of two)')
    p.add_argument('--alpha', type=int, default=1, help='Up-projection ratio')
    p.add_argument('--scheme', choices=['interleaved', 'direct', 'replicated'], default='interleaved')
    p.add_argument('--bsgs', action='store_true', help='Use baby-step giant-step rotations')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--report', help='Write JSON and CSV reports next to this path')
    p.set_defaults(func=cmd_vmm_bench)

    p = sub.add_parser('attn-bench', help='Count cache appends and one attention query')
    p.add_argument('--N', type=int, default=32768)
    p.add_argument('--d', type=int, default=4096)
    p.add_argument('--H', type=int, default=32)
    p.add_argument('--n0', type=int, default=512, help='Prefilled tokens')
    p.add_argument('--nprime', type=int, default=513, help='Tokens attended to')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--report', help='Write JSON and CSV reports next to this path')
    p.set_defaults(func=cmd_attn_bench)

    p = sub.add_parser('plan', help='Solve bootstrap placement for a model')
    p.add_argument('--model-cfg', dest='model', help='Model config JSON')
    p.add_argument('--weights', help='Weight directory (generated when missing)')
    p.add_argument('--cost-table', help='Cost table JSON')
    p.add_argument('--no-expand', action='store_true', help='Bootstrap only at layer boundaries')
    p.add_argument('--out', required=True, help='Plan output path')
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser('decode', help='Prefill and decode the toy model under encryption')
    p.add_argument('--model', help='Model config JSON')
    p.add_argument('--weights', help='Weight directory (generated when missing)')
    p.add_argument('--n0', type=int, help='Prompt length')
    p.add_argument('--gen', type=int, help='Decode steps')
    p.add_argument('--plan', help='Plan JSON (solved on the fly when omitted)')
    p.add_argument('--cost-table', help='Cost table JSON used when solving on the fly')
    p.add_argument('--mode', choices=['exact', 'approx'], help='Nonlinear evaluation mode')
    p.add_argument('--report', help='Write JSON and CSV reports next to this path')
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser('verify', help='Run the self-check suites')
    p.add_argument('--suite', choices=['all', 'vmm', 'attn', 'nonlinear', 'placement'], default='all')
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format='%(levelname)s %(name)s: %(message)s')
    if not getattr(args, 'func', None):
        parser.print_help()
        return

    try:
        args.func(args)
    except (SlotForgeError, ValueError, OSError) as e:
        print(f"Error: {e}")
        sys.exit(1)


if __name__ == '__main__':
    main()
