"""Command line entry point: ``mhla {verify,diagnose,bench,distill}``.

Examples:
    mhla verify --seed 0
    mhla diagnose --n 256 --d 16 --m 16 --seeds 100 --out diag.csv
    mhla bench --mechanisms mhla --n 1024,4096 --d 64 --m-rule floor-sqrt-n
    mhla distill --n 64 --d 8 --m 8 --steps 500 --lr 0.1 --out loss.csv

Exit codes: 0 success, 1 a check failed, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import bench, diagnostics, verify
from .attention import AttentionConfig, softmax_attention
from .errors import FixtureError, MHLAError
from .fixtures import coefficients_to_tensors, save_fixture
from .gradients import attend, distill_coefficients
from .partition import GRID_2D, LINEAR_1D, locality_init, make_partition, pad_tokens

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text):
    return [x for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON RunConfig file; explicit flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output path (default: stdout)")
    common.add_argument("--init-floor", type=float, dest="init_floor",
                        help="added to locality-init coefficients before row normalization")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mhla", description="Multi-head linear attention checks and benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common], help="run oracle-equivalence checks")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for the checks (timing-free)")

    p = sub.add_parser("diagnose", parents=[common], help="rank/entropy collapse report as CSV")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--d", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--pad", action="store_true", help="zero-pad N up to a size the blocks divide")
    p.add_argument("--feature-map", dest="feature_map")

    p = sub.add_parser("bench", parents=[common], help="throughput sweep and scaling exponents")
    p.add_argument("--mechanisms", type=_str_list)
    p.add_argument("--n", type=_int_list, dest="n_values")
    p.add_argument("--d", type=int)
    p.add_argument("--m-rule", dest="m_rule", choices=["fixed", "floor-sqrt-n"])
    p.add_argument("--m", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--precision", choices=["double", "single"])
    p.add_argument("--feature-map", dest="feature_map")
    p.add_argument("--mem-budget", type=int, dest="mem_budget")

    p = sub.add_parser("distill", parents=[common], help="fit mixing coefficients to a softmax target")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--d", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--layout", choices=[LINEAR_1D, GRID_2D], default=LINEAR_1D)
    p.add_argument("--pad", action="store_true", help="zero-pad N up to a size the blocks divide")
    p.add_argument("--feature-map", dest="feature_map")
    p.add_argument("--coefficients-out", dest="coefficients_out",
                   help="write the trained coefficient matrix as a fixture file")
    return parser


def _run_config(args, defaults: dict) -> bench.RunConfig:
    data = dict(defaults)
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
        bench.RunConfig.from_dict(raw)
        data.update(raw)
    for key in bench.RunConfig.__dataclass_fields__:
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    return bench.RunConfig.from_dict(data)


def _emit(text: str, out, append=False):
    if out is None:
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    with open(out, "a" if append else "w") as fh:
        fh.write(text)


def cmd_verify(args) -> int:
    cfg = _run_config(args, {})
    if args.jobs < 1:
        raise UsageError("--jobs must be positive")
    results = verify.run_all(cfg.seed, args.jobs)
    text = "".join(r.line() + "\n" for r in results)
    ok = all(r.passed for r in results)
    text += f"{'ALL PASSED' if ok else 'FAILED'} ({sum(r.passed for r in results)}/{len(results)})\n"
    _emit(text, cfg.out)
    return EXIT_OK if ok else EXIT_CHECK


def cmd_diagnose(args) -> int:
    cfg = _run_config(args, {"d": 16, "m": 16})
    if args.seeds < 1:
        raise UsageError("--seeds must be positive")
    reports = []
    for s in range(cfg.seed, cfg.seed + args.seeds):
        reports.extend(diagnostics.collapse_report(s, args.n, cfg.d, cfg.m, cfg.feature_map, cfg.init_floor,
                                                   pad=args.pad))
    _emit(diagnostics.reports_to_csv(reports), cfg.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _run_config(args, {})
    records = bench.run_benchmark(cfg)
    lines = []
    failed = False
    for mech in cfg.mechanisms:
        try:
            slope = bench.fit_scaling_exponent(records, mech)
        except ValueError as exc:
            lines.append(f"# slope {mech}=NA ({exc})")
            continue
        lines.append(f"# slope {mech}={slope:.4f}")
        if mech == "softmax" and slope < cfg.min_softmax_slope:
            failed = True
        if mech != "softmax" and slope > cfg.max_linear_slope:
            failed = True
    if cfg.out:
        bench.append_records(cfg.out, records)
        _emit("\n".join(lines) + "\n", cfg.out, append=True)
    else:
        _emit(bench.records_to_csv(records) + "\n".join(lines) + "\n", None)
    return EXIT_CHECK if failed else EXIT_OK


def cmd_distill(args) -> int:
    cfg = _run_config(args, {"d": 8, "m": 8})
    rng = np.random.default_rng(cfg.seed)
    q, k, v = (rng.standard_normal((args.n, cfg.d)) for _ in range(3))
    if args.pad:
        q, k, v = (pad_tokens(x, cfg.m, args.layout) for x in (q, k, v))
    partition = make_partition(q.shape[0], args.layout, cfg.m)
    attn = AttentionConfig(cfg.feature_map, cfg.normalize, partition, locality_init(partition, cfg.init_floor))
    target = softmax_attention(q, k, v)
    coeffs, trace = distill_coefficients(q, k, v, target, attn, args.steps, args.lr)
    final = float(np.mean((attend(q, k, v, AttentionConfig(attn.feature_map, attn.normalize, partition, coeffs)) - target) ** 2))
    text = "step,loss\n" + "".join(f"{r.step},{r.loss!r}\n" for r in trace)
    text += f"# final_loss={final!r}\n"
    _emit(text, cfg.out)
    if args.coefficients_out:
        save_fixture(args.coefficients_out, coefficients_to_tensors(coeffs))
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "diagnose": cmd_diagnose, "bench": cmd_bench, "distill": cmd_distill}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, FixtureError) as exc:
        print(f"mhla: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, MHLAError, ValueError, TypeError) as exc:
        print(f"mhla: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
