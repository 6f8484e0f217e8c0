"""Command-line entry point: ``riccati-ipm {run,list-problems,verify}``."""
from __future__ import annotations

import argparse
import inspect
import logging
import sys
import time
from pathlib import Path

from .bench import load_config, run_benchmark
from .problems import PROBLEMS

DEFAULT_CONFIG = Path(__file__).with_name("suites.ini")


def _run(args) -> int:
    overrides = {"seed": args.seed, "threads": args.threads, "out": args.out,
                 "eq_mode": args.eq_mode, "abs_tol": args.tol}
    configs = load_config(args.config, overrides)
    ok = True
    for cfg in configs:
        res = run_benchmark(cfg)
        s = res.summary()
        q = s["iteration_quantiles_solved"]
        med = f"{q['q50']:g}" if q else "-"
        per_qp = f"{s['mean_per_qp_ms']:.3f}" if s["mean_per_qp_ms"] is not None else "-"
        flag = "PASS" if res.passed else "FAIL"
        print(f"{flag} {cfg.label}: solved {res.solved}/{cfg.instances} "
              f"(need {cfg.threshold}), median iters {med}, per-QP {per_qp} ms, "
              f"{res.wall_time:.1f} s")
        ok &= res.passed
    return 0 if ok else 1


def _list(args) -> int:
    for name, ctor in PROBLEMS.items():
        params = [p for p in inspect.signature(ctor).parameters if p not in ("seed", "kw")]
        print(f"{name:20s} {', '.join(params)}")
    return 0


def _verify(args) -> int:
    from .verify import equivalence_suite

    seed = 0 if args.seed is None else args.seed
    ok = True
    for ineq, count in ((False, args.count), (True, max(1, args.count // 2))):
        t0 = time.perf_counter()
        s = equivalence_suite(count, seed=seed, inequalities=ineq, tol=args.tol)
        flag = "PASS" if s.ok else "FAIL"
        print(f"{flag} {s.name}: {s.count} instances, worst relative error {s.worst:.2e} "
              f"(tol {s.tol:g}), {time.perf_counter() - t0:.1f} s")
        ok &= s.ok
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riccati-ipm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run benchmark suites from an INI config")
    run.add_argument("config", nargs="?", default=str(DEFAULT_CONFIG),
                     help="suite file (default: bundled suites.ini)")
    run.add_argument("--seed", type=int)
    run.add_argument("--threads", type=int)
    run.add_argument("--out", help="directory for <suite>.csv / <suite>.json reports")
    run.add_argument("--eq-mode", choices=("projection", "ipm"))
    run.add_argument("--tol", type=float, help="absolute KKT tolerance")
    run.set_defaults(func=_run)

    lp = sub.add_parser("list-problems", help="list the problem library")
    lp.set_defaults(func=_list)

    ver = sub.add_parser("verify", help="structured step vs dense KKT solve on random LQ instances")
    ver.add_argument("--seed", type=int)
    ver.add_argument("--count", type=int, default=200)
    ver.add_argument("--tol", type=float, default=1e-7)
    ver.set_defaults(func=_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
