"""Command-line entry point: calibrate, sweep, real, gap, verify."""

from __future__ import annotations

import argparse
import contextlib
import sys
from typing import List, Optional, Sequence

import numpy as np

from corrnoise import atoms, calibration, divergence, harness
from corrnoise.errors import CorrNoiseError


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


@contextlib.contextmanager
def _output(path: Optional[str]):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _cmd_calibrate(args) -> int:
    if args.fraction is not None:
        budget = calibration.split_budget(args.epsilon, args.fraction, args.share, args.delta)
    else:
        budget = None
    report = calibration.dsum_params(args.epsilon, args.delta, args.gamma, args.delta_levels,
                                     args.n, budget=budget, tprime=args.tprime,
                                     certify=args.certify)
    if args.refine:
        report = calibration.refine_params(report, args.refine, seed=args.seed)
    with _output(args.out) as fh:
        fh.write(calibration.dump_report(report))
    return 0 if report.certified else 1


def _cmd_sweep(args) -> int:
    with open(args.config) as fh:
        cfg = harness.parse_config(fh.read(), seed=args.seed, trials=args.trials)
    rows = harness.run_sweep(cfg)
    with _output(args.out) as fh:
        harness.write_csv(rows, fh)
    return 0


def _cmd_real(args) -> int:
    data = harness.ingest_column(args.data, args.column, args.clamp_max)
    print(f"kept {data.kept} rows, dropped {data.dropped} above {args.clamp_max:g}",
          file=sys.stderr)
    rows = harness.real_sweep(data.values, args.levels, args.epsilon, args.delta,
                              trials=args.trials or 100, seed=args.seed or 0,
                              clamp_max=args.clamp_max,
                              epsilon_star_fraction=args.fraction)
    with _output(args.out) as fh:
        harness.write_csv(rows, fh, harness.REAL_COLUMNS)
    return 0


def _cmd_gap(args) -> int:
    if args.eps:
        grid = args.eps
    else:
        grid = list(np.linspace(1.0 / args.grid, 1.0, args.grid))
    rows = harness.optimality_gap_table(grid)
    with _output(args.out) as fh:
        harness.write_csv(rows, fh, harness.GAP_COLUMNS)
    return 0


def verify_suite(max_delta: int = 256, log=print) -> bool:
    """Atom-system exactness for Delta <= max_delta plus small DP oracle checks."""
    ok = True
    for D in range(1, max_delta + 1):
        rep = atoms.verify_system(atoms.build_right_inverse(D, verify=False))
        if not rep.passed:
            log(f"FAIL atom system Delta={D}: {rep}")
            ok = False
    log(f"{'ok' if ok else 'FAIL'}  atom systems Delta=1..{max_delta}")
    for D in (1, 5):
        nb = calibration.nb_scalar_params(1.0, 1e-6, D)
        r = divergence.dp_check_noise_addition(nb, D, 1.0)
        good = r.delta_bound <= 1e-6
        ok &= good
        log(f"{'ok' if good else 'FAIL'}  NB noise addition Delta={D}: delta={r.delta_bound:.3g}")
    rep = calibration.dsum_params(0.5, 1e-6, 0.2, 2, 100)
    good = rep.certified
    ok &= good
    log(f"{'ok' if good else 'FAIL'}  Delta=2 calibration certificates: "
        f"{[round(c.delta_bound, 15) for c in rep.dp_certificate]}")
    return ok


def _cmd_verify(args) -> int:
    return 0 if verify_suite(args.max_delta) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrnoise", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False):
        p.add_argument("--seed", type=int, default=None, help="64-bit seed")
        p.add_argument("--trials", type=int, default=None)
        p.add_argument("--out", default=None, help="output file (default: stdout)")
        p.add_argument("--format", choices=["csv"], default="csv")
        if config:
            p.add_argument("--config", required=True, help="sweep config file")

    p = sub.add_parser("calibrate", help="write a calibration report")
    common(p)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--delta-levels", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--fraction", type=float, default=None,
                   help="experiment split: epsilon_star fraction (overrides gamma)")
    p.add_argument("--share", type=float, default=0.5, help="epsilon1 share of the rest")
    p.add_argument("--tprime", choices=["analytic", "optimized"], default="analytic")
    p.add_argument("--certify", choices=["numeric", "analytic"], default="numeric")
    p.add_argument("--refine", type=int, default=0, help="refinement search budget")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("sweep", help="run a parameter sweep, CSV out")
    common(p, config=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("real", help="real-summation runs on a CSV column")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--column", required=True)
    p.add_argument("--clamp-max", type=float, required=True)
    p.add_argument("--levels", type=_ints, default=[20, 50, 100, 200])
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=1e-6)
    p.add_argument("--fraction", type=float, default=0.1)
    p.set_defaults(func=_cmd_real)

    p = sub.add_parser("gap", help="Laplace vs Discrete Laplace RMSE table")
    common(p)
    p.add_argument("--eps", type=_floats, default=None, help="comma separated epsilons")
    p.add_argument("--grid", type=int, default=100, help="uniform grid size on (0, 1]")
    p.set_defaults(func=_cmd_gap)

    p = sub.add_parser("verify", help="atom-system and DP oracle checks")
    common(p)
    p.add_argument("--max-delta", type=int, default=256)
    p.set_defaults(func=_cmd_verify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CorrNoiseError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
