import argparse

from align_gen_app.services import gradsuite
from align_gen_app.services.errors import AcceptanceError


def run_gradcheck(args: argparse.Namespace) -> None:
    """
    The run_gradcheck function prints one line per gradient suite and fails when any exceeds the tolerance.

    :param args: Namespace: Parsed ``gradcheck`` flags
    :return: None
    """
    reports = gradsuite.run_suites(args.module, seed=args.seed, tol=args.tol)
    for report in reports:
        status = "ok" if report.passed(args.tol) else "FAIL"
        print(f"{report.op_name:<12} max_rel_err={report.max_rel_err:.3e} {status}")
    failed = [report.op_name for report in reports if not report.passed(args.tol)]
    if failed:
        raise AcceptanceError(f"gradcheck failed for {', '.join(failed)}")


def register(subparsers) -> None:
    parser = subparsers.add_parser("gradcheck", help="compare analytic and numeric gradients in float64")
    parser.add_argument("--module", action="append", choices=list(gradsuite.SUITES), default=None,
                        help="suite to run, repeatable (default: all)")
    parser.add_argument("--tol", type=float, default=gradsuite.DEFAULT_TOL,
                        help=f"relative error bound (default: {gradsuite.DEFAULT_TOL})")
    parser.add_argument("--seed", type=int, default=0, help="seed of the random inputs (default: 0)")
    parser.set_defaults(handler=run_gradcheck)
