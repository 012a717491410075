"""``optlayer`` command-line interface.

Exit codes: 0 success, 1 input or verification error, 2 numerical or solver failure.
Results are JSON on stdout (or ``--out``); diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .canon import canonicalize, theta_from_values
from .errors import DslError, ExprError, NotVerified, OptLayerError
from .experiments import (
    DenoiseConfig, PoisonConfig, SolverFailure, cone_adjoint_suite, dumps, qp_gradcheck_suite,
    run_denoise, run_poison,
)
from .qp import Status, kkt_residuals, solve_qp, validate_problem

EXIT_OK, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2

log = logging.getLogger("optlayer")


def _emit(obj, out=None):
    text = dumps(obj)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def _fail(message, code):
    sys.stderr.write(f"optlayer: {message}\n")
    return code


def _load_source(path):
    from .dsl import load_problem
    return load_problem(path)


def cmd_solve(args):
    try:
        src = _load_source(args.file)
        form = canonicalize(src.problem)
        theta = theta_from_values(form, src.values)
    except NotVerified as exc:
        return _verify_failure(exc)
    except (DslError, ExprError, OSError, ValueError) as exc:
        return _fail(f"{type(exc).__name__}: {exc}", EXIT_INPUT)
    p = validate_problem(form.instantiate(theta))
    s = solve_qp(p)
    out = {"status": s.status.value, "iterations": s.iterations}
    if s.status is Status.OPTIMAL:
        res = kkt_residuals(p, s)
        x = form.retrieve(np.asarray(s.z_star))
        out.update({
            "variables": {k: v.tolist() for k, v in form.split_variables(x).items()},
            "z_star": np.asarray(s.z_star).tolist(),
            "nu_star": np.asarray(s.nu_star).tolist(),
            "lambda_star": np.asarray(s.lambda_star).tolist(),
            "objective": float(s.objective),
            "residuals": {"stationarity": res.stationarity, "equality": res.equality,
                          "inequality": res.inequality, "complementarity": res.complementarity,
                          "dual_feasibility": res.dual_feasibility},
        })
    _emit(out, args.out)
    if s.status is not Status.OPTIMAL:
        return _fail(f"solver status {s.status.value}", EXIT_SOLVER)
    return EXIT_OK


def _verify_failure(exc):
    for v in exc.violations:
        sys.stderr.write(f"optlayer: {v.message}\n")
    return _fail(str(exc), EXIT_INPUT)


def cmd_canon(args):
    try:
        form = canonicalize(_load_source(args.file).problem)
    except NotVerified as exc:
        return _verify_failure(exc)
    except (DslError, ExprError, OSError, ValueError) as exc:
        return _fail(f"{type(exc).__name__}: {exc}", EXIT_INPUT)
    text = form.dumps()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")
    return EXIT_OK


def cmd_gradcheck(args):
    if args.trials < 0:
        return _fail("--trials must be nonnegative", EXIT_INPUT)
    if args.cone:
        report = cone_adjoint_suite(args.seed, args.trials)
    else:
        report = qp_gradcheck_suite(args.seed, args.trials)
    _emit(report, args.out)
    return EXIT_OK if report["passed"] else EXIT_SOLVER


def _config(cls, path):
    with open(path, encoding="utf-8") as fh:
        return cls.from_json(json.load(fh))


def _experiment(args, cls, run):
    try:
        cfg = _config(cls, args.config) if args.config else cls()
    except (OSError, ValueError, TypeError) as exc:
        return _fail(f"bad config: {exc}", EXIT_INPUT)
    out = args.out or cfg.out
    try:
        metrics = run(cfg)
    except SolverFailure as exc:
        _emit({"error": str(exc), "partial": exc.partial}, out)
        return _fail(str(exc), EXIT_SOLVER)
    except OptLayerError as exc:
        return _fail(f"{type(exc).__name__}: {exc}", EXIT_SOLVER)
    _emit(metrics, out)
    return EXIT_OK


def cmd_denoise(args):
    return _experiment(args, DenoiseConfig, run_denoise)


def cmd_poison(args):
    return _experiment(args, PoisonConfig, run_poison)


class _Parser(argparse.ArgumentParser):
    """Usage errors are input errors, not argparse's default exit code 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser():
    ap = _Parser(prog="optlayer", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("solve", help="solve a problem file")
    sp.add_argument("file")
    sp.add_argument("--json", action="store_true", help="accepted for compatibility; output is JSON")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--cone", action="store_true", help="run the LP adjoint-identity suite")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_gradcheck)

    for name, func in (("denoise", cmd_denoise), ("poison", cmd_poison)):
        sp = sub.add_parser(name, help=f"run the {name} experiment")
        sp.add_argument("--config", help="JSON config file (defaults when omitted)")
        sp.add_argument("--out")
        sp.set_defaults(func=func)

    sp = sub.add_parser("canon", help="dump the canonical form of a problem file")
    sp.add_argument("file")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_canon)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
