"""Command-line interface: matrix generation, accounting, calibration, sweeps.

Exit codes: 0 success, 1 computational failure, 2 usage error.  All floats are
printed with 12 significant digits and every command is deterministic given
its flags (Monte Carlo commands therefore require an explicit --seed).
BALLOC_THREADS caps the number of worker threads used for grid sweeps.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from . import calibrate as cal
from . import condcomp, mc, renyi
from .mechanism import (
    Schedule,
    StrategyMatrix,
    build_identity,
    inv_sqrt_toeplitz_coefficients,
    invert_banded_toeplitz,
    mixture_means,
    read_matrix,
    sqrt_toeplitz_coefficients,
    write_matrix,
)

SCHEMA_VERSION = 1


class UsageError(ValueError):
    pass


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def _json_ready(obj):
    if isinstance(obj, float):
        return float(_fmt(obj))
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    return obj


def _threads() -> int:
    raw = os.environ.get("BALLOC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _map_grid(fn, items):
    workers = _threads()
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _parse_epsilons(text: str) -> list[float]:
    try:
        eps = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad epsilon grid {text!r}") from exc
    if not eps or any(b <= a for a, b in zip(eps, eps[1:])):
        raise UsageError("epsilon grid must be non-empty and strictly ascending")
    return eps


def _load_schedule(args) -> Schedule:
    return Schedule(epochs=args.epochs, batches_per_epoch=args.batches)


def _load_matrix(args, schedule: Schedule) -> StrategyMatrix:
    strategy = read_matrix(args.matrix)
    if strategy.size != schedule.iterations:
        raise UsageError(
            f"matrix size {strategy.size} does not match epochs*batches = {schedule.iterations}"
        )
    return strategy


def _cmd_gen_matrix(args) -> int:
    if args.out is None:
        raise UsageError("gen-matrix requires --out")
    kind = args.kind
    if kind == "import":
        if args.in_path is None:
            raise UsageError("--kind import requires --in")
        strategy = read_matrix(args.in_path)
    elif kind == "identity":
        if args.n is None:
            raise UsageError("--kind identity requires --n")
        strategy = build_identity(args.n)
    elif kind in ("bsr", "bisr"):
        if args.n is None or args.bandwidth is None:
            raise UsageError(f"--kind {kind} requires --n and --bandwidth")
        if not 1 <= args.bandwidth <= args.n:
            raise UsageError(f"bandwidth must be in [1, {args.n}], got {args.bandwidth}")
        if kind == "bsr":
            strategy = StrategyMatrix.from_toeplitz(
                sqrt_toeplitz_coefficients(args.bandwidth), size=args.n
            )
        else:
            d = inv_sqrt_toeplitz_coefficients(args.bandwidth)
            strategy = invert_banded_toeplitz(d, args.n)
    elif kind == "toeplitz":
        if args.coeffs is None or args.n is None:
            raise UsageError("--kind toeplitz requires --n and --coeffs")
        coeffs = [float(v) for v in args.coeffs.split(",") if v.strip()]
        strategy = StrategyMatrix.from_toeplitz(coeffs, size=args.n)
    else:  # pragma: no cover - argparse restricts choices
        raise UsageError(f"unknown kind {kind!r}")
    write_matrix(strategy, args.out)
    return 0


def _cmd_account(args) -> int:
    schedule = _load_schedule(args)
    strategy = _load_matrix(args, schedule)
    out = {
        "schema": SCHEMA_VERSION,
        "method": args.method,
        "epsilon": args.epsilon,
        "sigma": args.sigma,
    }
    alpha_set = tuple(range(2, args.alpha_max + 1))
    if args.method == "renyi":
        delta, alpha = renyi.renyi_account(
            strategy, schedule, args.sigma, args.epsilon,
            alpha_set=alpha_set, bandwidth=args.bandwidth,
        )
        curve = renyi.renyi_curve(
            strategy, schedule, args.sigma, (alpha,), bandwidth=args.bandwidth
        )
        out["delta"] = delta
        out["alpha"] = alpha
        out["direction_breakdown"] = {
            "remove": renyi.renyi_to_delta(float(curve.rho_remove[0]), alpha, args.epsilon),
            "add": renyi.renyi_to_delta(float(curve.rho_add[0]), alpha, args.epsilon),
        }
    elif args.method == "condcomp":
        delta, per_direction = condcomp.cond_comp_account(
            strategy, schedule, args.sigma, args.epsilon, args.delta_e,
            allocation=args.allocation, return_details=True,
        )
        out["delta"] = delta
        out["delta_e"] = args.delta_e
        out["allocation"] = args.allocation
        if args.allocation == "global-max":
            out["allocation_note"] = "as-published"
        out["direction_breakdown"] = per_direction
    elif args.method == "mc":
        if args.seed is None:
            raise UsageError("--method mc requires --seed for reproducibility")
        means = mixture_means(strategy, schedule)
        estimates = {
            d: mc.mc_delta(
                means, args.sigma, args.epsilon, d, args.samples, seed=args.seed
            )
            for d in (mc.REMOVE, mc.ADD)
        }
        worst = max(estimates, key=lambda d: estimates[d].point_estimate)
        est = estimates[worst]
        out["delta"] = est.point_estimate
        out["direction_breakdown"] = {
            d: e.point_estimate for d, e in estimates.items()
        }
        out["ci"] = {"low": est.ci_low, "high": est.ci_high}
        out["hoeffding"] = {"low": est.hoeffding_low, "high": est.hoeffding_high}
        out["seed"] = args.seed
        out["samples"] = args.samples
    elif args.method == "best":
        # Soundness policy: only deterministic accountants participate.
        delta_r, alpha = renyi.renyi_account(
            strategy, schedule, args.sigma, args.epsilon,
            alpha_set=alpha_set, bandwidth=args.bandwidth,
        )
        delta_c = condcomp.cond_comp_account(
            strategy, schedule, args.sigma, args.epsilon, args.delta_e,
            allocation=args.allocation,
        )
        out["delta"] = min(delta_r, delta_c)
        out["direction_breakdown"] = {"renyi": delta_r, "condcomp": delta_c}
        out["alpha"] = alpha
        out["delta_e"] = args.delta_e
    print(json.dumps(_json_ready(out)))
    return 0


def _cmd_calibrate(args) -> int:
    schedule = _load_schedule(args)
    strategy = _load_matrix(args, schedule)
    sigma = cal.calibrate_sigma(
        args.method,
        strategy,
        schedule,
        args.epsilon,
        args.delta,
        tol=args.tol,
        delta_e_fraction=args.delta_e_frac,
        alpha_set=tuple(range(2, args.alpha_max + 1)),
        bandwidth=args.bandwidth,
        allocation=args.allocation,
    )
    print(_fmt(sigma))
    return 0


def _write_csv(path, header: str, rows) -> None:
    lines = [header] + [",".join(_fmt(v) for v in row) for row in rows]
    text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _cmd_profile(args) -> int:
    schedule = _load_schedule(args)
    strategy = _load_matrix(args, schedule)
    eps = _parse_epsilons(args.epsilons)
    if args.method == "mc" and args.seed is None:
        raise UsageError("--method mc requires --seed for reproducibility")
    points = cal.profile(
        args.method,
        strategy,
        schedule,
        args.sigma,
        eps,
        delta_e=args.delta_e,
        alpha_set=tuple(range(2, args.alpha_max + 1)),
        bandwidth=args.bandwidth,
        allocation=args.allocation,
        n_samples=args.samples,
        seed=args.seed,
    )
    _write_csv(args.out, "epsilon,delta", [(p.epsilon, p.delta) for p in points])
    return 0


def _cmd_compare(args) -> int:
    schedule = _load_schedule(args)
    strategy = _load_matrix(args, schedule)
    eps = _parse_epsilons(args.epsilons)
    if args.seed is None:
        raise UsageError("compare includes an MC reference and requires --seed")

    def row(e):
        sigma_r = cal.calibrate_sigma(
            "renyi", strategy, schedule, e, args.delta, tol=args.tol,
            alpha_set=tuple(range(2, args.alpha_max + 1)), bandwidth=args.bandwidth,
        )
        sigma_c = cal.calibrate_sigma(
            "condcomp", strategy, schedule, e, args.delta, tol=args.tol,
            allocation=args.allocation,
        )
        sigma_m = cal.calibrate_sigma_mc(
            strategy, schedule, e, args.delta, args.samples, args.seed, tol=args.tol
        )
        return (e, sigma_r, sigma_c, sigma_m)

    rows = _map_grid(row, eps)
    _write_csv(
        args.out, "epsilon,sigma_renyi,sigma_condcomp,sigma_mc_reference", rows
    )
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="balloc",
        description="Deterministic DP accounting for matrix mechanisms under balls-in-bins batching",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-matrix", help="generate or import a strategy matrix file")
    g.add_argument("--kind", required=True, choices=["identity", "bsr", "bisr", "toeplitz", "import"])
    g.add_argument("--n", type=int)
    g.add_argument("--bandwidth", type=int)
    g.add_argument("--coeffs", type=str)
    g.add_argument("--in", dest="in_path", type=str)
    g.add_argument("--out", type=str)
    g.set_defaults(func=_cmd_gen_matrix)

    def common(p, sigma=False, epsilon=False):
        p.add_argument("--matrix", required=True)
        p.add_argument("--epochs", type=int, required=True)
        p.add_argument("--batches", type=int, required=True)
        if sigma:
            p.add_argument("--sigma", type=float, required=True)
        if epsilon:
            p.add_argument("--epsilon", type=float, required=True)
        p.add_argument("--alpha-max", type=int, default=64)
        p.add_argument("--bandwidth", type=int, default=None)
        p.add_argument("--delta-e", type=float, default=1e-6)
        p.add_argument("--allocation", choices=list(condcomp.STRATEGIES), default="hybrid")
        p.add_argument("--seed", type=int, default=None)

    a = sub.add_parser("account", help="delta at a fixed (sigma, epsilon)")
    common(a, sigma=True, epsilon=True)
    a.add_argument("--method", required=True, choices=["renyi", "condcomp", "mc", "best"])
    a.add_argument("--samples", type=int, default=10**6)
    a.set_defaults(func=_cmd_account)

    c = sub.add_parser("calibrate", help="smallest sigma reaching (epsilon, delta)")
    common(c, epsilon=True)
    c.add_argument("--method", required=True, choices=["renyi", "condcomp", "best"])
    c.add_argument("--delta", type=float, required=True)
    c.add_argument("--tol", type=float, default=1e-3)
    c.add_argument("--delta-e-frac", type=float, default=0.5)
    c.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("profile", help="delta(epsilon) sweep as CSV")
    common(p, sigma=True)
    p.add_argument("--method", required=True, choices=["renyi", "condcomp", "mc", "best"])
    p.add_argument("--epsilons", required=True)
    p.add_argument("--samples", type=int, default=10**5)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=_cmd_profile)

    m = sub.add_parser("compare", help="calibrated sigma per method over an epsilon grid")
    common(m)
    m.add_argument("--delta", type=float, required=True)
    m.add_argument("--epsilons", required=True)
    m.add_argument("--tol", type=float, default=1e-3)
    m.add_argument("--samples", type=int, default=10**5)
    m.add_argument("--out", type=str, default=None)
    m.set_defaults(func=_cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
