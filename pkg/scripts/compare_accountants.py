#!/usr/bin/env python3
"""Calibrated noise multipliers per accountant over an epsilon grid.

Reproduces the figure-style comparison data: for a chosen mechanism and
schedule, calibrate sigma at a fixed delta with the Renyi accountant, the
conditional-composition accountant, and the Monte Carlo reference, then write
one CSV row per epsilon.

Example:
    python scripts/compare_accountants.py --mechanism dpsgd --n 100 --epochs 1 \
        --delta 1e-5 --epsilons 0.25,0.5,1,2,4,8 --seed 1 --out dpsgd_n100.csv
"""

import argparse
import sys

from balloc.calibrate import calibrate_sigma, calibrate_sigma_mc
from balloc.mechanism import (
    Schedule,
    StrategyMatrix,
    build_identity,
    inv_sqrt_toeplitz_coefficients,
    invert_banded_toeplitz,
    sqrt_toeplitz_coefficients,
)


def make_mechanism(kind: str, n: int, bandwidth: int) -> StrategyMatrix:
    if kind == "dpsgd":
        return build_identity(n)
    if kind == "bsr":
        return StrategyMatrix.from_toeplitz(sqrt_toeplitz_coefficients(bandwidth), size=n)
    if kind == "bisr":
        return invert_banded_toeplitz(inv_sqrt_toeplitz_coefficients(bandwidth), n)
    raise ValueError(f"unknown mechanism {kind!r}")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--mechanism", choices=["dpsgd", "bsr", "bisr"], default="dpsgd")
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=1)
    ap.add_argument("--bandwidth", type=int, default=4)
    ap.add_argument("--delta", type=float, default=1e-5)
    ap.add_argument("--epsilons", default="0.25,0.5,1,2,4,8")
    ap.add_argument("--mc-samples", type=int, default=10**5)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--renyi-alpha-max", type=int, default=64)
    ap.add_argument("--renyi-bandwidth", type=int, default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    strategy = make_mechanism(args.mechanism, args.n, args.bandwidth)
    if args.n % args.epochs:
        raise SystemExit("n must be divisible by the number of epochs")
    schedule = Schedule(args.epochs, args.n // args.epochs)
    epsilons = [float(e) for e in args.epsilons.split(",")]

    lines = ["epsilon,sigma_renyi,sigma_condcomp,sigma_mc_reference"]
    for eps in epsilons:
        sigma_r = calibrate_sigma(
            "renyi", strategy, schedule, eps, args.delta,
            alpha_set=tuple(range(2, args.renyi_alpha_max + 1)),
            bandwidth=args.renyi_bandwidth,
        )
        sigma_c = calibrate_sigma("condcomp", strategy, schedule, eps, args.delta)
        sigma_m = calibrate_sigma_mc(
            strategy, schedule, eps, args.delta, args.mc_samples, args.seed
        )
        lines.append(f"{eps:.12g},{sigma_r:.12g},{sigma_c:.12g},{sigma_m:.12g}")
        print(lines[-1], file=sys.stderr)

    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
