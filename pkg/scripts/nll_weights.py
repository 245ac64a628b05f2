"""Implicit per-horizon weights of a Gaussian model trained with the joint NLL."""

import argparse

from msdyn.experiments import nll_implicit_weights


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--h", type=int, default=2)
    ap.add_argument("--noise", type=float, nargs="+", default=[0.0, 0.02])
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()
    for noise in args.noise:
        for sampling in ("deterministic", "stochastic"):
            r = nll_implicit_weights(args.h, noise, epochs=args.epochs, seed=args.seed, sampling=sampling)
            w = ", ".join(f"{x:.4f}" for x in r["implicit_weights"])
            print(f"noise {noise:.0%} {sampling:>13}: weights [{w}]  mse {r['mse']}")


if __name__ == "__main__":
    main()
