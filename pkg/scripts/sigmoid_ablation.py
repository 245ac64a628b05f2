"""Alpha ablation on the two-parameter sigmoid system (about two minutes on one core)."""

import argparse
from pathlib import Path

from msdyn.sigmoid_lab import SigmoidLabConfig, run_sigmoid_lab


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/sigmoid")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--epochs", type=int, default=60)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    res = run_sigmoid_lab(SigmoidLabConfig(seed=args.seed, epochs=args.epochs),
                          progress=lambda opt, a, dt: print(f"{opt} alpha={a} {dt:.1f}s", flush=True))
    (out / "runs.csv").write_text(res.runs_csv())
    (out / "summary.csv").write_text(res.summary_csv())
    (out / "convergence.csv").write_text(res.curves_csv())
    print("alpha  one-step   two-step   average")
    for r in res.summary():
        print(f"{r['alpha']:<6} {r['one_step_mean']:.5f}  {r['two_step_mean']:.5f}  {r['average_mean']:.5f}")
    for key in ("one_step", "two_step", "average"):
        print(f"{key} minimized at alpha={res.argmin_alpha(key)}")


if __name__ == "__main__":
    main()
