"""KL between a 10^4-feature reference potential and m-feature resamples of it.

    python scripts/run_approximation.py --seed 0 --out results/approx_rate.csv
"""

import argparse
from pathlib import Path

from biaspot.experiments import ApproximationConfig, run_approximation_experiment, write_approximation_results


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/approx_rate.csv")
    args = ap.parse_args()
    res = run_approximation_experiment(ApproximationConfig(master_seed=args.seed))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_approximation_results(res, args.out)
    for m, kl, b, f in zip(res.ms, res.mean_kl, res.bound, res.bound_fraction()):
        print(f"m={m:5d}  mean KL={kl:.3e}  bound={b:.3e}  within={f:.0%}")
    print(f"slope={res.slope:.3f} +- {res.slope_stderr:.3f}")


if __name__ == "__main__":
    main()
