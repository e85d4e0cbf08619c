"""Sample-complexity exponents of the early-stopped test KL and stopping time.

    python scripts/run_rate.py --dims 1,2 --trials 20 --seed 0 --out results/rate
"""

import argparse
from pathlib import Path

from biaspot.experiments import (
    RateExperimentConfig, run_rate_experiment, write_rate_regression, write_rate_results,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--dims", default="1,2")
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="results/rate")
    args = ap.parse_args()
    cfg = RateExperimentConfig(dims=tuple(int(d) for d in args.dims.split(",")), trials=args.trials,
                               master_seed=args.seed)
    res = run_rate_experiment(cfg, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rate_results(res.rows, out / "rate_results.csv")
    write_rate_regression(res.regression, out / "rate_regression.csv")
    for reg in res.regression:
        print(f"d={reg.d}  alpha={reg.alpha:.3f} +- {reg.alpha_stderr:.3f}  "
              f"T_o exponent={reg.t_exponent:.3f} +- {reg.t_exponent_stderr:.3f}")
    if res.failed:
        print("run failed:", res.message)


if __name__ == "__main__":
    main()
