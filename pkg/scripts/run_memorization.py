"""Long Adam run on 25 samples: test KL and RKHS norm against a population-target control.

    python scripts/run_memorization.py --seed 0 --out results/memorize
"""

import argparse

from biaspot.experiments import MemorizationConfig, run_memorization_experiment, write_memorization_outputs


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=100_000)
    ap.add_argument("--out", default="results/memorize")
    args = ap.parse_args()
    res = run_memorization_experiment(MemorizationConfig(master_seed=args.seed, steps=args.steps))
    write_memorization_outputs(res, args.out)
    print(f"T_o={res.T_o}  L_o={res.L_o:.4g}  final KL={res.final_kl:.4g}  "
          f"norm at T_o={res.norm_at_T_o:.4g}  final norm={res.final_norm:.4g}  "
          f"control monotone={res.control_monotone()}")


if __name__ == "__main__":
    main()
