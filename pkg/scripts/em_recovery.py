"""Parameter and category recovery on planted data.

    python scripts/em_recovery.py --seeds 0 1 2 --missing 0.1

Three categories, five users, about 300 check-ins over four weeks with a
dominant-diagonal influence matrix. Prints one line per seed and the fitted
alpha next to the planted one.
"""
import argparse
import time

import numpy as np

from latent_hawkes.experiments import recovery_experiment, synthetic_config
from latent_hawkes.scenarios import Scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--missing", type=float, default=0.1)
    ap.add_argument("--iters", type=int, default=15)
    args = ap.parse_args()
    np.set_printoptions(precision=1, suppress=True)
    for seed in args.seeds:
        t0 = time.perf_counter()
        r = recovery_experiment(Scenario(seed=seed), args.missing, synthetic_config(seed, args.iters), seed)
        print(f"seed {seed}: N={r['n_events']} hidden={r['n_hidden']} top1={r['top1_accuracy']:.3f} "
              f"alpha rows matching={r['alpha_rows_matching']}/3 ({time.perf_counter() - t0:.0f} s)")
        print("  fitted alpha\n", np.array(r["alpha"]))
        print("  planted alpha\n", np.array(r["planted_alpha"]))


if __name__ == "__main__":
    main()
