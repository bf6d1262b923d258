"""Mean personalized accuracy against the number of shared layers.

Every depth from 0 (local-only) to the full network (plain federated
averaging) is run on the same seeds with every feasible device scheduled,
and the per-depth mean final accuracy is printed.

    python scripts/split_depth_sweep.py --seeds 10 --rounds 60
"""
import argparse
import time

import numpy as np

from wfl_pma.config import ExperimentConfig, load_config
from wfl_pma.experiment import run_single


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", help="base config (defaults when omitted)")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--rounds", type=int, default=60)
    ap.add_argument("--policy", default="all-feasible")
    args = ap.parse_args()

    base = load_config(args.config) if args.config else ExperimentConfig()
    base = base.replace(**{"scheduler.policy": args.policy, "run.rounds": args.rounds,
                           "learning.eval_every": args.rounds})
    depths = range(len(base.learning.hidden) + 2)
    acc = np.zeros((args.seeds, len(depths)))
    t0 = time.perf_counter()
    for s in range(args.seeds):
        for d in depths:
            res = run_single(base.replace(**{"learning.split_depth": d}), s)
            acc[s, d] = res.rows[-1]["mean_accuracy"]
        print(f"seed {s}: " + " ".join(f"{a:.3f}" for a in acc[s]), flush=True)
    print(f"\n{'depth':>5}  {'mean':>6}  {'std':>6}")
    for d in depths:
        print(f"{d:>5}  {acc[:, d].mean():6.3f}  {acc[:, d].std():6.3f}")
    print(f"\n{time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
