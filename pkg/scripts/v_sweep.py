"""Scheduled data and energy use against the drift-plus-penalty weight V.

Runs the scheduling-only population for each V and prints the median total
scheduled data, the median total energy and the share of devices that
finished within their budget.

    python scripts/v_sweep.py --values 0.001,0.01,0.1 --seeds 20 --rounds 300
"""
import argparse

import numpy as np

from wfl_pma.config import load_config
from wfl_pma.experiment import run_single


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", default="configs/energy_only.yaml")
    ap.add_argument("--values", default="0.001,0.01,0.1")
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--rounds", type=int, default=300)
    args = ap.parse_args()

    base = load_config(args.config).replace(**{"run.rounds": args.rounds})
    print(f"{'V':>8}  {'data':>10}  {'energy J':>9}  {'in budget':>9}")
    for V in (float(v) for v in args.values.split(",")):
        cfg = base.replace(**{"scheduler.V": V})
        data, energy, within = [], [], []
        for s in range(args.seeds):
            res = run_single(cfg, s)
            data.append(sum(r["scheduled_data"] for r in res.rows))
            energy.append(float(res.state.cumulative_energy.sum()))
            budget = np.array([p.energy_budget for p in
                               sorted(res.population.profiles, key=lambda p: p.id)])
            within.append(float(np.mean(res.state.cumulative_energy <= budget)))
        print(f"{V:>8g}  {np.median(data):>10.0f}  {np.median(energy):>9.3f}  "
              f"{np.mean(within):>9.3f}", flush=True)


if __name__ == "__main__":
    main()
