"""Closed-loop DC-DC converter run: learned controller against the worst-case tube.

    python demos/dcdc_closed_loop.py [steps] [delta] [seed]

Prints the post-burn-in violation rate and cost of both controllers plus the
per-epoch violation rates, and leaves the logs under ./runs/demo-dcdc.
"""

import sys
from dataclasses import replace

import numpy as np

from riskmpc.simulator import RAAR, WORST_CASE, make_dcdc_benchmark, metrics, run, write_outputs


def main(steps=6000, delta=0.1, seed=0):
    base = make_dcdc_benchmark(delta, steps, seed)
    costs = {}
    for controller in (RAAR, WORST_CASE):
        cfg = replace(base, controller=controller)
        log = run(cfg, progress=lambda k: print(f"  {controller}: step {k}", file=sys.stderr))
        write_outputs(cfg, log, f"runs/demo-dcdc/{controller}")
        m = metrics(log, cfg.burn_in)
        costs[controller] = m.avg_cost
        print(f"{controller:>10}: risk {m.empirical_risk:.4f} (target {delta})  avg cost {m.avg_cost:.3f}  "
              f"mean beta {m.mean_beta:.3f}")
        print(f"{'':>10}  per-epoch risk {np.round(m.per_epoch_risk, 3).tolist()}")
    print(f"cost ratio learned / worst-case: {costs[RAAR] / costs[WORST_CASE]:.3f}")


if __name__ == "__main__":
    args = sys.argv[1:]
    main(int(args[0]) if args else 6000, float(args[1]) if len(args) > 1 else 0.1,
         int(args[2]) if len(args) > 2 else 0)
