"""Margin regulation on the synthetic plant P(h > 0 | beta) = max(0, 0.5 - beta).

    python demos/regulator_synthetic.py

For each target risk the full regulator (learning buffer plus target
compensation) and the plain violation-driven update are run for 10^5 steps;
the fixed point of both is beta* = 0.5 - delta.
"""

import numpy as np

from riskmpc.regulator import RegulatorConfig
from riskmpc.simulator import run_synthetic


def main(steps=100_000):
    print(f"{'delta':>6} {'beta*':>6} {'full':>8} {'naive':>8} {'full sd':>8} {'naive sd':>8}")
    for delta in (0.05, 0.1, 0.2, 0.3):
        full = run_synthetic(RegulatorConfig(delta), steps, seed=1)[-10_000:]
        naive = run_synthetic(RegulatorConfig.naive(delta), steps, seed=1)[-10_000:]
        print(f"{delta:>6} {0.5 - delta:>6.2f} {full.mean():>8.4f} {naive.mean():>8.4f} "
              f"{full.std():>8.4f} {naive.std():>8.4f}")


if __name__ == "__main__":
    main()
