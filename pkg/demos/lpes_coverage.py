"""How much of the error distribution does a box over K critical scenarios cover?

    python demos/lpes_coverage.py

Uses the benchmark plan from x0 = [-1, 0]. For several K the box is built
from the K scenarios of largest exact criticality among 500 candidates
(a perfect surrogate) and from the engine's GP-ranked winners, then tested on
1000 fresh scenarios from the same law.
"""

import numpy as np

from riskmpc.criticality import criticality_batch, simulate_error_batch
from riskmpc.engine import RiskEngine, generate_candidates, lpes_coverage, lpes_from_errors, rank_desc
from riskmpc.simulator import make_dcdc_benchmark
from riskmpc.tube import LpesSupport, TubeMpc, design_ancillary


def main(trials=5):
    cfg = make_dcdc_benchmark(0.1, 1000)
    sys_ = cfg.system
    anc = design_ancillary(sys_, cfg.mpc.q_mat, cfg.mpc.r_mat, rng=np.random.default_rng(0))
    n = cfg.mpc.horizon_n
    zero = LpesSupport.zeros(n, sys_.n_x)
    plan = TubeMpc(sys_, cfg.state_con, cfg.input_con, cfg.mpc, anc, zero, 0.05).build_and_solve(cfg.x0, zero, 0.05)
    hw = np.abs(sys_.d_support.upper)
    for k in (10, 25, 50, 100):
        cov = []
        for s in range(trials):
            rng = np.random.default_rng(s)
            pool = generate_candidates(sys_, hw, n, 500, rng)
            gamma, e = criticality_batch(pool, plan, anc, sys_)
            box = lpes_from_errors(e[rank_desc(gamma)[:k]], n)
            fresh = simulate_error_batch(generate_candidates(sys_, hw, n, 1000, rng), plan, anc, sys_)
            cov.append(lpes_coverage(box, fresh))
        print(f"K={k:>3}  exact top-K coverage {np.mean(cov):.3f}  (min {np.min(cov):.3f})")
    eng = RiskEngine(sys_, anc, cfg.engine, sys_.d_support, n, np.random.default_rng(7))
    eng.bootstrap(plan)
    for c in range(10):
        lpes, _ = eng.update(plan, c)
    print(f"engine after 10 cycles (K={cfg.engine.k_crit}): coverage "
          f"{eng.coverage(lpes, plan, 1000, np.random.default_rng(8)):.3f}")


if __name__ == "__main__":
    main()
