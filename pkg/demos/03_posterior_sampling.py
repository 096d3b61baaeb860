"""Posterior around the MAP estimate with NUTS, plus uncertainty bands of V_LV.

Short chain for illustration (a few minutes); the acceptance suite uses
750 iterations with 250 warmup.

    python demos/03_posterior_sampling.py
"""

from __future__ import annotations

import numpy as np

from cardioestim.harness import preset, run_test_case


def main() -> None:
    cfg = preset("T_LV", snr=0.01, seed=2, map={"n_runs": 3},
                 hmc={"iters": 300, "warmup": 150, "band_draws": 40})
    r = run_test_case(cfg)
    s, summ = r.samples, r.summary
    print(f"{len(s.draws)} draws, step {s.step_size:.3g}, mean tree depth {s.tree_depth.mean():.1f}, "
          f"divergences {s.n_divergent}")
    print(f"{'parameter':>12} {'truth':>9} {'mean':>9} {'std':>9} {'90% interval':>22} R-hat")
    for j, name in enumerate(summ.names):
        print(f"{name:>12} {r.truth.values[j]:9.3f} {summ.mean[j]:9.3f} {summ.std[j]:9.3g} "
              f"  [{summ.lower[j]:8.3f}, {summ.upper[j]:8.3f}] {s.rhat[j]:.3f}")
    print("posterior correlation:\n", np.round(summ.corr, 2))
    band = r.bands["V_LV"]
    width = band["p95"] - band["p5"]
    print(f"V_LV 90% band width: mean {width.mean():.2f} mL, max {width.max():.2f} mL")


if __name__ == "__main__":
    main()
