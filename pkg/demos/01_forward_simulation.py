"""Run the baseline circulation to its limit cycle and print LV haemodynamics.

    python demos/01_forward_simulation.py
"""

from __future__ import annotations

import numpy as np

from cardioestim.model import Model
from cardioestim.ode import run_to_limit_cycle
from cardioestim.params import baseline_parameters


def main() -> None:
    params = baseline_parameters()
    model = Model("direct", params)
    for beats in (5, 10, 20):
        lc = run_to_limit_cycle(model, n_beats=beats)
        print(f"{beats:3d} beats: largest beat-to-beat change {lc.max_periodicity():.2%}")

    tr = run_to_limit_cycle(model, n_beats=5).trace
    v, p = tr["V_LV"], tr["p_LV"]
    sv = v.max() - v.min()
    print(f"\nLV end-diastolic volume {v.max():6.1f} mL, end-systolic {v.min():6.1f} mL")
    print(f"stroke volume {sv:.1f} mL, ejection fraction {sv / v.max():.0%}")
    print(f"peak LV pressure {p.max():.1f} mmHg, arterial {tr['p_AR_SYS'].min():.0f}-{tr['p_AR_SYS'].max():.0f} mmHg")
    print(f"cardiac output {sv / params['T_HB'] * 60 / 1000:.2f} L/min")

    # elastance surrogate coupled through the penalty: agrees with the direct closure to O(eps)
    coupled = Model("elastance", params, eps=1e-4)
    tr_c = run_to_limit_cycle(coupled, n_beats=1).trace
    tr_d = run_to_limit_cycle(model, n_beats=1).trace
    print(f"\ncoupled vs direct, one beat: max |dV_LV| = {np.max(np.abs(tr_c['V_LV'] - tr_d['V_LV'])):.2e} mL")


if __name__ == "__main__":
    main()
