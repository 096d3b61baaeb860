"""Total-effect Sobol indices of LV QoIs over the seven T_all parameters.

    python demos/04_sensitivity.py [N]
"""

from __future__ import annotations

import sys

from cardioestim.harness import preset
from cardioestim.params import ParameterVector
from cardioestim.sensitivity import LV_QOIS, run_sensitivity


def main(N: int = 256) -> None:
    cfg = preset("T_all")
    pv = ParameterVector.from_params(cfg.estimate, cfg.base_params())
    res = run_sensitivity(cfg.build_model(), pv, LV_QOIS, N=N, seed=0, n_boot=100)
    print(f"N = {N}, {N * (len(pv.names) + 2)} model runs, {res.n_failed} failed")
    print(f"{'ST':>12}" + "".join(f"{q:>11}" for q in LV_QOIS))
    for i, name in enumerate(res.names):
        print(f"{name:>12}" + "".join(f"{v:11.3f}" for v in res.ST[i]))
    for q in LV_QOIS:
        print(f"{q:>10}: {' > '.join(res.ranking(q)[:3])}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 256)
