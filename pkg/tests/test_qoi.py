from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cardioestim.ode import TimeTrace
from cardioestim.params import ParameterVector
from cardioestim.qoi import (
    CostWeights, GridMismatchError, MissingChannelError, cost_and_gradient, cost_functional,
    extract_qois, relative_l2_error, trapezoid_weights,
)

ALL_TERMS = dict(alpha={"p_AR_SYS": 1.0}, beta={"p_AR_SYS": 0.5}, gamma={"p_AR_SYS": 0.3},
                 delta={"V_LV": 1.0}, epsilon={"V_LV": 0.2}, zeta={"V_LV": 0.7}, eta={"V_LV": 2.0})


def trace(**ch):
    return TimeTrace(0.0, 0.01, {k: np.asarray(v, dtype=float) for k, v in ch.items()})


def test_extraction_examples():
    q = extract_qois(trace(V_LV=[120, 50, 80], V_LA=[40, 40, 40], p_AR_SYS=[100, 100, 100]))
    assert q["V_LV"].max == 120 and q["V_LV"].min == 50 and q.sv("V_LV") == 70
    assert q.sv("V_LA") == 0
    assert q.mu("p_AR_SYS") == 10000.0
    with pytest.raises(MissingChannelError):
        extract_qois(trace(V_LV=[1, 2]), ["p_AR_SYS"])


def test_weights_validation(tmp_path):
    with pytest.raises(ValueError):
        CostWeights(alpha={"V_LV": 1.0})
    with pytest.raises(ValueError):
        CostWeights(delta={"p_AR_SYS": 1.0})
    with pytest.raises(ValueError):
        CostWeights(alpha={"p_AR_SYS": -1.0})
    w = CostWeights(**ALL_TERMS)
    path = tmp_path / "w.json"
    import json
    path.write_text(json.dumps(w.to_dict()))
    assert CostWeights.from_json(path) == w
    with pytest.raises(ValueError):
        CostWeights.from_dict({"omega": {}})
    assert CostWeights.from_dict({"alpha": {"p_LV": 1}}).delta == {}


def test_zero_when_identical():
    tr = trace(p_AR_SYS=90 + 10 * np.sin(np.linspace(0, 6, 81)), V_LV=np.linspace(50, 120, 81))
    q = extract_qois(tr)
    assert cost_functional(q, q, CostWeights(**ALL_TERMS)) == 0.0


def test_grid_mismatch():
    a = extract_qois(trace(p_AR_SYS=np.ones(5)))
    b = extract_qois(trace(p_AR_SYS=np.ones(6)))
    with pytest.raises(GridMismatchError):
        cost_functional(a, b, CostWeights.traces_only(["p_AR_SYS"]))
    c = extract_qois(TimeTrace(0.0, 0.02, {"p_AR_SYS": np.ones(5)}))
    with pytest.raises(GridMismatchError):
        cost_functional(a, c, CostWeights.traces_only(["p_AR_SYS"]))


def test_hand_computed_cost():
    obs = extract_qois(trace(V_LV=[10.0, 20.0, 10.0]))
    sim = extract_qois(trace(V_LV=[25.0, 20.0, 12.0]))
    mu = (100 + 400 + 100) / 3
    J = cost_functional(sim, obs, CostWeights(delta={"V_LV": 1.0}))
    assert J == pytest.approx((0.005 * 225 + 0.005 * 4) / mu)
    # max off by 5, min by 2, SV by 3
    J = cost_functional(sim, obs, CostWeights(epsilon={"V_LV": 1.0}, zeta={"V_LV": 2.0},
                                              eta={"V_LV": 1.0}))
    assert J == pytest.approx((25 + 2 * 4 + 9) / mu)


series = arrays(float, 12, elements=st.floats(1.0, 200.0))


@given(series, series, series, series)
def test_nonnegative_and_label_invariant(p_sim, v_sim, p_obs, v_obs):
    w = CostWeights(**ALL_TERMS)
    sim = extract_qois(trace(p_AR_SYS=p_sim, V_LV=v_sim))
    obs = extract_qois(trace(p_AR_SYS=p_obs, V_LV=v_obs))
    J = cost_functional(sim, obs, w)
    assert J >= 0
    # relabel channels in both sim and obs (and the weights)
    w2 = CostWeights(alpha={"p_LV": 1.0}, beta={"p_LV": 0.5}, gamma={"p_LV": 0.3},
                     delta={"V_RA": 1.0}, epsilon={"V_RA": 0.2}, zeta={"V_RA": 0.7},
                     eta={"V_RA": 2.0})
    sim2 = extract_qois(trace(V_RA=v_sim, p_LV=p_sim))
    obs2 = extract_qois(trace(V_RA=v_obs, p_LV=p_obs))
    assert cost_functional(sim2, obs2, w2) == pytest.approx(J, rel=1e-12, abs=1e-15)


@given(series, series)
def test_gradient_of_samples(y, o):
    # cost_and_gradient's dJ/dY matches central differences away from ties
    w = CostWeights(alpha={"p_AR_SYS": 1.0}, beta={"p_AR_SYS": 0.5}, gamma={"p_AR_SYS": 0.3})
    obs = extract_qois(trace(p_AR_SYS=o))
    Y = y[:, None]
    srt = np.sort(y)
    if srt[-1] - srt[-2] < 1e-3 or srt[1] - srt[0] < 1e-3:
        return
    J, g = cost_and_gradient(Y, ["p_AR_SYS"], obs, w)
    h = 1e-6
    for k in range(Y.shape[0]):
        Yp, Ym = Y.copy(), Y.copy()
        Yp[k, 0] += h
        Ym[k, 0] -= h
        fd = (cost_and_gradient(Yp, ["p_AR_SYS"], obs, w)[0]
              - cost_and_gradient(Ym, ["p_AR_SYS"], obs, w)[0]) / (2 * h)
        assert g[k, 0] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_trapezoid_vs_left_riemann():
    # on smooth signals both quadratures agree to O(dt)
    for n in (41, 81, 161):
        t = np.linspace(0, 0.8, n)
        dt = t[1] - t[0]
        f = np.sin(2 * np.pi * t / 0.8) ** 2 + 0.3 * t
        trap = float(trapezoid_weights(n, dt) @ f)
        left = float(dt * f[:-1].sum())
        assert abs(trap - left) < 2 * dt * np.max(np.abs(f))
    assert trapezoid_weights(0, 0.1).size == 0


def test_relative_l2():
    a = ParameterVector.from_params(("a_XB",))
    assert relative_l2_error(a, a) == 0.0
    assert relative_l2_error(a.with_values([275.0]), a) == pytest.approx(0.1)
    assert relative_l2_error([1.1, 0.9], [1.0, 1.0]) == pytest.approx(0.1)
    with pytest.raises(ZeroDivisionError):
        relative_l2_error([1.0], [0.0])
    with pytest.raises(ValueError):
        relative_l2_error([1.0, 2.0], [1.0])
