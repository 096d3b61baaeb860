from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cardioestim.circulation import (
    INIT_FRACTIONS, N_CIRC, STATE_NAMES, CirculationState, chamber_elastance, circulation_rhs,
    derived_flows, elastance_phi, initial_state, total_blood_volume, valve_resistance,
)
from cardioestim.model import Model
from cardioestim.ode import SolverConfig


def phi_la(t, p):
    return elastance_phi(t, p["t_contr_LA"], p.t_rel("LA"), p["T_contr_LA"], p["T_rel_LA"], p["T_HB"])


def test_phi_branches(base):
    tc, Tc = base["t_contr_LV"], base["T_contr_LV"]
    args = (tc, base.t_rel("LV"), Tc, base["T_rel_LV"], base["T_HB"])
    assert elastance_phi(tc, *args) == pytest.approx(0.0, abs=1e-15)
    assert elastance_phi(tc + Tc / 2, *args) == pytest.approx(0.5, abs=1e-12)
    assert elastance_phi(tc + Tc, *args) == pytest.approx(1.0, abs=1e-12)
    # after relaxation, before the next contraction
    t_quiet = base.t_rel("LV") + base["T_rel_LV"] + 0.05
    assert elastance_phi(t_quiet, *args) == 0.0


def test_phi_wraps_across_the_period(base):
    # LA contraction starts at 0.64 s and relaxes into the next beat
    t = 0.1
    assert phi_la(t, base) > 0.0
    assert phi_la(t, base) == pytest.approx(phi_la(t + base["T_HB"], base), abs=1e-12)


def test_elastance_examples(base):
    t_full = base.t_rel("RA")          # phi = 1 at the end of contraction
    assert chamber_elastance("RA", t_full, base) == pytest.approx(0.25, abs=1e-12)
    t_mid = base["t_contr_LA"] + base["T_contr_LA"] / 2
    assert chamber_elastance("LA", t_mid, base) == pytest.approx(0.185, abs=1e-12)
    for ch in ("LA", "RA", "RV", "LV"):
        t_quiet = (base[f"t_contr_{ch}"] - 0.01) % base["T_HB"]
        assert chamber_elastance(ch, t_quiet, base) == pytest.approx(base[f"E_{ch}_pass"])


@pytest.mark.parametrize("ch", ["LA", "LV", "RA", "RV"])
def test_elastance_continuity(ch, base):
    T = base["T_HB"]
    t0 = base[f"t_contr_{ch}"]
    edges = [t0, t0 + base[f"T_contr_{ch}"], t0 + base[f"T_contr_{ch}"] + base[f"T_rel_{ch}"]]
    for b in edges:
        b = b % T if b % T > 1e-6 else b
        if b < 1e-6:
            b = T        # approach the period boundary from both sides
        lo = chamber_elastance(ch, b - 1e-9, base)
        hi = chamber_elastance(ch, b + 1e-9, base)
        assert abs(hi - lo) < 1e-10


def test_valve_resistance(base):
    assert valve_resistance(80, 10, base) == 0.0075
    assert valve_resistance(10, 80, base) == 75000.0
    mid = valve_resistance(50, 50, base, smoothing_width=0.1)
    assert mid == pytest.approx(math.sqrt(0.0075 * 75000.0), rel=1e-12)
    with pytest.raises(ValueError):
        valve_resistance(1, 0, base, smoothing_width=-1)


@given(dp=st.floats(-50, 50).filter(lambda x: abs(x) > 1e-3))
def test_valve_smoothing_limit(dp, base):
    sharp = valve_resistance(dp, 0.0, base)
    smooth = valve_resistance(dp, 0.0, base, smoothing_width=1e-6)
    assert smooth == pytest.approx(sharp, rel=1e-6)


def test_valve_smoothing_monotone(base):
    w = [valve_resistance(dp, 0.0, base, 0.1) for dp in np.linspace(-1, 1, 41)]
    assert np.all(np.diff(w) <= 0)


def test_lv_pressure_zero_stretch(base):
    s = initial_state(base).to_array()
    s[1] = base["V0_LV"]
    for t in (0.0, 0.1, 0.3, 0.7):
        assert derived_flows(t, s, base).p_LV == pytest.approx(0.0, abs=1e-12)


def test_mitral_flow_and_override(base):
    # choose volumes so that p_LA = 12 and p_LV = 8 in the passive phase
    t = 0.55
    e_la = chamber_elastance("LA", t, base)
    e_lv = chamber_elastance("LV", t, base)
    s = initial_state(base).to_array()
    s[0] = base["V0_LA"] + 12.0 / e_la
    s[1] = base["V0_LV"] + 8.0 / e_lv
    d = derived_flows(t, s, base)
    assert d.p_LA == pytest.approx(12.0) and d.p_LV == pytest.approx(8.0)
    assert d.Q_MV == pytest.approx(4.0 / 0.0075, rel=1e-12)
    assert derived_flows(t, s, base, lv_pressure=90.0).p_LV == 90.0


def test_rhs_examples(base):
    s = initial_state(base).to_array()
    d = derived_flows(0.3, s, base)
    g = circulation_rhs(0.3, s, base)
    assert g[1] == pytest.approx(d.Q_MV - d.Q_AV, rel=1e-12, abs=1e-9)
    # pressure balance on the systemic arterial compartment
    s2 = s.copy()
    s2[8] = 1.0                       # Q_AR_SYS
    g2 = circulation_rhs(0.3, s2, base)
    d2 = derived_flows(0.3, s2, base)
    assert g2[4] == pytest.approx((d2.Q_AV - 1.0) / base["C_AR_SYS"], rel=1e-12)
    # Q_AR_SYS = 0 and p_VEN_SYS = p_AR_SYS -> no inertial acceleration
    s3 = s.copy()
    s3[5] = s3[4]
    s3[8] = 0.0
    assert circulation_rhs(0.3, s3, base)[8] == pytest.approx(0.0, abs=1e-12)


def test_rhs_invalid_state(base):
    s = initial_state(base).to_array()
    s[4] = np.inf
    with pytest.raises(FloatingPointError):
        circulation_rhs(0.1, s, base)
    with pytest.raises(ValueError):
        circulation_rhs(0.1, s[:5], base)


def test_rhs_periodic_in_time(base, rng):
    s = initial_state(base).to_array() * (1 + 0.1 * rng.standard_normal(N_CIRC))
    for t in rng.uniform(0, 0.8, size=10):
        np.testing.assert_allclose(circulation_rhs(t, s, base),
                                   circulation_rhs(t + base["T_HB"], s, base), rtol=1e-9, atol=1e-9)


def test_total_volume_examples(base):
    zero = CirculationState(100, 100, 100, 100, 0, 0, 0, 0)
    assert total_blood_volume(zero, base) == 400.0
    s = initial_state(base).to_array()
    v0 = total_blood_volume(s, base)
    s[4] += 2.5
    assert total_blood_volume(s, base) == pytest.approx(v0 + 1.2 * 2.5)


@given(st.lists(st.floats(-100, 100), min_size=12, max_size=12), st.floats(0, 0.8))
def test_volume_rate_vanishes(state, t):
    # the total volume is a first integral: its time derivative is identically zero
    from cardioestim.params import baseline_parameters
    p = baseline_parameters()
    s = np.array(state)
    s[:4] = np.abs(s[:4]) + 10.0
    g = circulation_rhs(t, s, p, smoothing_width=0.1)
    rate = g[:4].sum() + p["C_AR_SYS"] * g[4] + p["C_VEN_SYS"] * g[5] \
        + p["C_AR_PUL"] * g[6] + p["C_VEN_PUL"] * g[7]
    scale = 1.0 + np.max(np.abs(g[:4]))
    assert abs(rate) < 1e-9 * scale


def test_initial_state(base):
    c = initial_state(base)
    assert c.V_LV == pytest.approx(141.78)
    assert c.V_LA + c.V_LV + c.V_RA + c.V_RV == pytest.approx(417.0, rel=1e-15)
    assert sum(INIT_FRACTIONS.values()) == pytest.approx(1.0)
    low = initial_state(base.replace(V_heart_tot=200.0)).to_array()
    assert np.all(low[:4] > 0)
    assert CirculationState.from_array(c.to_array()) == c
    assert len(STATE_NAMES) == N_CIRC


def test_conservation_over_five_beats(base):
    model = Model("direct", base)
    sim = model.simulate(n_beats=5, cfg=SolverConfig(rtol=1e-6))
    v = sim.trace["V_tot"]
    assert np.max(np.abs(v - v[0])) / v[0] < 1e-5


def test_smoothed_conservation(base):
    model = Model("direct", base, smoothing_width=0.1)
    v = model.simulate(n_beats=5).trace["V_tot"]
    assert np.max(np.abs(v - v[0])) / v[0] < 10 * 1e-6
