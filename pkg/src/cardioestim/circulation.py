"""Closed-loop 0D circulation: elastances, diode valves, RLC compartments.

State ordering (``STATE_NAMES``) is fixed; the compiled kernels below work on
flat arrays indexed by :data:`cardioestim.params.INDEX`.  The Python-level
functions wrap those kernels for scalar use and testing.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import numpy as np
from numba import njit

from .params import INDEX, ParameterSet

STATE_NAMES = (
    "V_LA", "V_LV", "V_RA", "V_RV",
    "p_AR_SYS", "p_VEN_SYS", "p_AR_PUL", "p_VEN_PUL",
    "Q_AR_SYS", "Q_VEN_SYS", "Q_AR_PUL", "Q_VEN_PUL",
)
N_CIRC = 12
(I_VLA, I_VLV, I_VRA, I_VRV, I_PAS, I_PVS, I_PAP, I_PVP,
 I_QAS, I_QVS, I_QAP, I_QVP) = range(N_CIRC)

# parameter indices baked into the kernels
_a = INDEX
P_AXB = _a["a_XB"]
P_ELA_P, P_ELA_A = _a["E_LA_pass"], _a["E_LA_act_max"]
P_ERA_P, P_ERA_A = _a["E_RA_pass"], _a["E_RA_act_max"]
P_ERV_P, P_ERV_A = _a["E_RV_pass"], _a["E_RV_act"]
P_ELV_P, P_ELV_A = _a["E_LV_pass"], _a["E_LV_act_max"]
P_V0LA, P_V0LV, P_V0RA, P_V0RV = _a["V0_LA"], _a["V0_LV"], _a["V0_RA"], _a["V0_RV"]
P_RAS, P_RVS, P_RAP, P_RVP = _a["R_AR_SYS"], _a["R_VEN_SYS"], _a["R_AR_PUL"], _a["R_VEN_PUL"]
P_CAS, P_CVS, P_CAP, P_CVP = _a["C_AR_SYS"], _a["C_VEN_SYS"], _a["C_AR_PUL"], _a["C_VEN_PUL"]
P_LAS, P_LVS, P_LAP, P_LVP = _a["L_AR_SYS"], _a["L_VEN_SYS"], _a["L_AR_PUL"], _a["L_VEN_PUL"]
P_RMIN, P_RMAX = _a["R_min"], _a["R_max"]
P_VTOT = _a["V_heart_tot"]
P_THB = _a["T_HB"]
P_TIMING = {ch: (_a[f"t_contr_{ch}"], _a[f"T_contr_{ch}"], _a[f"T_rel_{ch}"])
            for ch in ("LA", "LV", "RA", "RV")}
(P_TC_LA, P_DC_LA, P_DR_LA) = P_TIMING["LA"]
(P_TC_LV, P_DC_LV, P_DR_LV) = P_TIMING["LV"]
(P_TC_RA, P_DC_RA, P_DR_RA) = P_TIMING["RA"]
(P_TC_RV, P_DC_RV, P_DR_RV) = P_TIMING["RV"]

A_XB_REF = 250.0   # contractility at which the LV law equals the registry law

# blood split used for the initial condition (unpublished; any split reaching
# the same limit cycle is equivalent)
INIT_FRACTIONS = {"V_LA": 0.16, "V_LV": 0.34, "V_RA": 0.16, "V_RV": 0.34}
INIT_PRESSURES = {"p_AR_SYS": 80.0, "p_VEN_SYS": 30.0, "p_AR_PUL": 25.0, "p_VEN_PUL": 15.0}
NON_DIFFERENTIABLE = frozenset(
    [n for ch in ("LA", "LV", "RA", "RV") for n in (f"t_contr_{ch}", f"T_contr_{ch}", f"T_rel_{ch}")]
    + ["T_HB"]
)


@dataclass
class CirculationState:
    V_LA: float
    V_LV: float
    V_RA: float
    V_RV: float
    p_AR_SYS: float
    p_VEN_SYS: float
    p_AR_PUL: float
    p_VEN_PUL: float
    Q_AR_SYS: float = 0.0
    Q_VEN_SYS: float = 0.0
    Q_AR_PUL: float = 0.0
    Q_VEN_PUL: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, arr) -> "CirculationState":
        arr = np.asarray(arr, dtype=float)
        if arr.shape[-1] < N_CIRC:
            raise ValueError("circulation state has exactly 12 components")
        return cls(*(float(x) for x in arr[:N_CIRC]))


@dataclass
class DerivedFlows:
    p_LA: float
    p_LV: float
    p_RA: float
    p_RV: float
    Q_MV: float
    Q_AV: float
    Q_TV: float
    Q_PV: float


DERIVED_NAMES = tuple(f.name for f in fields(DerivedFlows))


# ---------------------------------------------------------------------------
# compiled building blocks
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def elastance_phi(t, t_contr, t_rel, T_contr, T_rel, T_HB):
    """Raised-cosine activation in [0, 1], periodic in ``T_HB``."""
    m = (t - t_contr) % T_HB
    if 0.0 <= m < T_contr:
        return 0.5 * (1.0 - math.cos(math.pi / T_contr * m))
    m = (t - t_rel) % T_HB
    if T_HB - m < 1e-12 * T_HB:
        # t a rounding error before t_rel: the mod wrapped to ~T_HB
        m = 0.0
    if 0.0 <= m < T_rel:
        return 0.5 * (1.0 + math.cos(math.pi / T_rel * m))
    return 0.0


@njit(cache=True, nogil=True)
def chamber_phi(P, t, i_tc, i_dc, i_dr):
    tc = P[i_tc]
    dc = P[i_dc]
    return elastance_phi(t, tc, tc + dc, dc, P[i_dr], P[P_THB])


@njit(cache=True, nogil=True)
def _open_fraction(dp, width):
    # weight of log(R_max) in log R; 0 = fully open
    if width <= 0.0:
        return 0.0 if dp >= 0.0 else 1.0
    x = dp / width
    if x >= 0.0:
        e = math.exp(-x)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(x))


@njit(cache=True, nogil=True)
def valve_R(dp, r_min, r_max, width):
    s = _open_fraction(dp, width)
    if s == 0.0:
        return r_min
    if s == 1.0:
        return r_max
    return math.exp((1.0 - s) * math.log(r_min) + s * math.log(r_max))


@njit(cache=True, nogil=True)
def valve_flow(dp, r_min, r_max, width):
    """Flow ``dp/R(dp)`` and its partials w.r.t. ``dp``, ``R_min``, ``R_max``."""
    s = _open_fraction(dp, width)
    lmin = math.log(r_min)
    lmax = math.log(r_max)
    if s == 0.0:
        R = r_min
    elif s == 1.0:
        R = r_max
    else:
        R = math.exp((1.0 - s) * lmin + s * lmax)
    q = dp / R
    dq = 1.0 / R
    if width > 0.0:
        dq += q * (lmax - lmin) * s * (1.0 - s) / width
    return q, dq, -q * (1.0 - s) / r_min, -q * s / r_max


@njit(cache=True, nogil=True)
def lv_elastance(P, t):
    """LV elastance with active part scaled by contractility ``a_XB/250``."""
    phi = chamber_phi(P, t, P_TC_LV, P_DC_LV, P_DR_LV)
    return P[P_ELV_P] + P[P_AXB] / A_XB_REF * P[P_ELV_A] * phi, phi


@njit(cache=True, nogil=True)
def chamber_pressures(P, t, c, out):
    """Elastance-law pressures of LA, LV (registry-scaled), RA, RV into ``out[0:4]``."""
    phi = chamber_phi(P, t, P_TC_LA, P_DC_LA, P_DR_LA)
    out[0] = (P[P_ELA_P] + P[P_ELA_A] * phi) * (c[I_VLA] - P[P_V0LA])
    e_lv, _ = lv_elastance(P, t)
    out[1] = e_lv * (c[I_VLV] - P[P_V0LV])
    phi = chamber_phi(P, t, P_TC_RA, P_DC_RA, P_DR_RA)
    out[2] = (P[P_ERA_P] + P[P_ERA_A] * phi) * (c[I_VRA] - P[P_V0RA])
    phi = chamber_phi(P, t, P_TC_RV, P_DC_RV, P_DR_RV)
    out[3] = (P[P_ERV_P] + P[P_ERV_A] * phi) * (c[I_VRV] - P[P_V0RV])


@njit(cache=True, nogil=True)
def circ_rhs(t, c, P, p_lv, width, out):
    """Right-hand side of the twelve circulation equations given ``p_LV``.

    Writes ``out[0:12]`` and returns the four valve flows.
    """
    phi = chamber_phi(P, t, P_TC_LA, P_DC_LA, P_DR_LA)
    p_la = (P[P_ELA_P] + P[P_ELA_A] * phi) * (c[I_VLA] - P[P_V0LA])
    phi = chamber_phi(P, t, P_TC_RA, P_DC_RA, P_DR_RA)
    p_ra = (P[P_ERA_P] + P[P_ERA_A] * phi) * (c[I_VRA] - P[P_V0RA])
    phi = chamber_phi(P, t, P_TC_RV, P_DC_RV, P_DR_RV)
    p_rv = (P[P_ERV_P] + P[P_ERV_A] * phi) * (c[I_VRV] - P[P_V0RV])
    rmin = P[P_RMIN]
    rmax = P[P_RMAX]
    q_mv = valve_flow(p_la - p_lv, rmin, rmax, width)[0]
    q_av = valve_flow(p_lv - c[I_PAS], rmin, rmax, width)[0]
    q_tv = valve_flow(p_ra - p_rv, rmin, rmax, width)[0]
    q_pv = valve_flow(p_rv - c[I_PAP], rmin, rmax, width)[0]
    out[I_VLA] = c[I_QVP] - q_mv
    out[I_VLV] = q_mv - q_av
    out[I_VRA] = c[I_QVS] - q_tv
    out[I_VRV] = q_tv - q_pv
    out[I_PAS] = (q_av - c[I_QAS]) / P[P_CAS]
    out[I_PVS] = (c[I_QAS] - c[I_QVS]) / P[P_CVS]
    out[I_PAP] = (q_pv - c[I_QAP]) / P[P_CAP]
    out[I_PVP] = (c[I_QAP] - c[I_QVP]) / P[P_CVP]
    out[I_QAS] = (c[I_PAS] - c[I_PVS] - P[P_RAS] * c[I_QAS]) / P[P_LAS]
    out[I_QVS] = (c[I_PVS] - p_ra - P[P_RVS] * c[I_QVS]) / P[P_LVS]
    out[I_QAP] = (c[I_PAP] - c[I_PVP] - P[P_RAP] * c[I_QAP]) / P[P_LAP]
    out[I_QVP] = (c[I_PVP] - p_la - P[P_RVP] * c[I_QVP]) / P[P_LVP]
    return q_mv, q_av, q_tv, q_pv


@njit(cache=True, nogil=True)
def _chamber_vjp(P, t, c, bar_p, i_v, i_v0, i_ep, i_ea, i_tc, i_dc, i_dr, gs, gP):
    phi = chamber_phi(P, t, i_tc, i_dc, i_dr)
    e = P[i_ep] + P[i_ea] * phi
    stretch = c[i_v] - P[i_v0]
    gs[i_v] += bar_p * e
    gP[i_v0] -= bar_p * e
    gP[i_ep] += bar_p * stretch
    gP[i_ea] += bar_p * stretch * phi


@njit(cache=True, nogil=True)
def circ_vjp(t, c, P, p_lv, width, v, gs, gP):
    """Accumulate ``v^T d(circ_rhs)/dc`` into ``gs[0:12]`` and ``.../dP`` into ``gP``.

    Returns ``v^T d(circ_rhs)/d p_LV``.
    """
    phi_la = chamber_phi(P, t, P_TC_LA, P_DC_LA, P_DR_LA)
    p_la = (P[P_ELA_P] + P[P_ELA_A] * phi_la) * (c[I_VLA] - P[P_V0LA])
    phi_ra = chamber_phi(P, t, P_TC_RA, P_DC_RA, P_DR_RA)
    p_ra = (P[P_ERA_P] + P[P_ERA_A] * phi_ra) * (c[I_VRA] - P[P_V0RA])
    phi_rv = chamber_phi(P, t, P_TC_RV, P_DC_RV, P_DR_RV)
    p_rv = (P[P_ERV_P] + P[P_ERV_A] * phi_rv) * (c[I_VRV] - P[P_V0RV])
    rmin = P[P_RMIN]
    rmax = P[P_RMAX]
    q_mv, d_mv, dmin_mv, dmax_mv = valve_flow(p_la - p_lv, rmin, rmax, width)
    q_av, d_av, dmin_av, dmax_av = valve_flow(p_lv - c[I_PAS], rmin, rmax, width)
    q_tv, d_tv, dmin_tv, dmax_tv = valve_flow(p_ra - p_rv, rmin, rmax, width)
    q_pv, d_pv, dmin_pv, dmax_pv = valve_flow(p_rv - c[I_PAP], rmin, rmax, width)

    cas, cvs, cap, cvp = P[P_CAS], P[P_CVS], P[P_CAP], P[P_CVP]
    las, lvs, lap, lvp = P[P_LAS], P[P_LVS], P[P_LAP], P[P_LVP]
    ras, rvs, rap, rvp = P[P_RAS], P[P_RVS], P[P_RAP], P[P_RVP]

    # direct parameter dependence of the RLC equations
    g4 = (q_av - c[I_QAS]) / cas
    g5 = (c[I_QAS] - c[I_QVS]) / cvs
    g6 = (q_pv - c[I_QAP]) / cap
    g7 = (c[I_QAP] - c[I_QVP]) / cvp
    g8 = (c[I_PAS] - c[I_PVS] - ras * c[I_QAS]) / las
    g9 = (c[I_PVS] - p_ra - rvs * c[I_QVS]) / lvs
    g10 = (c[I_PAP] - c[I_PVP] - rap * c[I_QAP]) / lap
    g11 = (c[I_PVP] - p_la - rvp * c[I_QVP]) / lvp
    gP[P_CAS] -= v[I_PAS] * g4 / cas
    gP[P_CVS] -= v[I_PVS] * g5 / cvs
    gP[P_CAP] -= v[I_PAP] * g6 / cap
    gP[P_CVP] -= v[I_PVP] * g7 / cvp
    gP[P_LAS] -= v[I_QAS] * g8 / las
    gP[P_LVS] -= v[I_QVS] * g9 / lvs
    gP[P_LAP] -= v[I_QAP] * g10 / lap
    gP[P_LVP] -= v[I_QVP] * g11 / lvp
    gP[P_RAS] -= v[I_QAS] * c[I_QAS] / las
    gP[P_RVS] -= v[I_QVS] * c[I_QVS] / lvs
    gP[P_RAP] -= v[I_QAP] * c[I_QAP] / lap
    gP[P_RVP] -= v[I_QVP] * c[I_QVP] / lvp

    # adjoints of intermediate flows and pressures
    bar_mv = -v[I_VLA] + v[I_VLV]
    bar_av = -v[I_VLV] + v[I_PAS] / cas
    bar_tv = -v[I_VRA] + v[I_VRV]
    bar_pv = -v[I_VRV] + v[I_PAP] / cap
    gs[I_QVP] += v[I_VLA] - v[I_PVP] / cvp - v[I_QVP] * rvp / lvp
    gs[I_QVS] += v[I_VRA] - v[I_PVS] / cvs - v[I_QVS] * rvs / lvs
    gs[I_QAS] += -v[I_PAS] / cas + v[I_PVS] / cvs - v[I_QAS] * ras / las
    gs[I_QAP] += -v[I_PAP] / cap + v[I_PVP] / cvp - v[I_QAP] * rap / lap
    gs[I_PAS] += v[I_QAS] / las
    gs[I_PVS] += -v[I_QAS] / las + v[I_QVS] / lvs
    gs[I_PAP] += v[I_QAP] / lap
    gs[I_PVP] += -v[I_QAP] / lap + v[I_QVP] / lvp
    bar_pra = -v[I_QVS] / lvs
    bar_pla = -v[I_QVP] / lvp
    bar_prv = 0.0
    bar_plv = 0.0

    gP[P_RMIN] += bar_mv * dmin_mv + bar_av * dmin_av + bar_tv * dmin_tv + bar_pv * dmin_pv
    gP[P_RMAX] += bar_mv * dmax_mv + bar_av * dmax_av + bar_tv * dmax_tv + bar_pv * dmax_pv
    b = bar_mv * d_mv
    bar_pla += b
    bar_plv -= b
    b = bar_av * d_av
    bar_plv += b
    gs[I_PAS] -= b
    b = bar_tv * d_tv
    bar_pra += b
    bar_prv -= b
    b = bar_pv * d_pv
    bar_prv += b
    gs[I_PAP] -= b

    _chamber_vjp(P, t, c, bar_pla, I_VLA, P_V0LA, P_ELA_P, P_ELA_A,
                 P_TC_LA, P_DC_LA, P_DR_LA, gs, gP)
    _chamber_vjp(P, t, c, bar_pra, I_VRA, P_V0RA, P_ERA_P, P_ERA_A,
                 P_TC_RA, P_DC_RA, P_DR_RA, gs, gP)
    _chamber_vjp(P, t, c, bar_prv, I_VRV, P_V0RV, P_ERV_P, P_ERV_A,
                 P_TC_RV, P_DC_RV, P_DR_RV, gs, gP)
    return bar_plv


@njit(cache=True, nogil=True)
def lv_pressure_vjp(P, t, c, bar_p, gs, gP):
    """Back-propagate ``bar_p`` through ``p_LV = E_LV(t; a_XB)(V_LV - V0_LV)``."""
    e, phi = lv_elastance(P, t)
    stretch = c[I_VLV] - P[P_V0LV]
    gs[I_VLV] += bar_p * e
    gP[P_V0LV] -= bar_p * e
    bar_e = bar_p * stretch
    gP[P_ELV_P] += bar_e
    gP[P_ELV_A] += bar_e * P[P_AXB] / A_XB_REF * phi
    gP[P_AXB] += bar_e * P[P_ELV_A] * phi / A_XB_REF


# ---------------------------------------------------------------------------
# Python-level API
# ---------------------------------------------------------------------------

def _P(params: ParameterSet | np.ndarray) -> np.ndarray:
    return params.vector() if isinstance(params, ParameterSet) else np.asarray(params, dtype=float)


def _c(state) -> np.ndarray:
    arr = state.to_array() if isinstance(state, CirculationState) else np.asarray(state, dtype=float)
    if arr.shape != (N_CIRC,):
        raise ValueError("circulation state has exactly 12 components")
    return arr


_CHAMBER_IDX = {
    "LA": (P_ELA_P, P_ELA_A, P_TIMING["LA"]),
    "LV": (P_ELV_P, P_ELV_A, P_TIMING["LV"]),
    "RA": (P_ERA_P, P_ERA_A, P_TIMING["RA"]),
    "RV": (P_ERV_P, P_ERV_A, P_TIMING["RV"]),
}


def chamber_elastance(chamber: str, t: float, params: ParameterSet) -> float:
    """Registry elastance ``E_pass + E_act_max * phi(t)`` of one chamber."""
    P = _P(params)
    i_p, i_a, timing = _CHAMBER_IDX[chamber]
    return float(P[i_p] + P[i_a] * chamber_phi(P, float(t), *timing))


def valve_resistance(p_up: float, p_down: float, params: ParameterSet,
                     smoothing_width: float = 0.0) -> float:
    """Diode resistance: ``R_min`` with a forward gradient, ``R_max`` otherwise."""
    if smoothing_width < 0:
        raise ValueError("smoothing_width must be >= 0")
    P = _P(params)
    return float(valve_R(float(p_up) - float(p_down), P[P_RMIN], P[P_RMAX], float(smoothing_width)))


def derived_flows(t: float, state, params: ParameterSet, lv_pressure: float | None = None,
                  smoothing_width: float = 0.0) -> DerivedFlows:
    P = _P(params)
    c = _c(state)
    pres = np.empty(4)
    chamber_pressures(P, float(t), c, pres)
    if lv_pressure is not None:
        pres[1] = float(lv_pressure)
    out = np.empty(N_CIRC)
    flows = circ_rhs(float(t), c, P, pres[1], float(smoothing_width), out)
    return DerivedFlows(*(float(x) for x in pres), *(float(q) for q in flows))


def circulation_rhs(t: float, state, params: ParameterSet, lv_pressure: float | None = None,
                    smoothing_width: float = 0.0) -> np.ndarray:
    """Time derivative of the twelve circulation variables.

    Without ``lv_pressure`` the LV follows its elastance law; with it, the
    supplied pressure replaces that law (surrogate coupling).
    """
    P = _P(params)
    c = _c(state)
    if lv_pressure is None:
        pres = np.empty(4)
        chamber_pressures(P, float(t), c, pres)
        p_lv = pres[1]
    else:
        p_lv = float(lv_pressure)
    out = np.empty(N_CIRC)
    circ_rhs(float(t), c, P, p_lv, float(smoothing_width), out)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite circulation derivative at t={t}: invalid state")
    return out


def total_blood_volume(state, params: ParameterSet) -> float:
    """Chamber volumes plus capacitive (stressed) vascular volumes."""
    P = _P(params)
    c = _c(state)
    return float(c[I_VLA] + c[I_VLV] + c[I_VRA] + c[I_VRV]
                 + P[P_CAS] * c[I_PAS] + P[P_CVS] * c[I_PVS]
                 + P[P_CAP] * c[I_PAP] + P[P_CVP] * c[I_PVP])


def initial_state(params: ParameterSet) -> CirculationState:
    v = params["V_heart_tot"] if isinstance(params, ParameterSet) else float(_P(params)[P_VTOT])
    return CirculationState(
        V_LA=INIT_FRACTIONS["V_LA"] * v, V_LV=INIT_FRACTIONS["V_LV"] * v,
        V_RA=INIT_FRACTIONS["V_RA"] * v, V_RV=INIT_FRACTIONS["V_RV"] * v,
        **INIT_PRESSURES,
    )
