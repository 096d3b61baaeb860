"""The coupled system: circulation plus one of three LV closures.

``kind = "direct"``
    12 states; ``p_LV`` from the contractility-scaled elastance law.
``kind = "elastance"``
    13 states; ``p_LV`` is a state tied to :class:`ElastanceSurrogate` by the
    ``eps`` penalty.
``kind = "ann"``
    ``13 + n_z`` states; ``p_LV`` tied to the latent volume ``z[0]`` of an
    :class:`AnnSurrogate`.

All three share the compiled right-hand side :func:`model_rhs` and its
vector-Jacobian product :func:`model_vjp`, which the adjoint consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import circulation as cc
from .circulation import (
    I_VLV, N_CIRC, P_AXB, P_ELV_A, P_ELV_P, P_V0LV, P_VTOT, STATE_NAMES,
    chamber_phi, chamber_pressures, circ_rhs, circ_vjp, lv_elastance, lv_pressure_vjp,
)
from .ode import SolverConfig, SolverError, TimeTrace, march_nodes, register_rhs, sample_grid
from .params import ParameterSet, ParameterVector, baseline_parameters
from .surrogate import DEFAULT_EPS, AnnSurrogate, AnnWeights, ann_backward, ann_forward

KINDS = {"direct": 0, "elastance": 1, "ann": 2}
CHAMBER_PRESSURES = ("p_LA", "p_LV", "p_RA", "p_RV")
VALVE_FLOWS = ("Q_MV", "Q_AV", "Q_TV", "Q_PV")
_PRESSURE_CODE = {"p_LA": -1, "p_LV": -2, "p_RA": -3, "p_RV": -4}


# ---------------------------------------------------------------------------
# compiled kernels
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _ann_input(t, y, P, th_idx, nz, x):
    for i in range(nz):
        x[i] = y[N_CIRC + 1 + i]
    nt = th_idx.size
    for j in range(nt):
        x[nz + j] = P[th_idx[j]]
    w = 2.0 * np.pi * t / P[cc.P_THB]
    x[nz + nt] = y[N_CIRC]
    x[nz + nt + 1] = np.cos(w)
    x[nz + nt + 2] = np.sin(w)


@njit(cache=True, nogil=True)
def model_rhs(t, y, args, out):
    P, kind, width, eps, rows, cols, w_off, b_off, wflat, bflat, acts, th_idx, work = args
    if kind == 0:
        e, _ = lv_elastance(P, t)
        circ_rhs(t, y, P, e * (y[I_VLV] - P[P_V0LV]), width, out)
        return
    p_lv = y[N_CIRC]
    circ_rhs(t, y, P, p_lv, width, out)
    if kind == 1:
        e, _ = lv_elastance(P, t)
        out[N_CIRC] = (y[I_VLV] - P[P_V0LV] - p_lv / e) / eps
        return
    nz = rows[rows.size - 1]
    out[N_CIRC] = (y[I_VLV] - y[N_CIRC + 1]) / eps
    nin = cols[0]
    nh = b_off[b_off.size - 1]
    x = work[:nin]
    _ann_input(t, y, P, th_idx, nz, x)
    ann_forward(x, rows, cols, w_off, b_off, wflat, bflat, acts,
                work[nin:nin + nh], out[N_CIRC + 1:N_CIRC + 1 + nz])


register_rhs(13, model_rhs)


@njit(cache=True, nogil=True)
def model_vjp(t, y, args, v, gs, gP):
    """Accumulate ``v^T dg/ds`` into ``gs`` and ``v^T dg/dP`` into ``gP``."""
    P, kind, width, eps, rows, cols, w_off, b_off, wflat, bflat, acts, th_idx, work = args
    if kind == 0:
        e, _ = lv_elastance(P, t)
        bar = circ_vjp(t, y, P, e * (y[I_VLV] - P[P_V0LV]), width, v, gs, gP)
        lv_pressure_vjp(P, t, y, bar, gs, gP)
        return
    p_lv = y[N_CIRC]
    gs[N_CIRC] += circ_vjp(t, y, P, p_lv, width, v, gs, gP)
    w = v[N_CIRC] / eps
    gs[I_VLV] += w
    if kind == 1:
        e, phi = lv_elastance(P, t)
        gP[P_V0LV] -= w
        gs[N_CIRC] -= w / e
        bar_e = w * p_lv / (e * e)
        gP[P_ELV_P] += bar_e
        gP[P_ELV_A] += bar_e * P[P_AXB] / cc.A_XB_REF * phi
        gP[P_AXB] += bar_e * P[P_ELV_A] * phi / cc.A_XB_REF
        return
    nz = rows[rows.size - 1]
    nt = th_idx.size
    gs[N_CIRC + 1] -= w
    nin = cols[0]
    nh = b_off[b_off.size - 1]
    x = work[:nin]
    hbuf = work[nin:nin + nh]
    gbuf = work[nin + nh:nin + 2 * nh]
    bar_x = work[nin + 2 * nh:2 * nin + 2 * nh]
    tmp = work[2 * nin + 2 * nh:2 * nin + 2 * nh + nz]
    _ann_input(t, y, P, th_idx, nz, x)
    ann_forward(x, rows, cols, w_off, b_off, wflat, bflat, acts, hbuf, tmp)
    ann_backward(v[N_CIRC + 1:N_CIRC + 1 + nz], rows, cols, w_off, b_off, wflat, acts,
                 hbuf, gbuf, bar_x)
    for i in range(nz):
        gs[N_CIRC + 1 + i] += bar_x[i]
    for j in range(nt):
        gP[th_idx[j]] += bar_x[nz + j]
    gs[N_CIRC] += bar_x[nz + nt]


@njit(cache=True, nogil=True)
def _pressure_parts(P, t, code):
    # (state index, V0 index, E_pass index, E_act index, timing.., scale)
    if code == -1:
        return cc.I_VLA, cc.P_V0LA, cc.P_ELA_P, cc.P_ELA_A, cc.P_TC_LA, cc.P_DC_LA, cc.P_DR_LA
    if code == -3:
        return cc.I_VRA, cc.P_V0RA, cc.P_ERA_P, cc.P_ERA_A, cc.P_TC_RA, cc.P_DC_RA, cc.P_DR_RA
    return cc.I_VRV, cc.P_V0RV, cc.P_ERV_P, cc.P_ERV_A, cc.P_TC_RV, cc.P_DC_RV, cc.P_DR_RV


@njit(cache=True, nogil=True)
def channel_values(codes, ts, states, P, out):
    """``out[k, c]`` = channel ``codes[c]`` at node ``k``."""
    for k in range(ts.size):
        t = ts[k]
        s = states[k]
        for c in range(codes.size):
            code = codes[c]
            if code >= 0:
                out[k, c] = s[code]
            elif code == -2:
                e, _ = lv_elastance(P, t)
                out[k, c] = e * (s[I_VLV] - P[P_V0LV])
            else:
                iv, iv0, ip, ia, itc, idc, idr = _pressure_parts(P, t, code)
                phi = chamber_phi(P, t, itc, idc, idr)
                out[k, c] = (P[ip] + P[ia] * phi) * (s[iv] - P[iv0])


@njit(cache=True, nogil=True)
def channel_vjp(codes, ts, states, P, bar, gS, gP):
    """Back-propagate ``bar[k, c]`` into node-state jumps ``gS[k]`` and ``gP``."""
    for k in range(ts.size):
        t = ts[k]
        s = states[k]
        g = gS[k]
        for c in range(codes.size):
            b = bar[k, c]
            if b == 0.0:
                continue
            code = codes[c]
            if code >= 0:
                g[code] += b
            elif code == -2:
                lv_pressure_vjp(P, t, s, b, g, gP)
            else:
                iv, iv0, ip, ia, itc, idc, idr = _pressure_parts(P, t, code)
                phi = chamber_phi(P, t, itc, idc, idr)
                e = P[ip] + P[ia] * phi
                stretch = s[iv] - P[iv0]
                g[iv] += b * e
                gP[iv0] -= b * e
                gP[ip] += b * stretch
                gP[ia] += b * stretch * phi


@njit(cache=True, nogil=True)
def derived_series(ts, states, P, kind, width, out):
    """Chamber pressures and valve flows at every node, shape ``(n, 8)``."""
    pres = np.empty(4)
    tmp = np.empty(N_CIRC)
    for k in range(ts.size):
        s = states[k]
        chamber_pressures(P, ts[k], s, pres)
        if kind != 0:
            pres[1] = s[N_CIRC]
        q = circ_rhs(ts[k], s, P, pres[1], width, tmp)
        for i in range(4):
            out[k, i] = pres[i]
            out[k, 4 + i] = q[i]


# ---------------------------------------------------------------------------
# Python model object
# ---------------------------------------------------------------------------

@dataclass
class Simulation:
    """Node-by-node forward solution on ``[0, n_beats*T_HB]``."""

    period: float
    nodes: np.ndarray
    states: np.ndarray      # (n_nodes, n_state)
    steps: np.ndarray       # step size proposed on arrival at each node
    P: np.ndarray
    n_steps: int
    trace: TimeTrace

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1].copy()


@dataclass(frozen=True)
class Model:
    """Closed-loop heart-circulation model with a selectable LV closure.

    Parameters
    ----------
    kind : {"direct", "elastance", "ann"}
        LV closure (see module docstring).
    params : ParameterSet
        Constants not being estimated.
    smoothing_width : float
        Valve smoothing in mmHg; must be positive wherever gradients are needed.
    eps : float
        Penalty of the pressure-volume coupling (ignored by ``"direct"``).
    weights : AnnWeights, optional
        Network for ``kind="ann"``.
    """

    kind: str = "direct"
    params: ParameterSet = field(default_factory=baseline_parameters)
    smoothing_width: float = 0.0
    eps: float = DEFAULT_EPS
    weights: AnnWeights | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.smoothing_width < 0:
            raise ValueError("smoothing_width must be >= 0")
        if self.kind != "direct" and not self.eps > 0:
            raise ValueError("eps must be strictly positive")
        if self.kind == "ann" and self.weights is None:
            raise ValueError("kind='ann' needs weights")

    # -- layout ---------------------------------------------------------------
    @property
    def code(self) -> int:
        return KINDS[self.kind]

    @property
    def n_latent(self) -> int:
        return self.weights.n_z if self.kind == "ann" else 0

    @property
    def n_state(self) -> int:
        return N_CIRC if self.kind == "direct" else N_CIRC + 1 + self.n_latent

    @property
    def state_names(self) -> tuple[str, ...]:
        if self.kind == "direct":
            return STATE_NAMES
        return STATE_NAMES + ("p_LV",) + tuple(f"z{i}" for i in range(self.n_latent))

    @property
    def surrogate(self):
        from .surrogate import ElastanceSurrogate
        if self.kind == "ann":
            return AnnSurrogate(self.weights)
        return ElastanceSurrogate() if self.kind == "elastance" else None

    def channel_codes(self, names) -> np.ndarray:
        idx = {n: i for i, n in enumerate(self.state_names)}
        codes = []
        for n in names:
            if n in idx:
                codes.append(idx[n])
            elif n in _PRESSURE_CODE:
                codes.append(_PRESSURE_CODE[n])
            else:
                raise KeyError(f"unknown or non-differentiable channel {n!r}")
        return np.array(codes, dtype=np.int64)

    # -- parameters and arguments ---------------------------------------------
    def parameter_array(self, theta=None, params: ParameterSet | None = None) -> np.ndarray:
        base = self.params if params is None else params
        if theta is None:
            return base.vector()
        if isinstance(theta, ParameterVector):
            return theta.apply(base).vector()
        return base.replace(**dict(theta)).vector()

    def args(self, P: np.ndarray):
        """Argument tuple of the compiled kernels; owns its scratch buffer."""
        if self.kind == "ann":
            rows, cols, w_off, b_off, wflat, bflat, acts, th_idx = self.weights.packed()
            size = 2 * int(cols[0]) + 2 * int(b_off[-1]) + int(rows[-1])
        else:
            rows = cols = acts = th_idx = np.zeros(1, dtype=np.int64)
            w_off = b_off = np.zeros(2, dtype=np.int64)
            wflat = bflat = np.zeros(1)
            size = 1
        return (np.ascontiguousarray(P, dtype=float), np.int64(self.code),
                float(self.smoothing_width), float(self.eps),
                rows, cols, w_off, b_off, wflat, bflat, acts, th_idx, np.zeros(size))

    def initial_state(self, P: np.ndarray) -> np.ndarray:
        v = P[P_VTOT]
        c = _initial_circ(v)
        if self.kind == "direct":
            return c
        e0, _ = lv_elastance(P, 0.0)
        extra = [e0 * (c[I_VLV] - P[P_V0LV])]
        if self.kind == "ann":
            extra += [c[I_VLV]] + [0.0] * (self.n_latent - 1)
        return np.concatenate([c, extra])

    def initial_state_vjp(self, P: np.ndarray, a: np.ndarray) -> np.ndarray:
        """``a^T d s0 / dP`` (only ``V_heart_tot`` and the LV constants enter)."""
        g = np.zeros_like(P)
        fr = [cc.INIT_FRACTIONS[n] for n in ("V_LA", "V_LV", "V_RA", "V_RV")]
        g[P_VTOT] += float(np.dot(fr, a[:4]))
        if self.kind != "direct":
            e0, phi0 = lv_elastance(P, 0.0)
            vlv = fr[1] * P[P_VTOT]
            b = a[N_CIRC]
            g[P_VTOT] += b * e0 * fr[1]
            g[P_V0LV] -= b * e0
            bar_e = b * (vlv - P[P_V0LV])
            g[P_ELV_P] += bar_e
            g[P_ELV_A] += bar_e * P[P_AXB] / cc.A_XB_REF * phi0
            g[P_AXB] += bar_e * P[P_ELV_A] * phi0 / cc.A_XB_REF
            if self.kind == "ann":
                g[P_VTOT] += a[N_CIRC + 1] * fr[1]
        return g

    # -- point evaluations ----------------------------------------------------
    def rhs(self, t: float, s, P=None) -> np.ndarray:
        P = self.parameter_array() if P is None else np.asarray(P, dtype=float)
        out = np.empty(self.n_state)
        model_rhs(float(t), np.asarray(s, dtype=float), self.args(P), out)
        return out

    def vjp(self, t: float, s, v, P=None) -> tuple[np.ndarray, np.ndarray]:
        P = self.parameter_array() if P is None else np.asarray(P, dtype=float)
        gs = np.zeros(self.n_state)
        gP = np.zeros(P.size)
        model_vjp(float(t), np.asarray(s, dtype=float), self.args(P),
                  np.asarray(v, dtype=float), gs, gP)
        return gs, gP

    # -- trajectories ---------------------------------------------------------
    def march(self, P: np.ndarray, n_beats: int, cfg: SolverConfig, dt_sample: float):
        """Integrate node to node; returns ``(nodes, states, steps, n_steps)``."""
        period = float(P[cc.P_THB])
        nodes = sample_grid(n_beats * period, dt_sample)
        y0 = self.initial_state(P)
        out_y = np.empty((nodes.size, y0.size))
        out_h = np.empty(nodes.size)
        k, status, total = march_nodes(None, self.args(P), nodes, y0, cfg.dt_init,
                                       cfg.rtol, cfg.atol, cfg.dt_min, cfg.dt_max,
                                       cfg.max_steps, out_y, out_h)
        if status != 0:
            raise SolverError(int(status), float(nodes[k]))
        if not np.all(np.isfinite(out_y)):
            raise SolverError(1, float(nodes[-1]), "non-finite state")
        return nodes, out_y, out_h, int(total)

    def trace_from_states(self, nodes, states, P) -> TimeTrace:
        derived = np.empty((nodes.size, 8))
        derived_series(nodes, states, P, self.code, float(self.smoothing_width), derived)
        ch = {n: states[:, i].copy() for i, n in enumerate(self.state_names[:N_CIRC])}
        for i, n in enumerate(CHAMBER_PRESSURES + VALVE_FLOWS):
            ch[n] = derived[:, i].copy()
        ch["V_tot"] = np.array([_total_volume(s, P) for s in states])
        dt = float(nodes[1] - nodes[0]) if nodes.size > 1 else 0.0
        return TimeTrace(float(nodes[0]), dt, ch)

    def simulate(self, theta=None, params: ParameterSet | None = None, n_beats: int = 5,
                 cfg: SolverConfig = SolverConfig(), dt_sample: float = 0.01) -> Simulation:
        P = self.parameter_array(theta, params)
        nodes, states, steps, total = self.march(P, n_beats, cfg, dt_sample)
        return Simulation(float(P[cc.P_THB]), nodes, states, steps, P, total,
                          self.trace_from_states(nodes, states, P))

    def observe(self, nodes, states, P, names) -> np.ndarray:
        """Channel matrix ``Y[k, c]`` at the given nodes."""
        codes = self.channel_codes(names)
        out = np.empty((len(nodes), codes.size))
        channel_values(codes, np.asarray(nodes, dtype=float), np.asarray(states), P, out)
        return out


def _initial_circ(v_tot: float) -> np.ndarray:
    f = cc.INIT_FRACTIONS
    ip = cc.INIT_PRESSURES
    return np.array([f["V_LA"] * v_tot, f["V_LV"] * v_tot, f["V_RA"] * v_tot, f["V_RV"] * v_tot,
                     ip["p_AR_SYS"], ip["p_VEN_SYS"], ip["p_AR_PUL"], ip["p_VEN_PUL"],
                     0.0, 0.0, 0.0, 0.0])


def _total_volume(s, P) -> float:
    return float(s[0] + s[1] + s[2] + s[3] + P[cc.P_CAS] * s[4] + P[cc.P_CVS] * s[5]
                 + P[cc.P_CAP] * s[6] + P[cc.P_CVP] * s[7])
