"""Adjoint gradients of trace-sampled objectives, plus a finite-difference oracle.

The objective is any ``J = F(Y)`` of the channel samples ``Y[k, c]`` on the
last heartbeat.  The forward pass stops on every sample node and stores the
state there (the checkpoints).  The backward pass re-integrates each segment
from its checkpoint, recording steps for dense output, then integrates

    da/dtau = (dg/ds)^T a,   dq/dtau = (dg/dtheta)^T a,   tau = t_{k+1} - t

over the segment with the same Dormand-Prince core.  At each node the
adjoint jumps by ``dJ/ds(t_k)``.  The gradient is ``q + dJ/dtheta|_direct +
a(0)^T ds0/dtheta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit

from .circulation import P_THB
from .model import Model, channel_vjp, model_vjp
from .ode import SolverConfig, SolverError, dense_eval, dopri, register_rhs
from .params import ParameterVector
from .qoi import CostWeights, QoISet, cost_and_gradient, extract_qois


# ---------------------------------------------------------------------------
# compiled backward sweep
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _locate(rec_t, n_rec, t):
    lo = 0
    hi = n_rec - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if rec_t[mid] <= t:
            lo = mid
        else:
            hi = mid - 1
    return lo


@njit(cache=True, nogil=True)
def adjoint_rhs(tau, ya, aargs, out):
    margs, t_end, rec_t, rec_h, rec_y, rec_k, n_rec, th_idx, ys, gs, gP = aargs
    n = ys.size
    t = t_end - tau
    j = _locate(rec_t, n_rec, t)
    theta = (t - rec_t[j]) / rec_h[j]
    theta = min(1.0, max(0.0, theta))
    dense_eval(rec_y[j], rec_k[j], rec_h[j], theta, ys)
    gs[:] = 0.0
    gP[:] = 0.0
    model_vjp(t, ys, margs, ya[:n], gs, gP)
    for i in range(n):
        out[i] = gs[i]
    for i in range(th_idx.size):
        out[n + i] = gP[th_idx[i]]


register_rhs(11, adjoint_rhs)


@njit(cache=True, nogil=True)
def backward_sweep(margs, nodes, ck_y, ck_h, jumps, th_idx, rtol, atol, dt_min,
                   dt_max, max_steps, rec_cap, h_adj0):
    """Returns ``(a0, q, status, failed_node, n_back_steps)``."""
    n = ck_y.shape[1]
    m = th_idx.size
    nn = nodes.size
    ya = np.zeros(n + m)
    for i in range(n):
        ya[i] = jumps[nn - 1, i]
    rec_t = np.empty(rec_cap)
    rec_h = np.empty(rec_cap)
    rec_y = np.empty((rec_cap, n))
    rec_k = np.empty((rec_cap, 7, n))
    y = np.empty(n)
    ys = np.empty(n)
    gs = np.empty(n)
    gP = np.empty(margs[0].size)
    e1 = np.empty(0)
    e2 = np.empty((0, n))
    e3 = np.empty((0, n + m))
    ek = np.empty((0, 7, n + m))
    h_adj = h_adj0
    total = 0
    for k in range(nn - 2, -1, -1):
        y[:] = ck_y[k]
        t, _, na, nr, n_rec, status = dopri(None, margs, nodes[k], nodes[k + 1], y,
                                            ck_h[k], rtol, atol, dt_min, dt_max, max_steps,
                                            e1, e2, rec_t, rec_h, rec_y, rec_k)
        if status != 0:
            return ya[:n].copy(), ya[n:].copy(), status, k, total
        aargs = (margs, nodes[k + 1], rec_t, rec_h, rec_y, rec_k, n_rec, th_idx, ys, gs, gP)
        dt = nodes[k + 1] - nodes[k]
        t, h_adj, na, nr, _, status = dopri(None, aargs, 0.0, dt, ya, h_adj,
                                            rtol, atol, dt_min, dt_max, max_steps,
                                            e1, e3, e1, e1, e3, ek)
        total += na + nr
        if status != 0:
            return ya[:n].copy(), ya[n:].copy(), status, k, total
        for i in range(n + m):
            if ya[i] != ya[i]:
                return ya[:n].copy(), ya[n:].copy(), 4, k, total
        for i in range(n):
            ya[i] += jumps[k, i]
    return ya[:n].copy(), ya[n:].copy(), 0, -1, total


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceObjective:
    """``J = fn(Y)`` on the last beat; ``fn`` returns ``(J, dJ/dY)``."""

    channels: tuple[str, ...]
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]]
    n_beats: int = 5
    dt_sample: float = 0.01


def cost_objective(obs, w: CostWeights, n_beats: int = 5) -> TraceObjective:
    """Objective for the cost functional against observations.

    ``obs`` is a :class:`QoISet`, a :class:`~cardioestim.ode.TimeTrace` or
    anything with a ``trace`` attribute holding one.
    """
    if not isinstance(obs, QoISet):
        obs = extract_qois(getattr(obs, "trace", obs))
    channels = tuple(w.active_channels())
    return TraceObjective(channels, lambda Y: cost_and_gradient(Y, channels, obs, w),
                          n_beats=n_beats, dt_sample=obs.dt)


@dataclass
class GradientResult:
    grad: np.ndarray
    J: float
    names: tuple[str, ...] = ()
    forward_steps: int = 0
    backward_steps: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.grad)):
            raise FloatingPointError("non-finite gradient")


class AdjointError(RuntimeError):
    pass


def _last_beat(sim_nodes: np.ndarray, period: float, dt: float) -> int:
    per_beat = int(round(period / dt))
    return sim_nodes.size - per_beat - 1


def evaluate_objective(model: Model, theta: ParameterVector, objective: TraceObjective,
                       cfg: SolverConfig = SolverConfig()) -> float:
    P = model.parameter_array(theta)
    nodes, states, _, _ = model.march(P, objective.n_beats, cfg, objective.dt_sample)
    i0 = _last_beat(nodes, P[P_THB], objective.dt_sample)
    Y = model.observe(nodes[i0:], states[i0:], P, objective.channels)
    return float(objective.fn(Y)[0])


def _resolve_objective(obs, w, n_beats) -> TraceObjective:
    if isinstance(obs, TraceObjective):
        return obs
    if w is None:
        raise ValueError("cost weights required with observations")
    return cost_objective(obs, w, n_beats=n_beats)


def adjoint_gradient(model: Model, theta: ParameterVector, obs, w: CostWeights | None = None,
                     cfg: SolverConfig = SolverConfig(), rec_cap: int = 8192,
                     n_beats: int = 5) -> GradientResult:
    """Value and adjoint gradient of the objective w.r.t. ``theta``.

    ``obs`` is either a :class:`TraceObjective` or observations combined
    with the weights ``w`` into the cost functional.
    """
    objective = _resolve_objective(obs, w, n_beats)
    P = model.parameter_array(theta)
    nodes, states, steps, n_fwd = model.march(P, objective.n_beats, cfg, objective.dt_sample)
    i0 = _last_beat(nodes, P[P_THB], objective.dt_sample)
    tail = np.ascontiguousarray(states[i0:])
    Y = model.observe(nodes[i0:], tail, P, objective.channels)
    J, dY = objective.fn(Y)
    jumps = np.zeros_like(states)
    g_direct = np.zeros_like(P)
    jt = np.zeros_like(tail)
    channel_vjp(model.channel_codes(objective.channels), nodes[i0:], tail, P,
                np.ascontiguousarray(dY, dtype=float), jt, g_direct)
    jumps[i0:] = jt
    th_idx = theta.indices
    a0, q, status, k_fail, n_back = backward_sweep(
        model.args(P), nodes, states, steps, jumps, th_idx, cfg.rtol, cfg.atol,
        cfg.dt_min, cfg.dt_max, cfg.max_steps, rec_cap, cfg.dt_init)
    if status == 4:
        raise AdjointError(f"non-finite adjoint near t={nodes[k_fail]:.4g}")
    if status != 0:
        raise SolverError(int(status), float(nodes[k_fail]), "adjoint sweep")
    g_ic = model.initial_state_vjp(P, a0)
    grad = q + g_direct[th_idx] + g_ic[th_idx]
    if not np.all(np.isfinite(grad)):
        raise AdjointError("non-finite gradient")
    return GradientResult(grad, float(J), theta.names, n_fwd, int(n_back))


def finite_difference_gradient(model: Model, theta: ParameterVector, obs,
                               w: CostWeights | None = None, cfg: SolverConfig = SolverConfig(),
                               rel_step: float = 1e-5, n_beats: int = 5,
                               fn: Callable[[np.ndarray], float] | None = None) -> GradientResult:
    """Central differences, ``2P`` objective evaluations.

    Near a bound the step is shrunk so that ``theta +- h`` stays inside.
    ``fn`` replaces the model-based objective by an arbitrary function of
    the parameter values (useful for testing the oracle itself).
    """
    if not rel_step > 0:
        raise ValueError("rel_step must be positive")
    if fn is None:
        objective = _resolve_objective(obs, w, n_beats)
        fn = lambda x: evaluate_objective(model, theta.with_values(x), objective, cfg)  # noqa: E731
    x0 = np.array(theta.values, dtype=float)
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        h = rel_step * max(abs(x0[i]), 1e-8)
        room = min(x0[i] - theta.lower[i], theta.upper[i] - x0[i])
        if room <= 0:
            raise ValueError(f"{theta.names[i]} sits on a bound; central difference undefined")
        h = min(h, 0.5 * room)
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (fn(xp) - fn(xm)) / (xp[i] - xm[i])
    return GradientResult(grad, float(fn(x0)), theta.names, extra={"evaluations": 2 * x0.size + 1})


def vjp_state(model: Model, t: float, s, theta: ParameterVector | None, v) -> np.ndarray:
    """``v^T dg/ds`` of the model right-hand side."""
    return model.vjp(t, s, v, model.parameter_array(theta))[0]


def vjp_params(model: Model, t: float, s, theta: ParameterVector, v) -> np.ndarray:
    """``v^T dg/dtheta`` restricted to the entries of ``theta``."""
    return model.vjp(t, s, v, model.parameter_array(theta))[1][theta.indices]
