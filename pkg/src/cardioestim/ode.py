"""Adaptive Dormand-Prince 5(4) integration and the limit-cycle protocol.

The stepping core :func:`dopri` is compiled with numba and takes the
right-hand side as a compiled function ``f(t, y, args, out)``.  Plain Python
callables go through the very same source, executed uncompiled, so both
paths share one implementation.

Passing a dispatcher as an argument defeats numba's on-disk cache (the
argument type is not stable across processes).  Library kernels therefore
register their right-hand side with :func:`register_rhs` and call the core
with ``f=None``; the RHS is then picked at compile time from the length of
the ``args`` tuple.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numba import njit, types
from numba.core.registry import CPUDispatcher
from numba.extending import overload

# Butcher tableau of the Dormand-Prince pair.
_C2, _C3, _C4, _C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
_A21 = 1 / 5
_A31, _A32 = 3 / 40, 9 / 40
_A41, _A42, _A43 = 44 / 45, -56 / 15, 32 / 9
_A51, _A52, _A53, _A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
_A61, _A62, _A63, _A64, _A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
_B1, _B3, _B4, _B5, _B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
_E1, _E3, _E4, _E5, _E6, _E7 = (-71 / 57600, 71 / 16695, -71 / 1920,
                                17253 / 339200, -22 / 525, 1 / 40)

# Shampine's fourth-order continuous extension; row j multiplies stage j.
DENSE_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

_SAFETY = 0.9
_FAC_MIN, _FAC_MAX = 0.2, 5.0
_BETA = 0.04                # PI controller, Hairer's DOPRI5 defaults
_EXPO = 0.2 - 0.75 * _BETA

OK, STEP_UNDERFLOW, MAX_STEPS, RECORD_FULL = 0, 1, 2, 3
_STATUS_TEXT = {
    STEP_UNDERFLOW: "step size fell below dt_min (non-finite or too stiff state)",
    MAX_STEPS: "max_steps exceeded",
    RECORD_FULL: "step record buffer exhausted",
}


class SolverError(RuntimeError):
    """Integration aborted (step underflow, step budget, invalid state)."""

    def __init__(self, status: int, t: float, detail: str = ""):
        msg = f"{_STATUS_TEXT.get(status, 'solver failure')} at t={t:.6g}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.status = status
        self.t = t


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-6
    atol: float = 1e-8
    dt_init: float = 1e-4
    dt_min: float = 1e-12
    dt_max: float = 5e-3
    max_steps: int = 2_000_000

    def __post_init__(self) -> None:
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if not self.dt_min <= self.dt_init <= self.dt_max:
            raise ValueError("need dt_min <= dt_init <= dt_max")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")

    def tightened(self, factor: float) -> "SolverConfig":
        return SolverConfig(self.rtol * factor, self.atol * factor, self.dt_init,
                            self.dt_min, self.dt_max, self.max_steps)


_REGISTRY: dict[int, Callable] = {}


def register_rhs(arity: int, fn) -> None:
    """Make ``fn(t, y, args, out)`` the RHS used when ``f is None`` and ``len(args) == arity``."""
    if _REGISTRY.get(arity, fn) is not fn:
        raise ValueError(f"an RHS with args arity {arity} is already registered")
    _REGISTRY[arity] = fn


def call_rhs(f, t, y, args, out):
    if f is None:
        _REGISTRY[len(args)](t, y, args, out)
    else:
        f(t, y, args, out)


@overload(call_rhs, jit_options={"nogil": True})
def _call_rhs_overload(f, t, y, args, out):
    if isinstance(f, types.NoneType):
        fn = _REGISTRY[len(args)]

        def impl(f, t, y, args, out):
            fn(t, y, args, out)
    else:
        def impl(f, t, y, args, out):
            f(t, y, args, out)
    return impl


@njit(cache=True, nogil=True)
def dense_eval(y0, K, h, theta, out):
    """Evaluate the continuous extension of one step at ``t0 + theta*h``."""
    n = y0.size
    th2 = theta * theta
    th3 = th2 * theta
    th4 = th3 * theta
    for i in range(n):
        acc = 0.0
        for j in range(7):
            w = (DENSE_P[j, 0] * theta + DENSE_P[j, 1] * th2
                 + DENSE_P[j, 2] * th3 + DENSE_P[j, 3] * th4)
            acc += K[j, i] * w
        out[i] = y0[i] + h * acc


@njit(cache=True, nogil=True)
def dopri(f, args, t0, t1, y, h, rtol, atol, dt_min, dt_max, max_steps,
          samp_t, samp_y, rec_t, rec_h, rec_y, rec_k):
    """Integrate ``y' = f(t, y)`` from ``t0`` to ``t1`` in place.

    Samples at ``samp_t`` (sorted, inside ``[t0, t1]``) are written to
    ``samp_y`` via the continuous extension.  When ``rec_t`` has nonzero
    length every accepted step (start time, size, start state, stages) is
    recorded for later dense evaluation.

    Returns ``(t, h_next, n_accepted, n_rejected, n_recorded, status)``.
    """
    n = y.size
    K = np.empty((7, n))
    ytmp = np.empty(n)
    ynew = np.empty(n)
    call_rhs(f, t0, y, args, K[0])
    t = t0
    h = min(h, dt_max)
    errold = 1e-4
    n_acc = 0
    n_rej = 0
    n_rec = 0
    status = 0
    rejected = False
    cap = rec_t.size
    isamp = 0
    ns = samp_t.size
    while isamp < ns and samp_t[isamp] <= t0:
        samp_y[isamp, :] = y
        isamp += 1
    while t < t1:
        if n_acc + n_rej >= max_steps:
            status = 2
            break
        if h < dt_min:
            status = 1
            break
        hs = h
        last = False
        if t + hs >= t1 or (t1 - t - hs) <= 1e-13 * max(1.0, abs(t1)):
            hs = t1 - t
            last = True
        for i in range(n):
            ytmp[i] = y[i] + hs * _A21 * K[0, i]
        call_rhs(f, t + _C2 * hs, ytmp, args, K[1])
        for i in range(n):
            ytmp[i] = y[i] + hs * (_A31 * K[0, i] + _A32 * K[1, i])
        call_rhs(f, t + _C3 * hs, ytmp, args, K[2])
        for i in range(n):
            ytmp[i] = y[i] + hs * (_A41 * K[0, i] + _A42 * K[1, i] + _A43 * K[2, i])
        call_rhs(f, t + _C4 * hs, ytmp, args, K[3])
        for i in range(n):
            ytmp[i] = y[i] + hs * (_A51 * K[0, i] + _A52 * K[1, i] + _A53 * K[2, i]
                                   + _A54 * K[3, i])
        call_rhs(f, t + _C5 * hs, ytmp, args, K[4])
        for i in range(n):
            ytmp[i] = y[i] + hs * (_A61 * K[0, i] + _A62 * K[1, i] + _A63 * K[2, i]
                                   + _A64 * K[3, i] + _A65 * K[4, i])
        call_rhs(f, t + hs, ytmp, args, K[5])
        for i in range(n):
            ynew[i] = y[i] + hs * (_B1 * K[0, i] + _B3 * K[2, i] + _B4 * K[3, i]
                                   + _B5 * K[4, i] + _B6 * K[5, i])
        call_rhs(f, t + hs, ynew, args, K[6])
        err = 0.0
        for i in range(n):
            e = hs * (_E1 * K[0, i] + _E3 * K[2, i] + _E4 * K[3, i] + _E5 * K[4, i]
                      + _E6 * K[5, i] + _E7 * K[6, i])
            sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
            err += (e / sc) ** 2
        err = math.sqrt(err / n)
        if err <= 1.0:
            if cap > 0:
                if n_rec >= cap:
                    status = 3
                    break
                rec_t[n_rec] = t
                rec_h[n_rec] = hs
                rec_y[n_rec, :] = y
                rec_k[n_rec, :, :] = K
                n_rec += 1
            tnew = t1 if last else t + hs
            while isamp < ns and samp_t[isamp] <= tnew:
                if samp_t[isamp] == tnew:
                    samp_y[isamp, :] = ynew
                else:
                    dense_eval(y, K, hs, (samp_t[isamp] - t) / hs, samp_y[isamp])
                isamp += 1
            y[:] = ynew
            K[0, :] = K[6]
            t = tnew
            n_acc += 1
            if err == 0.0:
                fac = 1.0 / _FAC_MAX
            else:
                fac = err ** _EXPO / errold ** _BETA / _SAFETY
                fac = min(1.0 / _FAC_MIN, max(1.0 / _FAC_MAX, fac))
            hnew = hs / fac
            if rejected:
                hnew = min(hnew, hs)
                rejected = False
            if last and hs < h:
                hnew = max(hnew, h)
            errold = max(err, 1e-4)
            h = min(hnew, dt_max)
        else:
            n_rej += 1
            rejected = True
            if err != err:
                h = hs * _FAC_MIN
            else:
                h = hs * max(_FAC_MIN, _SAFETY * err ** (-0.2))
    return t, h, n_acc, n_rej, n_rec, status


@njit(cache=True, nogil=True)
def march_nodes(f, args, nodes, y0, h0, rtol, atol, dt_min, dt_max, max_steps,
                out_y, out_h):
    """Integrate node to node, stopping exactly on every node.

    ``out_y[k]`` is the state at ``nodes[k]`` and ``out_h[k]`` the step size
    the controller proposed on arrival, so any segment can be re-integrated
    bit-identically from its checkpoint.
    """
    y = y0.copy()
    out_y[0, :] = y
    h = h0
    out_h[0] = h
    empty_t = np.empty(0)
    empty_y = np.empty((0, y.size))
    empty_k = np.empty((0, 7, y.size))
    total = 0
    for k in range(nodes.size - 1):
        t, h, na, nr, _, status = dopri(f, args, nodes[k], nodes[k + 1], y, h, rtol, atol,
                                        dt_min, dt_max, max_steps - total,
                                        empty_t, empty_y, empty_t, empty_t, empty_y, empty_k)
        total += na + nr
        if status != 0:
            return k, status, total
        out_y[k + 1, :] = y
        out_h[k + 1] = h
    return nodes.size - 1, 0, total


def _python_call(rhs):
    def f(t, y, args, out):
        out[:] = rhs(t, y)
    return f


def _is_compiled(fn) -> bool:
    return isinstance(fn, CPUDispatcher)


@dataclass
class TimeTrace:
    """Uniformly sampled signals: ``channels[name][k]`` is the value at ``t0 + k*dt_sample``."""

    t0: float
    dt_sample: float
    channels: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        lengths = {len(v) for v in self.channels.values()}
        if len(lengths) > 1:
            raise ValueError("all channels must share the same grid")

    @property
    def n(self) -> int:
        return len(next(iter(self.channels.values()))) if self.channels else 0

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt_sample * np.arange(self.n)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.channels[name]

    def __contains__(self, name: object) -> bool:
        return name in self.channels

    def select(self, names: Sequence[str]) -> "TimeTrace":
        return TimeTrace(self.t0, self.dt_sample, {n: self.channels[n] for n in names})

    def slice(self, start: int, stop: int | None = None) -> "TimeTrace":
        return TimeTrace(self.t0 + start * self.dt_sample, self.dt_sample,
                         {k: v[start:stop].copy() for k, v in self.channels.items()})

    def to_csv(self, path: str | Path | None = None) -> str:
        names = list(self.channels)
        lines = [",".join(["t"] + names)]
        t = self.t
        for k in range(self.n):
            row = [format(float(t[k]), ".17g")]
            row += [format(float(self.channels[c][k]), ".17g") for c in names]
            lines.append(",".join(row))
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source: str | Path) -> "TimeTrace":
        """Parse a CSV written by :meth:`to_csv`; ``source`` is a path or the CSV text itself."""
        if isinstance(source, Path) or "\n" not in str(source):
            text = Path(source).read_text()
        else:
            text = str(source)
        rows = [r for r in text.strip().splitlines() if r]
        header = rows[0].split(",")
        data = np.array([[float(x) for x in r.split(",")] for r in rows[1:]])
        t = data[:, 0]
        dt = float(t[1] - t[0]) if len(t) > 1 else 0.0
        return cls(float(t[0]), dt, {name: data[:, i + 1].copy() for i, name in enumerate(header[1:])})


@dataclass
class IntegrationResult:
    t: np.ndarray
    y: np.ndarray           # samples, shape (len(t), n)
    y_final: np.ndarray
    n_accepted: int
    n_rejected: int


def integrate(rhs: Callable, s0, t_span: Sequence[float], cfg: SolverConfig = SolverConfig(),
              sample_times=None, args=()) -> IntegrationResult:
    """Integrate ``rhs`` over ``t_span`` with dense sampling at ``sample_times``.

    ``rhs`` is either a numba-compiled ``f(t, y, args, out)`` or a Python
    function ``rhs(t, y) -> dy``.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ValueError("t_span must be increasing")
    y = np.array(s0, dtype=float).ravel()
    if not np.all(np.isfinite(y)):
        raise ValueError("initial state must be finite")
    ts = np.asarray([] if sample_times is None else sample_times, dtype=float)
    if ts.size and (np.any(np.diff(ts) < 0) or ts[0] < t0 or ts[-1] > t1):
        raise ValueError("sample_times must be sorted and inside t_span")
    ys = np.zeros((ts.size, y.size))
    empty_t = np.empty(0)
    empty_y = np.empty((0, y.size))
    empty_k = np.empty((0, 7, y.size))
    if _is_compiled(rhs):
        core, f = dopri, rhs
    else:
        core, f = dopri.py_func, _python_call(rhs)
        args = None
    t, _, na, nr, _, status = core(f, args, t0, t1, y, cfg.dt_init, cfg.rtol, cfg.atol,
                                   cfg.dt_min, cfg.dt_max, cfg.max_steps,
                                   ts, ys, empty_t, empty_t, empty_y, empty_k)
    if status != OK:
        raise SolverError(status, t)
    return IntegrationResult(ts, ys, y, int(na), int(nr))


def sample_grid(t_end: float, dt_sample: float) -> np.ndarray:
    """Nodes ``k*dt_sample`` for ``k = 0..round(t_end/dt_sample)``."""
    n = int(round(t_end / dt_sample))
    if abs(n * dt_sample - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError("t_end must be a multiple of dt_sample")
    return np.arange(n + 1) * dt_sample


@dataclass
class LimitCycleResult:
    trace: TimeTrace                # last beat
    previous: TimeTrace             # beat n-1 (empty channels when n_beats == 1)
    periodicity: dict[str, float]
    final_state: np.ndarray
    n_steps: int

    def max_periodicity(self) -> float:
        return max(self.periodicity.values()) if self.periodicity else 0.0


def periodicity_residual(last: TimeTrace, previous: TimeTrace) -> dict[str, float]:
    """Max-norm gap between consecutive beats, scaled by the channel's peak magnitude."""
    out = {}
    for name, x in last.channels.items():
        if name not in previous.channels:
            continue
        scale = max(float(np.max(np.abs(x))), 1e-12)
        out[name] = float(np.max(np.abs(x - previous.channels[name]))) / scale
    return out


def run_to_limit_cycle(model, theta=None, params=None, n_beats: int = 5,
                       cfg: SolverConfig = SolverConfig(), dt_sample: float = 0.01) -> LimitCycleResult:
    """Run ``n_beats`` heartbeats and return the last one sampled every ``dt_sample``.

    ``model`` is a bound-able model (see :class:`cardioestim.model.Model`);
    ``theta`` optionally overrides entries of ``params``.  The solver stops
    exactly on every sample node, the same path the cost and adjoint use.
    """
    if n_beats < 1:
        raise ValueError("n_beats must be >= 1")
    sim = model.simulate(theta=theta, params=params, n_beats=n_beats, cfg=cfg, dt_sample=dt_sample)
    per_beat = int(round(sim.period / dt_sample))
    full = sim.trace
    last = full.slice(full.n - per_beat - 1)
    if n_beats > 1:
        prev = full.slice(full.n - 2 * per_beat - 1, full.n - per_beat)
        residual = periodicity_residual(last, prev)
    else:
        prev = TimeTrace(last.t0 - sim.period, dt_sample, {})
        residual = {}
    return LimitCycleResult(last, prev, residual, sim.final_state, sim.n_steps)
