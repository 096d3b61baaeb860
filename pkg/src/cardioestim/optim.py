"""Bounded L-BFGS and the multistart MAP driver.

Box constraints are removed by the componentwise bijection
``x = a + (b - a) * sigmoid(u)``; L-BFGS (two-loop recursion plus a
strong-Wolfe line search) runs in ``u``.  Every iterate is therefore strictly
feasible, and an optimum on a bound is approached by saturating the logistic.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .params import ParameterVector, sample_uniform_init
from .qoi import relative_l2_error

log = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


class LineSearchError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# box transform
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxTransform:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("invalid bounds")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def free(self) -> np.ndarray:
        # components without a finite interval pass through unchanged
        return ~(np.isfinite(self.lower) & np.isfinite(self.upper))

    def to_x(self, u: np.ndarray) -> np.ndarray:
        x = np.array(u, dtype=float)
        box = ~self.free
        x[box] = self.lower[box] + (self.upper[box] - self.lower[box]) * _sigmoid(x[box])
        return x

    def to_u(self, x: np.ndarray, margin: float = 1e-12) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        width = np.where(self.free, 1.0, self.upper - self.lower)
        r = np.clip((x - np.where(self.free, 0.0, self.lower)) / np.where(width > 0, width, 1.0),
                    margin, 1.0 - margin)
        return np.where(self.free, x, np.log(r) - np.log1p(-r))

    def jacobian_diag(self, u: np.ndarray) -> np.ndarray:
        out = np.ones(len(self.lower))
        box = ~self.free
        s = _sigmoid(np.asarray(u, dtype=float)[box])
        out[box] = (self.upper[box] - self.lower[box]) * s * (1.0 - s)
        return out


def _sigmoid(u):
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# line search (Nocedal & Wright, algorithms 3.5 / 3.6)
# ---------------------------------------------------------------------------

def _cubic_min(a, fa, ga, b, fb, gb):
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (gb + d2 - d1) / denom


def strong_wolfe(phi: Callable[[float], tuple[float, float]], f0: float, g0: float,
                 alpha0: float = 1.0, c1: float = 1e-4, c2: float = 0.9,
                 alpha_max: float = 1e6, max_evals: int = 30):
    """Step length satisfying the strong Wolfe conditions.

    ``phi(alpha)`` returns ``(f, dphi/dalpha)``; the result is
    ``(alpha, f(alpha), dphi(alpha), n_evals)``.
    """
    if g0 >= 0:
        raise LineSearchError("not a descent direction")
    evals = 0
    a_prev, f_prev, g_prev = 0.0, f0, g0
    a = alpha0
    while evals < max_evals:
        f, g = phi(a)
        evals += 1
        if not math.isfinite(f) or f > f0 + c1 * a * g0 or (evals > 1 and f >= f_prev):
            return _zoom(phi, f0, g0, a_prev, f_prev, g_prev, a, f, g, c1, c2, evals, max_evals)
        if abs(g) <= -c2 * g0:
            return a, f, g, evals
        if g >= 0:
            return _zoom(phi, f0, g0, a, f, g, a_prev, f_prev, g_prev, c1, c2, evals, max_evals)
        a_prev, f_prev, g_prev = a, f, g
        a = min(2.0 * a, alpha_max)
    raise LineSearchError("line search exceeded its evaluation budget")


def _zoom(phi, f0, g0, lo, f_lo, g_lo, hi, f_hi, g_hi, c1, c2, evals, max_evals):
    while evals < max_evals:
        a = None
        if math.isfinite(f_hi) and math.isfinite(g_hi):
            a = _cubic_min(lo, f_lo, g_lo, hi, f_hi, g_hi)
        span = hi - lo
        if a is None or not (min(lo, hi) + 0.1 * abs(span) <= a <= max(lo, hi) - 0.1 * abs(span)):
            a = lo + 0.5 * span
        f, g = phi(a)
        evals += 1
        if not math.isfinite(f) or f > f0 + c1 * a * g0 or f >= f_lo:
            hi, f_hi, g_hi = a, f, g
        else:
            if abs(g) <= -c2 * g0:
                return a, f, g, evals
            if g * (hi - lo) >= 0:
                hi, f_hi, g_hi = lo, f_lo, g_lo
            lo, f_lo, g_lo = a, f, g
        if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
            break
    if f_lo < f0:
        # Wolfe curvature not met, but the step still decreases J
        return lo, f_lo, g_lo, evals
    raise LineSearchError("zoom failed to find a decreasing step")


# ---------------------------------------------------------------------------
# L-BFGS
# ---------------------------------------------------------------------------

@dataclass
class MapRun:
    theta_init: ParameterVector
    theta_final: ParameterVector
    J_final: float
    iterations: int
    converged: bool
    wall_time: float = 0.0
    n_evals: int = 0
    message: str = ""
    history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "theta_init": self.theta_init.as_dict(),
            "theta_final": self.theta_final.as_dict(),
            "J_final": self.J_final,
            "iterations": self.iterations,
            "converged": self.converged,
            "n_evals": self.n_evals,
            "message": self.message,
        }


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((rho, a))
        q -= a * y
    if S:
        q *= float(S[-1] @ Y[-1]) / float(Y[-1] @ Y[-1])
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(objective: Objective, theta0: ParameterVector | np.ndarray, bounds=None,
                   max_iter: int = 100, memory: int = 10, tol_grad: float = 1e-8,
                   tol_J: float = 1e-10, callback: Callable | None = None,
                   start_margin: float = 1e-3, max_restarts: int = 5) -> MapRun:
    """Minimize ``objective(x) -> (J, dJ/dx)`` inside a box.

    Starting values closer than ``start_margin`` (relative to the interval
    width) to a bound are moved inward by that amount.

    ``tol_grad`` applies to the infinity norm of the gradient in the
    transformed space, ``tol_J`` to the relative decrease of ``J`` over one
    iteration.  A line-search failure ends the run with ``converged=False``.
    """
    t_start = time.perf_counter()
    if isinstance(theta0, ParameterVector):
        pv0 = theta0
        lo, hi = pv0.lower, pv0.upper
    else:
        x0 = np.asarray(theta0, dtype=float)
        if bounds is None:
            lo, hi = np.full(x0.size, -np.inf), np.full(x0.size, np.inf)
        else:
            lo, hi = (np.asarray(b, dtype=float) for b in bounds)
        pv0 = None
    if bounds is not None and pv0 is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    tr = BoxTransform(lo, hi)
    x_init = np.array(pv0.values if pv0 is not None else theta0, dtype=float)
    if np.any(x_init < lo) or np.any(x_init > hi):
        raise ValueError("initial point outside bounds")
    fixed = (~tr.free) & (hi == lo)

    def fu(u):
        x = tr.to_x(u)
        x[fixed] = lo[fixed]
        J, gx = objective(x)
        gx = np.asarray(gx, dtype=float)
        gu = gx * tr.jacobian_diag(u)
        gu[fixed] = 0.0
        return float(J), gu, x, gx

    def stuck_on_bound(u, gx):
        # saturated logistic components whose x-gradient points back inside
        box = ~tr.free & ~fixed
        s = np.full(u.size, 0.5)
        s[box] = _sigmoid(u[box])
        return box & (((s < 1e-6) & (gx < 0)) | ((s > 1.0 - 1e-6) & (gx > 0)))

    # the logistic map is flat on the bounds; start a hair inside
    u = tr.to_u(x_init, margin=start_margin)
    f, g, x, gx = fu(u)
    n_evals = 1
    history = [f]
    S: list[np.ndarray] = []
    Y: list[np.ndarray] = []
    converged, message, it, restarts = False, "max_iter reached", 0, 0
    rel = math.inf
    if not math.isfinite(f):
        raise FloatingPointError("objective not finite at the initial point")
    while it < max_iter:
        done = None
        if np.max(np.abs(g), initial=0.0) < tol_grad:
            done = "gradient tolerance"
        elif rel < tol_J:
            done = "relative J decrease below tolerance"
        if done is not None:
            stuck = stuck_on_bound(u, gx)
            if not stuck.any() or restarts >= max_restarts:
                converged, message = True, done
                break
            # pull saturated components back in and forget the curvature pairs
            restarts += 1
            u = u.copy()
            u[stuck] = tr.to_u(x, margin=start_margin)[stuck]
            f, g, x, gx = fu(u)
            n_evals += 1
            S.clear()
            Y.clear()
        d = _two_loop(g, S, Y)
        gd = float(g @ d)
        if gd >= 0:            # stale curvature pairs: restart with steepest descent
            S.clear()
            Y.clear()
            d = -g
            gd = float(g @ d)
        alpha0 = 1.0 if S else min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300))
        cache: dict[float, tuple] = {}

        def phi(a):
            out = fu(u + a * d)
            cache[a] = out
            return out[0], float(out[1] @ d)

        try:
            a, f_new, _, ev = strong_wolfe(phi, f, gd, alpha0)
        except LineSearchError as exc:
            n_evals += len(cache)
            converged, message = False, f"line search failed: {exc}"
            break
        n_evals += len(cache)
        _, g_new, x_new, gx = cache[a]
        s = a * d
        yv = g_new - g
        if float(s @ yv) > 1e-12 * float(yv @ yv):
            S.append(s)
            Y.append(yv)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        u = u + s
        rel = (f - f_new) / max(abs(f), abs(f_new), 1e-300)
        f, g, x = f_new, g_new, x_new
        it += 1
        history.append(f)
        if callback is not None:
            callback(it, x, f)
    if pv0 is None:
        pv0 = _PlainVector(x_init, lo, hi)
    final = pv0.with_values(np.clip(x, lo, hi))
    return MapRun(pv0, final, f, it, converged, time.perf_counter() - t_start,
                  n_evals, message, history)


@dataclass(frozen=True)
class _PlainVector:
    # stand-in for ParameterVector when optimizing unnamed arrays
    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    names: tuple = ()

    def as_dict(self) -> dict:
        return {str(i): float(v) for i, v in enumerate(self.values)}

    def with_values(self, v):
        return _PlainVector(np.asarray(v, dtype=float), self.lower, self.upper)


# ---------------------------------------------------------------------------
# multistart
# ---------------------------------------------------------------------------

@dataclass
class MapResult:
    runs: list[MapRun]
    failures: list[str]
    theta_mean: ParameterVector
    e_l2: float | None
    best: int
    worst: int

    def to_dict(self) -> dict:
        return {
            "runs": [r.to_dict() for r in self.runs],
            "failures": self.failures,
            "theta_mean": self.theta_mean.as_dict(),
            "E_L2": self.e_l2,
            "best_run": self.best,
            "worst_run": self.worst,
            "J_best": self.runs[self.best].J_final,
            "J_worst": self.runs[self.worst].J_final,
            "iterations": [r.iterations for r in self.runs],
        }


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("CARDIO_ESTIM_THREADS")
        threads = int(env) if env else 1
    return max(1, int(threads))


def run_seeds(seed: int | np.random.SeedSequence, n: int) -> list[np.random.SeedSequence]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(n)


def multistart_map(objective: Objective, reference: ParameterVector, n_runs: int = 10,
                   seed: int = 0, truth: ParameterVector | None = None,
                   lo_frac: float = 0.5, hi_frac: float = 1.5, threads: int | None = None,
                   inits: Sequence[ParameterVector] | None = None, **lbfgs_kw) -> MapResult:
    """Independent L-BFGS runs from random draws in ``[lo_frac, hi_frac] * reference``.

    Run ``i`` uses its own spawned seed, so results do not depend on the
    thread count or on scheduling order.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    if inits is None:
        inits = [sample_uniform_init(reference, lo_frac, hi_frac, np.random.default_rng(s))
                 for s in run_seeds(seed, n_runs)]
    elif len(inits) != n_runs:
        raise ValueError("need one initial point per run")

    def one(i):
        try:
            run = lbfgs_minimize(objective, inits[i], **lbfgs_kw)
            log.info("MAP run %d: J=%.3e after %d iterations (%s)", i, run.J_final,
                     run.iterations, run.message)
            return run
        except Exception as exc:  # a failed run is recorded, not fatal
            log.warning("MAP run %d failed: %s", i, exc)
            return f"run {i}: {type(exc).__name__}: {exc}"

    n_threads = resolve_threads(threads)
    if n_threads == 1:
        results = [one(i) for i in range(n_runs)]
    else:
        with ThreadPoolExecutor(n_threads) as pool:
            results = list(pool.map(one, range(n_runs)))
    runs = [r for r in results if isinstance(r, MapRun)]
    failures = [r for r in results if isinstance(r, str)]
    if not runs:
        raise RuntimeError("all MAP runs failed: " + "; ".join(failures))
    mean = reference.with_values(np.mean([r.theta_final.values for r in runs], axis=0))
    e_l2 = relative_l2_error(mean, truth) if truth is not None else None
    Js = [r.J_final for r in runs]
    return MapResult(runs, failures, mean, e_l2, int(np.argmin(Js)), int(np.argmax(Js)))
