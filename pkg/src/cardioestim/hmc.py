"""Posterior sampling with the No-U-Turn Sampler.

The likelihood of each observed channel is Gaussian with covariance
``sigma_meas^2 I + Sigma_ROM``, where ``Sigma_ROM`` is an exponentiated
quadratic Gram matrix on the sample grid modelling surrogate error.  The
prior is uniform on a box around the MAP estimate.  Sampling happens in the
logistic-unconstrained coordinates of that box; the log-Jacobian of the map
is added to the target so that draws are distributed correctly in the
original coordinates.

The sampler is multinomial NUTS with the generalized U-turn criterion
(including the checks across merged subtrees), a diagonal mass matrix
adapted in Stan-style windows and optional dual averaging of the step size.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import linalg

from .adjoint import TraceObjective, adjoint_gradient
from .model import Model
from .ode import SolverConfig
from .optim import BoxTransform, _sigmoid
from .params import ParameterVector
from .qoi import QoISet

log = logging.getLogger(__name__)

ROM_SIGMA = {"V_LA": 0.79, "V_LV": 0.80, "V_RA": 0.07, "V_RV": 0.12, "p_AR_SYS": 0.54}
ROM_LAMBDA = 0.04
MAX_DELTA_H = 1000.0


class CovarianceError(np.linalg.LinAlgError):
    pass


class SamplerError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# likelihood covariance
# ---------------------------------------------------------------------------

def rom_error_covariance(grid, sigma: float, lam: float) -> np.ndarray:
    """Gram matrix ``sigma^2 exp(-(t_j - t_k)^2 / (2 lam^2))``."""
    if not lam > 0:
        raise ValueError("correlation length must be positive")
    t = np.asarray(grid, dtype=float)
    d = t[:, None] - t[None, :]
    return sigma * sigma * np.exp(-0.5 * (d / lam) ** 2)


@dataclass
class CovarianceModel:
    """Per-channel ``Sigma_i = sigma_meas_i^2 I + Sigma_ROM,i`` with a stored Cholesky factor.

    A jitter of ``jitter * sigma_rom_i^2`` is added to the diagonal before
    factorization; the exponentiated quadratic kernel is numerically
    rank deficient on a fine grid.
    """

    grid: np.ndarray
    sigma_meas: Mapping[str, float]
    sigma_rom: Mapping[str, float] = field(default_factory=lambda: dict(ROM_SIGMA))
    lam: float = ROM_LAMBDA
    jitter: float = 1e-10

    def __post_init__(self) -> None:
        self.grid = np.asarray(self.grid, dtype=float)
        self.sigma_meas = {k: float(v) for k, v in self.sigma_meas.items()}
        self.sigma_rom = {k: float(self.sigma_rom.get(k, 0.0)) for k in self.sigma_meas}
        self._cov: dict[str, np.ndarray] = {}
        self._chol: dict[str, tuple] = {}
        for ch, s_meas in self.sigma_meas.items():
            if s_meas < 0 or self.sigma_rom[ch] < 0:
                raise ValueError(f"{ch}: negative standard deviation")
            s_rom = self.sigma_rom[ch]
            cov = rom_error_covariance(self.grid, s_rom, self.lam)
            cov[np.diag_indices_from(cov)] += s_meas ** 2 + self.jitter * s_rom ** 2
            try:
                self._chol[ch] = linalg.cho_factor(cov, lower=True, check_finite=True)
            except linalg.LinAlgError as exc:
                raise CovarianceError(f"{ch}: covariance not positive definite") from exc
            self._cov[ch] = cov

    @property
    def channels(self) -> tuple[str, ...]:
        return tuple(self.sigma_meas)

    def covariance(self, ch: str) -> np.ndarray:
        return self._cov[ch]

    def solve(self, ch: str, r) -> np.ndarray:
        return linalg.cho_solve(self._chol[ch], np.asarray(r, dtype=float))

    def quad(self, ch: str, r) -> float:
        """``r^T Sigma^-1 r`` via the triangular factor."""
        c, lower = self._chol[ch]
        y = linalg.solve_triangular(c, np.asarray(r, dtype=float), lower=lower)
        return float(y @ y)

    def logdet(self, ch: str) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._chol[ch][0]))))

    def log_normalizer(self) -> float:
        n = self.grid.size
        return -0.5 * sum(n * math.log(2.0 * math.pi) + self.logdet(ch) for ch in self.channels)


def measurement_sigmas(channels: Sequence[str], snr: float, reference: float = 100.0) -> dict[str, float]:
    """``sigma_meas = SNR * reference`` (mmHg or mL) for every channel."""
    return {ch: snr * reference for ch in channels}


def likelihood_objective(obs: QoISet, cov: CovarianceModel, n_beats: int = 5) -> TraceObjective:
    """``U(Y) = 1/2 sum_i r_i^T Sigma_i^-1 r_i`` on the residual traces (normalizer excluded)."""
    channels = cov.channels
    targets = [obs[ch].trace for ch in channels]
    for tr in targets:
        if tr.size != cov.grid.size:
            raise ValueError("observation grid does not match the covariance grid")

    def fn(Y):
        U = 0.0
        dY = np.zeros_like(Y)
        for c, ch in enumerate(channels):
            r = Y[:, c] - targets[c]
            z = cov.solve(ch, r)
            U += 0.5 * float(r @ z)
            dY[:, c] = z
        return U, dY

    return TraceObjective(channels, fn, n_beats=n_beats, dt_sample=obs.dt)


def prior_box(theta_map: ParameterVector, iota: float = 0.1) -> ParameterVector:
    """Uniform prior support ``theta_MAP (1 +- iota)`` intersected with the global bounds."""
    v = theta_map.values
    lo = np.maximum(v - iota * np.abs(v), theta_map.lower)
    hi = np.minimum(v + iota * np.abs(v), theta_map.upper)
    return ParameterVector(theta_map.names, v, lo, hi)


@dataclass
class Posterior:
    """Log posterior in model coordinates, ``x -> (log p, d log p / dx)``."""

    model: Model
    prior: ParameterVector
    objective: TraceObjective
    cov: CovarianceModel
    cfg: SolverConfig = SolverConfig()
    n_evals: int = 0

    def __post_init__(self) -> None:
        width = self.prior.upper - self.prior.lower
        if np.any(width <= 0):
            raise ValueError("degenerate prior box")
        self._const = self.cov.log_normalizer() - float(np.sum(np.log(width)))

    def __call__(self, x) -> tuple[float, np.ndarray]:
        x = np.asarray(x, dtype=float)
        if np.any(x < self.prior.lower) or np.any(x > self.prior.upper):
            return -math.inf, np.zeros_like(x)
        self.n_evals += 1
        r = adjoint_gradient(self.model, self.prior.with_values(x), self.objective, cfg=self.cfg)
        return self._const - r.J, -r.grad


def log_posterior(theta: ParameterVector, obs: QoISet, cov: CovarianceModel, model: Model,
                  prior: ParameterVector | None = None,
                  cfg: SolverConfig = SolverConfig()) -> tuple[float, np.ndarray]:
    """Log density (and its gradient) of ``theta``; ``-inf`` outside the prior box."""
    prior = theta if prior is None else prior
    post = Posterior(model, prior, likelihood_objective(obs, cov), cov, cfg)
    return post(theta.values)


# ---------------------------------------------------------------------------
# Hamiltonian dynamics
# ---------------------------------------------------------------------------

def leapfrog(theta, rho, step: float, grad_U: Callable, mass=None, grad=None):
    """One kick-drift-kick step of ``H = rho^T M^-1 rho / 2 + U(theta)``.

    ``mass`` is the diagonal of ``M`` (identity when omitted).  Returns
    ``(theta', rho')``; pass ``grad = grad_U(theta)`` to skip one evaluation.
    """
    theta = np.asarray(theta, dtype=float)
    rho = np.asarray(rho, dtype=float)
    inv_m = 1.0 if mass is None else 1.0 / np.asarray(mass, dtype=float)
    g = grad_U(theta) if grad is None else grad
    rho_half = rho - 0.5 * step * g
    theta_new = theta + step * inv_m * rho_half
    g_new = grad_U(theta_new)
    if not np.all(np.isfinite(g_new)):
        raise FloatingPointError("non-finite gradient in leapfrog (divergent transition)")
    return theta_new, rho_half - 0.5 * step * g_new


@dataclass
class _Point:
    q: np.ndarray       # unconstrained position
    logp: float         # target log density at q (including the log-Jacobian)
    grad: np.ndarray    # gradient of logp


@dataclass
class _Tree:
    minus: _Point
    plus: _Point
    p_minus: np.ndarray
    p_plus: np.ndarray
    sample: _Point
    log_w: float
    rho: np.ndarray             # sum of momenta over the tree
    valid: bool
    divergent: bool
    n_leapfrog: int
    accept_sum: float


def _criterion(p_sharp_minus, p_sharp_plus, rho) -> bool:
    return float(p_sharp_plus @ rho) > 0.0 and float(p_sharp_minus @ rho) > 0.0


class _Nuts:
    def __init__(self, target: Callable, inv_metric: np.ndarray, rng: np.random.Generator,
                 max_depth: int):
        self.target = target
        self.inv_metric = inv_metric
        self.rng = rng
        self.max_depth = max_depth

    def kinetic(self, p) -> float:
        return 0.5 * float(p @ (self.inv_metric * p))

    def step(self, z: _Point, p: np.ndarray, eps: float) -> tuple[_Point, np.ndarray]:
        p_half = p + 0.5 * eps * z.grad
        q = z.q + eps * self.inv_metric * p_half
        logp, grad = self.target(q)
        if not math.isfinite(logp) or not np.all(np.isfinite(grad)):
            return _Point(q, -math.inf, np.zeros_like(q)), p_half
        return _Point(q, logp, grad), p_half + 0.5 * eps * grad

    def _merge_checks(self, lo: _Tree, hi: _Tree, rho) -> bool:
        # lo precedes hi in time
        sm_lo, sp_lo = self.inv_metric * lo.p_minus, self.inv_metric * lo.p_plus
        sm_hi, sp_hi = self.inv_metric * hi.p_minus, self.inv_metric * hi.p_plus
        ok = _criterion(sm_lo, sp_hi, rho)
        ok = ok and _criterion(sm_lo, sm_hi, lo.rho + hi.p_minus)
        ok = ok and _criterion(sp_lo, sp_hi, hi.rho + lo.p_plus)
        return ok

    def build(self, z: _Point, p: np.ndarray, depth: int, direction: int, eps: float, H0: float) -> _Tree:
        if depth == 0:
            z1, p1 = self.step(z, p, direction * eps)
            H = -z1.logp + self.kinetic(p1)
            if not math.isfinite(H):
                H = math.inf
            divergent = H - H0 > MAX_DELTA_H
            acc = math.exp(min(0.0, H0 - H)) if math.isfinite(H) else 0.0
            return _Tree(z1, z1, p1, p1, z1, H0 - H, p1.copy(), not divergent, divergent, 1, acc)
        first = self.build(z, p, depth - 1, direction, eps, H0)
        if not first.valid:
            return first
        edge, p_edge = (first.plus, first.p_plus) if direction > 0 else (first.minus, first.p_minus)
        second = self.build(edge, p_edge, depth - 1, direction, eps, H0)
        n = first.n_leapfrog + second.n_leapfrog
        acc = first.accept_sum + second.accept_sum
        if not second.valid:
            second.n_leapfrog, second.accept_sum = n, acc
            return second
        log_w = float(np.logaddexp(first.log_w, second.log_w))
        sample = second.sample if math.log(self.rng.uniform()) < second.log_w - log_w else first.sample
        lo, hi = (first, second) if direction > 0 else (second, first)
        rho = first.rho + second.rho
        valid = self._merge_checks(lo, hi, rho)
        return _Tree(lo.minus, hi.plus, lo.p_minus, hi.p_plus, sample, log_w, rho,
                     valid, False, n, acc)

    def transition(self, z0: _Point, eps: float):
        p0 = self.rng.normal(size=z0.q.size) / np.sqrt(self.inv_metric)
        H0 = -z0.logp + self.kinetic(p0)
        tree = _Tree(z0, z0, p0, p0, z0, 0.0, p0.copy(), True, False, 0, 0.0)
        sample = z0
        depth = 0
        n_leap, acc_sum, divergent = 0, 0.0, False
        while depth < self.max_depth:
            direction = 1 if self.rng.uniform() > 0.5 else -1
            if direction > 0:
                sub = self.build(tree.plus, tree.p_plus, depth, 1, eps, H0)
            else:
                sub = self.build(tree.minus, tree.p_minus, depth, -1, eps, H0)
            n_leap += sub.n_leapfrog
            acc_sum += sub.accept_sum
            if not sub.valid:
                divergent = sub.divergent
                break
            depth += 1
            # biased progressive sampling favours the new subtree
            if sub.log_w > tree.log_w or math.log(self.rng.uniform()) < sub.log_w - tree.log_w:
                sample = sub.sample
            lo, hi = (tree, sub) if direction > 0 else (sub, tree)
            rho = tree.rho + sub.rho
            ok = self._merge_checks(lo, hi, rho)
            tree = _Tree(lo.minus, hi.plus, lo.p_minus, hi.p_plus, sample,
                         float(np.logaddexp(tree.log_w, sub.log_w)), rho, ok, False, 0, 0.0)
            if not ok:
                break
        accept = acc_sum / max(n_leap, 1)
        return sample, accept, depth, n_leap, divergent


class _DualAveraging:
    def __init__(self, eps0: float, delta: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.delta, self.gamma, self.t0, self.kappa = delta, gamma, t0, kappa
        self.restart(eps0)

    def restart(self, eps0: float) -> None:
        self.mu = math.log(10.0 * eps0)
        self.h_bar, self.x_bar, self.count = 0.0, 0.0, 0

    def update(self, accept: float) -> float:
        self.count += 1
        m = self.count
        eta = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.delta - accept)
        x = self.mu - math.sqrt(m) / self.gamma * self.h_bar
        w = m ** (-self.kappa)
        self.x_bar = w * x + (1.0 - w) * self.x_bar
        return math.exp(x)

    @property
    def final(self) -> float:
        return math.exp(self.x_bar)


def _adaptation_windows(warmup: int, init_buffer=75, term_buffer=50,
                        base_window=25) -> tuple[int, list[int]]:
    """Start of the slow phase and the iterations at which its windows end."""
    if warmup < 20:
        return warmup, []
    if init_buffer + base_window + term_buffer > warmup:
        init_buffer, term_buffer = int(0.15 * warmup), int(0.1 * warmup)
        base_window = warmup - init_buffer - term_buffer
    ends = []
    start, size = init_buffer, base_window
    last = warmup - term_buffer
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        ends.append(end)
        start, size = end, 2 * size
    return init_buffer, ends


@dataclass
class PosteriorSamples:
    names: tuple[str, ...]
    draws: np.ndarray               # (n_retained, P), model coordinates
    logp: np.ndarray
    accept_stat: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    divergent: np.ndarray
    warmup: int
    step_size: float
    inv_metric: np.ndarray
    rhat: np.ndarray = field(default_factory=lambda: np.zeros(0))
    warmup_draws: np.ndarray | None = None

    @property
    def n_divergent(self) -> int:
        return int(np.count_nonzero(self.divergent))

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accept_stat)) if self.accept_stat.size else float("nan")

    def to_csv(self) -> str:
        lines = [",".join(["iter", "logp", *self.names])]
        for k, (lp, row) in enumerate(zip(self.logp, self.draws)):
            lines.append(",".join([str(self.warmup + k), format(float(lp), ".17g")]
                                  + [format(float(v), ".17g") for v in row]))
        return "\n".join(lines) + "\n"


def _find_initial_step(nuts: _Nuts, z: _Point, eps: float) -> float:
    # heuristic of Hoffman & Gelman: double/halve until the one-step acceptance crosses 0.8
    direction = 0
    for _ in range(50):
        p = nuts.rng.normal(size=z.q.size) / np.sqrt(nuts.inv_metric)
        H0 = -z.logp + nuts.kinetic(p)
        z1, p1 = nuts.step(z, p, eps)
        H1 = -z1.logp + nuts.kinetic(p1)
        delta = H0 - H1 if math.isfinite(H1) else -math.inf
        d = 1 if delta > math.log(0.8) else -1
        if direction == 0:
            direction = d
        elif d != direction:
            break
        eps = eps * 2.0 if direction > 0 else eps / 2.0
        if eps > 1e7 or eps < 1e-12:
            break
    return eps


def nuts_sample(log_post: Callable, theta_start: ParameterVector | np.ndarray, iters: int = 750,
                warmup: int = 250, iota: float | None = 0.1, seed: int = 0,
                step_size: float = 1e-3, adapt_step_size: bool = False,
                target_accept: float = 0.8, adapt_mass: bool = True, max_depth: int = 10,
                bounds=None, init_inv_metric=None, callback: Callable | None = None) -> PosteriorSamples:
    """Draw ``iters - warmup`` NUTS samples from ``log_post``.

    Parameters
    ----------
    log_post : callable
        ``x -> (log p(x), grad)`` in model coordinates.
    theta_start : ParameterVector or array
        MAP estimate.  The prior box is ``theta_start (1 +- iota)`` intersected
        with its bounds; the chain starts from a uniform draw in that box.
        With ``iota=None`` the box is ``bounds`` (or the vector's bounds) and
        the chain starts at ``theta_start``.
    step_size : float
        Leapfrog step in the unconstrained coordinates; kept fixed unless
        ``adapt_step_size`` enables dual averaging towards ``target_accept``.
    """
    if not 0 <= warmup < iters:
        raise ValueError("need 0 <= warmup < iters")
    if not step_size > 0:
        raise ValueError("step_size must be positive")
    rng = np.random.default_rng(seed)
    if isinstance(theta_start, ParameterVector):
        names = theta_start.names
        x_map = np.array(theta_start.values)
        lo, hi = theta_start.lower, theta_start.upper
    else:
        x_map = np.asarray(theta_start, dtype=float).ravel()
        names = tuple(f"theta{i}" for i in range(x_map.size))
        lo, hi = np.full(x_map.size, -np.inf), np.full(x_map.size, np.inf)
    if bounds is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    if iota is not None:
        lo = np.maximum(x_map - iota * np.abs(x_map), lo)
        hi = np.minimum(x_map + iota * np.abs(x_map), hi)
    tr = BoxTransform(lo, hi)
    box = ~tr.free
    if iota is not None:
        x0 = rng.uniform(lo, hi)
    else:
        x0 = x_map
    if np.any(x0 < lo) or np.any(x0 > hi):
        raise ValueError("start point outside the prior box")

    log_width = np.log(hi[box] - lo[box]) if box.any() else np.zeros(0)

    def log_jac(q):
        # log(w s (1 - s)) without underflow when the logistic saturates
        u = q[box]
        return float(np.sum(log_width - np.logaddexp(0.0, u) - np.logaddexp(0.0, -u)))

    def target(q):
        x = tr.to_x(q)
        lp, g = log_post(x)
        if not math.isfinite(lp):
            return -math.inf, np.zeros_like(q)
        s = _sigmoid(q[box])
        jac = tr.jacobian_diag(q)
        lp += log_jac(q)
        gq = np.asarray(g, dtype=float) * jac
        gq[box] += 1.0 - 2.0 * s
        return lp, gq

    q = tr.to_u(x0, margin=1e-9)
    lp, g = target(q)
    if not math.isfinite(lp):
        raise SamplerError("log posterior not finite at the start point")
    z = _Point(q, lp, g)
    P = q.size
    inv_metric = np.ones(P) if init_inv_metric is None else np.asarray(init_inv_metric, dtype=float)
    nuts = _Nuts(target, inv_metric, rng, max_depth)
    eps = step_size
    da = None
    if adapt_step_size and warmup > 0:
        eps = _find_initial_step(nuts, z, eps)
        da = _DualAveraging(eps, target_accept)
    window_start, ends = _adaptation_windows(warmup)
    windows = set(ends) if adapt_mass else set()
    buf: list[np.ndarray] = []

    n_keep = iters - warmup
    out_q = np.empty((n_keep, P))
    out_lp = np.empty(n_keep)
    out_acc = np.empty(n_keep)
    out_depth = np.empty(n_keep, dtype=np.int64)
    out_leap = np.empty(n_keep, dtype=np.int64)
    out_div = np.zeros(n_keep, dtype=bool)
    warm_q = np.empty((warmup, P))
    n_div_warm = 0
    for it in range(iters):
        z, accept, depth, n_leap, div = nuts.transition(z, eps)
        if it < warmup:
            warm_q[it] = tr.to_x(z.q)
            n_div_warm += div
            if it == 19 and n_div_warm == 20:
                raise SamplerError("all initial transitions diverged")
            if da is not None:
                eps = da.update(accept)
            if adapt_mass and it >= window_start:
                buf.append(z.q.copy())
            if it + 1 in windows:
                arr = np.array(buf)
                n = arr.shape[0]
                var = arr.var(axis=0, ddof=1) if n > 1 else np.ones(P)
                nuts.inv_metric = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                buf.clear()
                if da is not None:
                    eps = _find_initial_step(nuts, z, eps)
                    da.restart(eps)
            if it + 1 == warmup and da is not None:
                eps = da.final
        else:
            k = it - warmup
            out_q[k] = tr.to_x(z.q)
            out_lp[k] = z.logp - log_jac(z.q)     # density in model coordinates
            out_acc[k] = accept
            out_depth[k] = depth
            out_leap[k] = n_leap
            out_div[k] = div
        if callback is not None:
            callback(it, tr.to_x(z.q), z.logp, accept, depth, eps)
        if (it + 1) % 100 == 0:
            log.info("NUTS %d/%d: step %.3g, depth %d, accept %.2f", it + 1, iters, eps, depth, accept)
    samples = PosteriorSamples(names, out_q, out_lp, out_acc, out_depth, out_leap, out_div,
                               warmup, float(eps), nuts.inv_metric.copy(), warmup_draws=warm_q)
    if n_keep >= 4:
        samples.rhat = gelman_rubin(samples)
    return samples


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def effective_sample_size(draws: PosteriorSamples | np.ndarray) -> np.ndarray:
    """Single-chain ESS from Geyer's initial monotone sequence of autocorrelations."""
    x = draws.draws if isinstance(draws, PosteriorSamples) else np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 4:
        raise ValueError("ESS needs at least 4 draws")
    out = np.empty(x.shape[1])
    for j in range(x.shape[1]):
        xc = x[:, j] - x[:, j].mean()
        var = float(xc @ xc) / n
        if var == 0:
            out[j] = float(n)
            continue
        f = np.fft.rfft(xc, 2 * n)
        acf = np.fft.irfft(f * np.conj(f))[:n] / (n * var)
        # pair sums Gamma_k = rho_2k + rho_2k+1, truncated at the first negative, made monotone
        total, prev = 0.0, math.inf
        for k in range(0, n - 1, 2):
            g = acf[k] + acf[k + 1]
            if g < 0:
                break
            prev = min(prev, g)
            total += prev
        out[j] = n / max(2.0 * total - 1.0, 1.0 / math.log10(max(n, 10)))
    return out


def mc_standard_error(draws: PosteriorSamples | np.ndarray) -> np.ndarray:
    """Monte Carlo standard error of the posterior mean, ``sd / sqrt(ESS)``."""
    x = draws.draws if isinstance(draws, PosteriorSamples) else np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x.std(axis=0, ddof=1) / np.sqrt(effective_sample_size(x))


def gelman_rubin(draws: PosteriorSamples | np.ndarray) -> np.ndarray:
    """Split-R-hat of a single chain (first vs second half, middle draw dropped if odd)."""
    x = draws.draws if isinstance(draws, PosteriorSamples) else np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n_total = x.shape[0]
    if n_total < 4:
        raise ValueError("split-R-hat needs at least 4 draws")
    n = n_total // 2
    halves = np.stack([x[:n], x[n_total - n:]])
    means = halves.mean(axis=1)
    W = halves.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * W + B / n
    out = np.empty(x.shape[1])
    for j in range(x.shape[1]):
        if W[j] > 0:
            out[j] = math.sqrt(var_plus[j] / W[j])
        else:
            out[j] = 1.0 if B[j] == 0 else math.inf
    return out


@dataclass
class PosteriorSummary:
    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    lower: np.ndarray       # 5th percentile
    upper: np.ndarray       # 95th percentile
    corr: np.ndarray

    def contains(self, truth) -> np.ndarray:
        v = truth.values if isinstance(truth, ParameterVector) else np.asarray(truth, dtype=float)
        return (self.lower <= v) & (v <= self.upper)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "mean_minus_2std": (self.mean - 2 * self.std).tolist(),
            "mean_plus_2std": (self.mean + 2 * self.std).tolist(),
            "q05": self.lower.tolist(),
            "q95": self.upper.tolist(),
            "corr": self.corr.tolist(),
        }


def posterior_summary(draws: PosteriorSamples | np.ndarray, names: Sequence[str] | None = None) -> PosteriorSummary:
    """Moments, equal-tailed 90% intervals and the Pearson correlation matrix."""
    if isinstance(draws, PosteriorSamples):
        names = draws.names
        x = draws.draws
    else:
        x = np.asarray(draws, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
    if x.shape[0] == 0:
        raise ValueError("no draws")
    names = tuple(names) if names is not None else tuple(f"theta{i}" for i in range(x.shape[1]))
    mean = x.mean(axis=0)
    std = x.std(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(x.shape[1])
    # constant columns have no defined correlation; report 0 off the diagonal
    xc = x - mean
    norms = np.sqrt(np.sum(xc * xc, axis=0))
    safe = np.where(norms > 0, norms, 1.0)
    corr = (xc.T @ xc) / np.outer(safe, safe)
    corr[:, norms == 0] = 0.0
    corr[norms == 0, :] = 0.0
    np.fill_diagonal(corr, 1.0)
    corr = np.clip(corr, -1.0, 1.0)
    lo, hi = np.percentile(x, [5.0, 95.0], axis=0)
    return PosteriorSummary(names, mean, std, lo, hi, corr)
