"""Variance-based global sensitivity: Saltelli design, first-order and total Sobol indices.

The design uses two independent blocks ``A`` and ``B`` of a scrambled Sobol
sequence (dimension ``2k``) and the ``k`` cross matrices ``A_B^(i)`` (``A``
with column ``i`` taken from ``B``).  First-order indices use the Saltelli
(2002) product estimator, total effects the Jansen estimator.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from .model import Model
from .ode import SolverConfig, run_to_limit_cycle
from .optim import resolve_threads
from .params import ParameterVector

log = logging.getLogger(__name__)

MAX_FAILED_FRACTION = 0.05


class SensitivityError(RuntimeError):
    pass


@dataclass
class SaltelliDesign:
    names: tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray
    A: np.ndarray
    B: np.ndarray
    AB: np.ndarray          # (k, N, k)

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def k(self) -> int:
        return self.A.shape[1]

    @property
    def n_evaluations(self) -> int:
        return self.N * (self.k + 2)

    def rows(self) -> np.ndarray:
        """All evaluation points stacked as ``[A; B; A_B^(1); ...; A_B^(k)]``."""
        return np.vstack([self.A, self.B, *self.AB])

    def unit_rows(self) -> np.ndarray:
        width = np.where(self.upper > self.lower, self.upper - self.lower, 1.0)
        return (self.rows() - self.lower) / width


def saltelli_sample(bounds, N: int, seed: int = 0, names: Sequence[str] | None = None) -> SaltelliDesign:
    """Saltelli design on a box.

    ``bounds`` is a :class:`ParameterVector` or a pair ``(lower, upper)``.
    ``N`` must be a power of two so the Sobol blocks stay balanced.
    """
    if isinstance(bounds, ParameterVector):
        names = bounds.names if names is None else names
        lo, hi = np.array(bounds.lower), np.array(bounds.upper)
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    if N < 2 or N & (N - 1):
        raise ValueError("N must be a power of two >= 2")
    if np.any(hi < lo):
        raise ValueError("invalid bounds")
    k = lo.size
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(k))
    sob = qmc.Sobol(d=2 * k, scramble=True, seed=np.random.default_rng(seed))
    u = sob.random_base2(int(np.log2(N)))
    A = lo + (hi - lo) * u[:, :k]
    B = lo + (hi - lo) * u[:, k:]
    AB = np.repeat(A[None, :, :], k, axis=0)
    for i in range(k):
        AB[i, :, i] = B[:, i]
    return SaltelliDesign(names, lo, hi, A, B, AB)


@dataclass
class SobolResult:
    names: tuple[str, ...]
    qoi_names: tuple[str, ...]
    S1: np.ndarray              # (k, Q)
    ST: np.ndarray
    S1_conf: np.ndarray         # bootstrap 95% half-widths
    ST_conf: np.ndarray
    n_failed: int = 0
    imputed_rows: list[int] = field(default_factory=list)

    def ranking(self, qoi: str, total: bool = True) -> list[str]:
        j = self.qoi_names.index(qoi)
        col = (self.ST if total else self.S1)[:, j]
        return [self.names[i] for i in np.argsort(-col, kind="stable")]

    def to_csv(self, which: str = "ST") -> str:
        mat = {"S1": self.S1, "ST": self.ST, "S1_conf": self.S1_conf, "ST_conf": self.ST_conf}[which]
        lines = [",".join(["parameter", *self.qoi_names])]
        for name, row in zip(self.names, mat):
            lines.append(",".join([name] + [format(float(v), ".17g") for v in row]))
        return "\n".join(lines) + "\n"


def _estimate(fA, fB, fAB):
    # fA, fB: (n, Q); fAB: (k, n, Q)
    f0 = 0.5 * (fA.mean(axis=0) + fB.mean(axis=0))
    fA, fB, fAB = fA - f0, fB - f0, fAB - f0        # centring limits cancellation
    V = np.concatenate([fA, fB]).var(axis=0)
    V = np.where(V > 0, V, np.nan)
    U = np.mean(fB[None] * fAB, axis=1) - fA.mean(axis=0) * fB.mean(axis=0)
    S1 = U / V
    ST = 0.5 * np.mean((fA[None] - fAB) ** 2, axis=1) / V
    return np.nan_to_num(S1), np.nan_to_num(ST)


def _impute(design: SaltelliDesign, Y: np.ndarray) -> tuple[np.ndarray, list[int]]:
    bad = ~np.all(np.isfinite(Y), axis=1)
    idx = np.flatnonzero(bad)
    if idx.size == 0:
        return Y, []
    if idx.size > MAX_FAILED_FRACTION * Y.shape[0]:
        raise SensitivityError(f"{idx.size} of {Y.shape[0]} evaluations failed (> 5%)")
    U = design.unit_rows()
    good = np.flatnonzero(~bad)
    Y = Y.copy()
    for i in idx:
        d = np.sum((U[good] - U[i]) ** 2, axis=1)
        Y[i] = Y[good[int(np.argmin(d))]]
    return Y, idx.tolist()


def sobol_indices(design: SaltelliDesign, Y, qoi_names: Sequence[str] | None = None,
                  n_boot: int = 200, seed: int = 0) -> SobolResult:
    """First-order and total indices from evaluations ordered as :meth:`SaltelliDesign.rows`.

    Non-finite rows are replaced by the value at the nearest successful
    design point; more than 5% failures abort.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    N, k = design.N, design.k
    if Y.shape[0] != N * (k + 2):
        raise ValueError(f"expected {N * (k + 2)} evaluations, got {Y.shape[0]}")
    Y, imputed = _impute(design, Y)
    Q = Y.shape[1]
    qoi_names = tuple(qoi_names) if qoi_names is not None else tuple(f"y{j}" for j in range(Q))
    fA, fB = Y[:N], Y[N:2 * N]
    fAB = Y[2 * N:].reshape(k, N, Q)
    S1, ST = _estimate(fA, fB, fAB)
    rng = np.random.default_rng(seed)
    b1 = np.empty((n_boot, k, Q))
    bT = np.empty((n_boot, k, Q))
    for b in range(n_boot):
        r = rng.integers(0, N, size=N)
        b1[b], bT[b] = _estimate(fA[r], fB[r], fAB[:, r])
    z = 1.959963984540054
    return SobolResult(tuple(design.names), qoi_names, S1, ST, z * b1.std(axis=0, ddof=1),
                       z * bT.std(axis=0, ddof=1), len(imputed), imputed)


# ---------------------------------------------------------------------------
# cardiovascular QoIs
# ---------------------------------------------------------------------------

LV_QOIS = ("max:p_LV", "min:p_LV", "max:V_LV", "min:V_LV", "sv:V_LV")


def qoi_value(trace, spec: str) -> float:
    """``"max:ch"``, ``"min:ch"``, ``"sv:ch"`` (max - min) or ``"mean:ch"`` on a trace."""
    op, _, ch = spec.partition(":")
    x = trace[ch]
    if op == "max":
        return float(np.max(x))
    if op == "min":
        return float(np.min(x))
    if op == "sv":
        return float(np.max(x) - np.min(x))
    if op == "mean":
        return float(np.mean(x))
    raise ValueError(f"unknown QoI operator in {spec!r}")


def evaluate_design(fn: Callable[[np.ndarray], np.ndarray], rows: np.ndarray,
                    threads: int | None = None) -> np.ndarray:
    """Map ``fn`` over design rows; exceptions become NaN rows."""
    def safe(row):
        try:
            return np.asarray(fn(row), dtype=float)
        except Exception as exc:  # solver abort etc.; imputed later
            log.debug("design row failed: %s", exc)
            return None

    n_threads = resolve_threads(threads)
    if n_threads == 1:
        out = [safe(r) for r in rows]
    else:
        with ThreadPoolExecutor(n_threads) as pool:
            out = list(pool.map(safe, rows))
    width = next((o.size for o in out if o is not None), 1)
    return np.array([o if o is not None else np.full(width, np.nan) for o in out])


def run_sensitivity(model: Model, parameters: ParameterVector, qois: Sequence[str] = LV_QOIS,
                    N: int = 1024, seed: int = 0, threads: int | None = None,
                    cfg: SolverConfig = SolverConfig(), n_beats: int = 5, n_boot: int = 200) -> SobolResult:
    """Sobol indices of limit-cycle QoIs over the box of ``parameters``."""
    design = saltelli_sample(parameters, N, seed)

    def fn(row):
        trace = run_to_limit_cycle(model, parameters.with_values(row), n_beats=n_beats, cfg=cfg).trace
        return [qoi_value(trace, q) for q in qois]

    Y = evaluate_design(fn, design.rows(), threads)
    return sobol_indices(design, Y, qois, n_boot=n_boot, seed=seed)
