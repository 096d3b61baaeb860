"""Quantities of interest, the multi-term cost functional and the E_L2 metric.

Channels whose name starts with ``p_`` are pressures, ``V_`` volumes.  The
cost is a sum over channels of

* pressures: ``alpha * ||p - p_obs||^2 / mu + beta * (p_max - .)^2 / mu
  + gamma * (p_min - .)^2 / mu``;
* volumes: ``delta`` (trace), ``epsilon`` (max), ``zeta`` (min), ``eta`` (SV).

``mu`` is the mean square of the observed channel, frozen once per target.
Trace norms use the trapezoidal rule.  Extrema are taken on the sample grid
and differentiated at the (first) argmax/argmin sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ode import TimeTrace
from .params import ParameterVector

PRESSURE_TERMS = ("alpha", "beta", "gamma")
VOLUME_TERMS = ("delta", "epsilon", "zeta", "eta")
TERMS = PRESSURE_TERMS + VOLUME_TERMS


class MissingChannelError(KeyError):
    pass


class GridMismatchError(ValueError):
    pass


def is_pressure(name: str) -> bool:
    return name.startswith("p_")


def is_volume(name: str) -> bool:
    return name.startswith("V_")


@dataclass(frozen=True)
class ChannelQoI:
    trace: np.ndarray
    max: float
    min: float
    argmax: int
    argmin: int
    mu: float

    @property
    def sv(self) -> float:
        return self.max - self.min


@dataclass
class QoISet:
    """Per-channel traces, grid extrema, stroke volumes and normalizers."""

    dt: float
    channels: dict[str, ChannelQoI] = field(default_factory=dict)

    def __getitem__(self, name: str) -> ChannelQoI:
        try:
            return self.channels[name]
        except KeyError:
            raise MissingChannelError(name) from None

    def __contains__(self, name: object) -> bool:
        return name in self.channels

    @property
    def n(self) -> int:
        return len(next(iter(self.channels.values())).trace) if self.channels else 0

    def sv(self, name: str) -> float:
        return self[name].sv

    def mu(self, name: str) -> float:
        return self[name].mu


def _channel_qoi(x: np.ndarray) -> ChannelQoI:
    x = np.asarray(x, dtype=float)
    i_max, i_min = int(np.argmax(x)), int(np.argmin(x))
    return ChannelQoI(x.copy(), float(x[i_max]), float(x[i_min]), i_max, i_min,
                      float(np.mean(x * x)))


def extract_qois(trace: TimeTrace, channels: Sequence[str] | None = None) -> QoISet:
    """Extrema, SV and normalizers of the (pressure and volume) channels of ``trace``."""
    names = [c for c in trace.channels if is_pressure(c) or is_volume(c)] if channels is None else list(channels)
    out = {}
    for name in names:
        if name not in trace:
            raise MissingChannelError(name)
        out[name] = _channel_qoi(trace[name])
    return QoISet(trace.dt_sample, out)


@dataclass(frozen=True)
class CostWeights:
    """Nonnegative term weights keyed by channel name (missing = 0)."""

    alpha: Mapping[str, float] = field(default_factory=dict)
    beta: Mapping[str, float] = field(default_factory=dict)
    gamma: Mapping[str, float] = field(default_factory=dict)
    delta: Mapping[str, float] = field(default_factory=dict)
    epsilon: Mapping[str, float] = field(default_factory=dict)
    zeta: Mapping[str, float] = field(default_factory=dict)
    eta: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for term in TERMS:
            d = dict(getattr(self, term))
            for ch, v in d.items():
                if not v >= 0:
                    raise ValueError(f"weight {term}[{ch}] must be >= 0")
                if term in PRESSURE_TERMS and not is_pressure(ch):
                    raise ValueError(f"{term} applies to pressure channels, got {ch}")
                if term in VOLUME_TERMS and not is_volume(ch):
                    raise ValueError(f"{term} applies to volume channels, got {ch}")
            object.__setattr__(self, term, {k: float(v) for k, v in d.items()})

    @classmethod
    def traces_only(cls, channels: Sequence[str]) -> "CostWeights":
        """Trace term 1 for every listed channel, all pointwise terms 0."""
        return cls(alpha={c: 1.0 for c in channels if is_pressure(c)},
                   delta={c: 1.0 for c in channels if is_volume(c)})

    def scaled(self, factor: float) -> "CostWeights":
        return CostWeights(**{t: {k: factor * v for k, v in getattr(self, t).items()} for t in TERMS})

    def active_channels(self) -> list[str]:
        seen: dict[str, None] = {}
        for term in TERMS:
            for ch, v in getattr(self, term).items():
                if v > 0:
                    seen[ch] = None
        return list(seen)

    def to_dict(self) -> dict:
        return {t: dict(getattr(self, t)) for t in TERMS}

    @classmethod
    def from_dict(cls, data: Mapping) -> "CostWeights":
        unknown = set(data) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown cost terms {sorted(unknown)}")
        return cls(**{t: dict(data.get(t, {})) for t in TERMS})

    @classmethod
    def from_json(cls, path: str | Path) -> "CostWeights":
        return cls.from_dict(json.loads(Path(path).read_text()))


def trapezoid_weights(n: int, dt: float) -> np.ndarray:
    w = np.full(n, dt)
    if n:
        w[0] = w[-1] = 0.5 * dt
    return w


def cost_and_gradient(Y: np.ndarray, channels: Sequence[str], obs: QoISet,
                      w: CostWeights) -> tuple[float, np.ndarray]:
    """Cost and its derivative w.r.t. the simulated samples ``Y[k, c]``."""
    Y = np.asarray(Y, dtype=float)
    grad = np.zeros_like(Y)
    if Y.ndim != 2 or Y.shape[1] != len(channels):
        raise GridMismatchError("Y must have one column per channel")
    quad = trapezoid_weights(Y.shape[0], obs.dt)
    J = 0.0
    for c, name in enumerate(channels):
        terms = {t: getattr(w, t).get(name, 0.0) for t in TERMS}
        if not any(terms.values()):
            continue
        o = obs[name]
        if o.trace.shape[0] != Y.shape[0]:
            raise GridMismatchError(f"{name}: {Y.shape[0]} simulated vs {o.trace.shape[0]} observed samples")
        mu = o.mu
        if mu <= 0:
            raise ValueError(f"{name}: zero normalizer")
        y = Y[:, c]
        trace_w, max_w, min_w = ((terms["alpha"], terms["beta"], terms["gamma"]) if is_pressure(name)
                                 else (terms["delta"], terms["epsilon"], terms["zeta"]))
        sv_w = terms["eta"]
        if trace_w:
            r = y - o.trace
            J += trace_w * float(np.dot(quad, r * r)) / mu
            grad[:, c] += 2.0 * trace_w * quad * r / mu
        if max_w or min_w or sv_w:
            i_max, i_min = int(np.argmax(y)), int(np.argmin(y))
            d_max = y[i_max] - o.max
            d_min = y[i_min] - o.min
            d_sv = (y[i_max] - y[i_min]) - o.sv
            J += (max_w * d_max ** 2 + min_w * d_min ** 2 + sv_w * d_sv ** 2) / mu
            grad[i_max, c] += 2.0 * (max_w * d_max + sv_w * d_sv) / mu
            grad[i_min, c] += 2.0 * (min_w * d_min - sv_w * d_sv) / mu
    return J, grad


def cost_functional(sim: QoISet, obs: QoISet, w: CostWeights) -> float:
    """Weighted misfit between simulated and observed QoIs (normalized by ``obs``)."""
    names = w.active_channels()
    for name in names:
        if name not in sim:
            raise MissingChannelError(name)
    if not names:
        return 0.0
    if abs(sim.dt - obs.dt) > 1e-12 * max(obs.dt, 1.0):
        raise GridMismatchError("sampling intervals differ")
    Y = np.column_stack([sim[n].trace for n in names])
    return cost_and_gradient(Y, names, obs, w)[0]


def relative_l2_error(est: ParameterVector | Sequence[float], exact: ParameterVector | Sequence[float]) -> float:
    """Root mean square of the per-parameter relative errors."""
    if isinstance(est, ParameterVector) and isinstance(exact, ParameterVector):
        if est.names != exact.names:
            raise ValueError("parameter names differ")
    e = np.asarray(est.values if isinstance(est, ParameterVector) else est, dtype=float)
    x = np.asarray(exact.values if isinstance(exact, ParameterVector) else exact, dtype=float)
    if e.shape != x.shape:
        raise ValueError("length mismatch")
    if np.any(x == 0):
        raise ZeroDivisionError("exact value is zero")
    return float(np.sqrt(np.mean(((e - x) / x) ** 2)))
