"""Model constants: baseline values, units and admissible intervals.

Every constant of the closed-loop model lives in a :class:`ParameterSet`.
The canonical ordering in :data:`PARAMETER_NAMES` is also the layout of the
flat float array consumed by the compiled kernels (see :meth:`ParameterSet.vector`).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

# name, baseline, unit, lower, upper
_ELASTANCE_RANGE = (0.5, 1.5)

_TABLE: list[tuple[str, float, str]] = [
    ("a_XB", 250.0, "MPa"),
    # cardiac chambers
    ("E_LA_pass", 0.15, "mmHg/mL"),
    ("E_LA_act_max", 0.07, "mmHg/mL"),
    ("E_RA_pass", 0.05, "mmHg/mL"),
    ("E_RA_act_max", 0.20, "mmHg/mL"),
    ("E_RV_pass", 0.05, "mmHg/mL"),
    ("E_RV_act", 0.55, "mmHg/mL"),
    ("E_LV_pass", 0.08, "mmHg/mL"),
    ("E_LV_act_max", 2.75, "mmHg/mL"),
    ("V0_LA", 4.0, "mL"),
    ("V0_LV", 5.0, "mL"),
    ("V0_RA", 4.0, "mL"),
    ("V0_RV", 16.0, "mL"),
    # external circulation
    ("R_AR_SYS", 0.64, "mmHg*s/mL"),
    ("R_VEN_SYS", 0.32, "mmHg*s/mL"),
    ("R_AR_PUL", 0.032, "mmHg*s/mL"),
    ("R_VEN_PUL", 0.035, "mmHg*s/mL"),
    ("C_AR_SYS", 1.2, "mL/mmHg"),
    ("C_VEN_SYS", 60.0, "mL/mmHg"),
    ("C_AR_PUL", 10.0, "mL/mmHg"),
    ("C_VEN_PUL", 16.0, "mL/mmHg"),
    ("L_AR_SYS", 5e-3, "mmHg*s^2/mL"),
    ("L_VEN_SYS", 5e-4, "mmHg*s^2/mL"),
    ("L_AR_PUL", 5e-4, "mmHg*s^2/mL"),
    ("L_VEN_PUL", 5e-4, "mmHg*s^2/mL"),
    # valves
    ("R_min", 0.0075, "mmHg*s/mL"),
    ("R_max", 75000.0, "mmHg*s/mL"),
    # blood volume
    ("V_heart_tot", 417.0, "mL"),
    # activation timings
    ("t_contr_LA", 0.64, "s"),
    ("T_contr_LA", 0.12, "s"),
    ("T_rel_LA", 0.64, "s"),
    ("t_contr_RA", 0.69, "s"),
    ("T_contr_RA", 0.08, "s"),
    ("T_rel_RA", 0.56, "s"),
    ("t_contr_RV", 0.04, "s"),
    ("T_contr_RV", 0.20, "s"),
    ("T_rel_RV", 0.32, "s"),
    ("t_contr_LV", 0.0, "s"),
    ("T_contr_LV", 0.26, "s"),
    ("T_rel_LV", 0.38, "s"),
    ("T_HB", 0.8, "s"),
]

PARAMETER_NAMES: tuple[str, ...] = tuple(row[0] for row in _TABLE)
INDEX: dict[str, int] = {name: i for i, name in enumerate(PARAMETER_NAMES)}
CHAMBERS = ("LA", "LV", "RA", "RV")

_PUBLISHED_BOUNDS = {
    "a_XB": (80.0, 320.0),
    "R_AR_SYS": (0.54, 1.2),
    "R_VEN_SYS": (0.18, 0.4),
    "V_heart_tot": (200.0, 600.0),
}
_ELASTANCE_FAMILY = (
    "E_LA_pass", "E_LA_act_max", "E_RA_pass", "E_RA_act_max",
    "E_RV_pass", "E_RV_act", "E_LV_pass", "E_LV_act_max",
)
# LV elastance constants are not published; they stand in for the ANN.
NON_PAPER_DEFAULTS = frozenset(
    {"E_LV_pass", "E_LV_act_max", "V0_LV", "t_contr_LV", "T_contr_LV", "T_rel_LV"}
)
_POSITIVE_PREFIXES = ("R_", "C_", "L_", "E_")


class UnknownParameterError(KeyError):
    """Raised for names that are not registered (or carry no interval)."""


@dataclass(frozen=True)
class Parameter:
    name: str
    value: float
    unit: str
    lower: float | None = None
    upper: float | None = None

    def to_dict(self) -> dict:
        return {"value": self.value, "unit": self.unit,
                "lower": self.lower, "upper": self.upper}


def _default_bounds(name: str, value: float) -> tuple[float | None, float | None]:
    if name in _PUBLISHED_BOUNDS:
        return _PUBLISHED_BOUNDS[name]
    if name in _ELASTANCE_FAMILY:
        return _ELASTANCE_RANGE[0] * value, _ELASTANCE_RANGE[1] * value
    return None, None


@dataclass(frozen=True)
class ParameterSet:
    """Immutable, named collection of model constants.

    Use :meth:`replace` to derive modified sets; the instance itself is never
    mutated, so it can be shared between concurrent evaluations.
    """

    entries: Mapping[str, Parameter] = field(repr=False)

    def __post_init__(self) -> None:
        missing = [n for n in PARAMETER_NAMES if n not in self.entries]
        if missing:
            raise UnknownParameterError(f"missing parameters: {missing}")
        extra = [n for n in self.entries if n not in INDEX]
        if extra:
            raise UnknownParameterError(f"unregistered parameters: {extra}")
        self.validate()

    def __getitem__(self, name: str) -> float:
        try:
            return self.entries[name].value
        except KeyError:
            raise UnknownParameterError(name) from None

    def __contains__(self, name: object) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(PARAMETER_NAMES)

    def validate(self) -> None:
        for name in PARAMETER_NAMES:
            v = self.entries[name].value
            if not math.isfinite(v):
                raise ValueError(f"{name} is not finite")
            if name.startswith(_POSITIVE_PREFIXES) and v <= 0.0:
                raise ValueError(f"{name} must be strictly positive, got {v}")
        if self["R_min"] >= self["R_max"]:
            raise ValueError("R_min must be smaller than R_max")
        thb = self["T_HB"]
        if thb <= 0:
            raise ValueError("T_HB must be positive")
        for ch in CHAMBERS:
            tc, tr = self[f"T_contr_{ch}"], self[f"T_rel_{ch}"]
            if tc <= 0 or tr <= 0:
                raise ValueError(f"{ch}: contraction/relaxation durations must be positive")
            if tc + tr > thb + 1e-12:
                raise ValueError(f"{ch}: T_contr + T_rel exceeds the heartbeat period")

    def t_rel(self, chamber: str) -> float:
        """Relaxation onset, always ``t_contr + T_contr``."""
        return self[f"t_contr_{chamber}"] + self[f"T_contr_{chamber}"]

    def unit(self, name: str) -> str:
        return self.entries[name].unit

    def vector(self) -> np.ndarray:
        """Values as a float array in :data:`PARAMETER_NAMES` order."""
        return np.array([self.entries[n].value for n in PARAMETER_NAMES], dtype=float)

    def replace(self, **values: float) -> "ParameterSet":
        entries = dict(self.entries)
        for name, v in values.items():
            if name not in entries:
                raise UnknownParameterError(name)
            entries[name] = replace(entries[name], value=float(v))
        return ParameterSet(entries)

    def with_vector(self, names: Sequence[str], values: Iterable[float]) -> "ParameterSet":
        return self.replace(**dict(zip(names, (float(v) for v in values))))

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return {n: self.entries[n].to_dict() for n in PARAMETER_NAMES}

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, data: Mapping[str, Mapping], base: "ParameterSet | None" = None) -> "ParameterSet":
        """Build from ``name -> {value, unit, lower, upper}``.

        Names absent from ``data`` keep their value in ``base`` (the published
        baseline by default), so a partial file acts as an override list.
        """
        base = baseline_parameters() if base is None else base
        entries = dict(base.entries)
        for name, spec in data.items():
            if name not in INDEX:
                raise UnknownParameterError(name)
            old = entries[name]
            if not isinstance(spec, Mapping):
                spec = {"value": spec}
            entries[name] = Parameter(
                name=name,
                value=float(spec.get("value", old.value)),
                unit=spec.get("unit", old.unit),
                lower=spec.get("lower", old.lower),
                upper=spec.get("upper", old.upper),
            )
        return cls(entries)

    @classmethod
    def from_json(cls, source: str | Path, base: "ParameterSet | None" = None) -> "ParameterSet":
        path = Path(source)
        text = path.read_text() if path.exists() else str(source)
        return cls.from_dict(json.loads(text), base=base)


def baseline_parameters() -> ParameterSet:
    """The published constant set (plus the flagged LV stand-ins)."""
    entries = {}
    for name, value, unit in _TABLE:
        lo, hi = _default_bounds(name, value)
        entries[name] = Parameter(name, value, unit, lo, hi)
    return ParameterSet(entries)


def bounds_for(name: str, params: ParameterSet | None = None) -> tuple[float, float]:
    """Admissible interval of an estimable parameter."""
    params = baseline_parameters() if params is None else params
    if name not in params.entries:
        raise UnknownParameterError(name)
    p = params.entries[name]
    if p.lower is None or p.upper is None:
        raise UnknownParameterError(f"{name} has no admissible interval")
    return float(p.lower), float(p.upper)


@dataclass(frozen=True)
class ParameterVector:
    """Ordered selection of estimable parameters with box constraints."""

    names: tuple[str, ...]
    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "names", tuple(self.names))
        for attr in ("values", "lower", "upper"):
            arr = np.array(getattr(self, attr), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        n = len(self.names)
        if len(set(self.names)) != n:
            raise ValueError("parameter names must be unique")
        for name in self.names:
            if name not in INDEX:
                raise UnknownParameterError(name)
        if not (self.values.shape == self.lower.shape == self.upper.shape == (n,)):
            raise ValueError("values and bounds must match the number of names")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if np.any(self.values < self.lower) or np.any(self.values > self.upper):
            raise ValueError("values outside bounds")

    @classmethod
    def from_params(cls, names: Sequence[str], params: ParameterSet | None = None) -> "ParameterVector":
        params = baseline_parameters() if params is None else params
        bnds = [bounds_for(n, params) for n in names]
        return cls(tuple(names), [params[n] for n in names],
                   [b[0] for b in bnds], [b[1] for b in bnds])

    def __len__(self) -> int:
        return len(self.names)

    @property
    def indices(self) -> np.ndarray:
        return np.array([INDEX[n] for n in self.names], dtype=np.int64)

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(self.names, np.asarray(values, dtype=float), self.lower, self.upper)

    def with_bounds(self, lower, upper) -> "ParameterVector":
        return ParameterVector(self.names, self.values, lower, upper)

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values)}

    def apply(self, params: ParameterSet) -> ParameterSet:
        return params.with_vector(self.names, self.values)


def sample_uniform_init(exact: ParameterVector, lo_frac: float, hi_frac: float,
                        seed: int | np.random.Generator) -> ParameterVector:
    """Draw each entry uniformly in ``[lo_frac, hi_frac] * exact``, clipped to bounds."""
    if not 0 < lo_frac <= hi_frac:
        raise ValueError("need 0 < lo_frac <= hi_frac")
    rng = np.random.default_rng(seed)
    u = rng.uniform(lo_frac, hi_frac, size=len(exact))
    values = np.clip(u * exact.values, exact.lower, exact.upper)
    return exact.with_values(values)
