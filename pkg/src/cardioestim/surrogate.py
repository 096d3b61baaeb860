"""Left-ventricle surrogates and their penalized coupling to the circulation.

Two surrogates share one interface:

* :class:`ElastanceSurrogate` - algebraic stand-in whose volume is the
  inverse of the contractility-scaled LV elastance law;
* :class:`AnnSurrogate` - a latent state-space network ``dz/dt = NN(...)``
  whose first latent coordinate is the LV volume.

The LV pressure becomes a state driven by the volume mismatch between the
surrogate and the circulation.  We drive it with ``(V_circ - V_sur)/eps``;
the opposite sign makes the algebraic surrogate exponentially unstable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from .circulation import A_XB_REF, I_VLV, N_CIRC, circulation_rhs
from .params import INDEX, ParameterSet

ACTIVATIONS = {"tanh": 0, "linear": 1, "identity": 1}
DEFAULT_EPS = 1e-4


class WeightFileError(ValueError):
    """Weight file cannot be parsed or violates the layer invariants."""


@dataclass(frozen=True)
class AnnWeights:
    """Fully connected network ``[z, theta_EM, p_LV, cos, sin] -> dz/dt``.

    ``weights[l]`` has shape ``(rows, cols)``; hidden layers use
    ``activations[l]``, the output layer is linear.
    """

    n_z: int
    theta_names: tuple[str, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activations: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta_names", tuple(self.theta_names))
        W = tuple(np.array(w, dtype=float) for w in self.weights)
        b = tuple(np.array(x, dtype=float).ravel() for x in self.biases)
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "biases", b)
        acts = self.activations
        if isinstance(acts, str):
            acts = (acts,) * max(len(W) - 1, 0)
        object.__setattr__(self, "activations", tuple(acts))
        self._check()

    @property
    def n_inputs(self) -> int:
        return self.n_z + len(self.theta_names) + 3

    def _check(self) -> None:
        if self.n_z < 1:
            raise WeightFileError("n_z must be >= 1")
        if not self.weights or len(self.weights) != len(self.biases):
            raise WeightFileError("need at least one layer and one bias per layer")
        if len(self.activations) != len(self.weights) - 1:
            raise WeightFileError("one activation per hidden layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise WeightFileError(f"unsupported activation {a!r}")
        for name in self.theta_names:
            if name not in INDEX:
                raise WeightFileError(f"unknown theta input {name!r}")
        width = self.n_inputs
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != width:
                raise WeightFileError(f"layer {i}: expected {width} columns, got shape {w.shape}")
            if b.shape != (w.shape[0],):
                raise WeightFileError(f"layer {i}: bias length {b.size} != rows {w.shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise WeightFileError(f"layer {i}: non-finite entry")
            width = w.shape[0]
        if width != self.n_z:
            raise WeightFileError(f"output width {width} != n_z {self.n_z}")

    # -- flat layout for the compiled kernels --------------------------------
    def packed(self):
        rows = np.array([w.shape[0] for w in self.weights], dtype=np.int64)
        cols = np.array([w.shape[1] for w in self.weights], dtype=np.int64)
        w_off = np.concatenate([[0], np.cumsum(rows * cols)]).astype(np.int64)
        b_off = np.concatenate([[0], np.cumsum(rows)]).astype(np.int64)
        wflat = np.concatenate([w.ravel() for w in self.weights])
        bflat = np.concatenate(self.biases)
        acts = np.array([ACTIVATIONS[a] for a in self.activations] + [1], dtype=np.int64)
        theta_idx = np.array([INDEX[n] for n in self.theta_names], dtype=np.int64)
        return rows, cols, w_off, b_off, wflat, bflat, acts, theta_idx

    def to_dict(self) -> dict:
        acts = set(self.activations)
        return {
            "n_z": self.n_z,
            "theta_names": list(self.theta_names),
            "activation": acts.pop() if len(acts) == 1 else list(self.activations),
            "layers": [{"rows": int(w.shape[0]), "cols": int(w.shape[1]),
                        "w": w.ravel().tolist(), "b": b.tolist()}
                       for w, b in zip(self.weights, self.biases)],
        }

    def save(self, path: str | Path) -> None:
        # repr of a Python float round-trips exactly
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def random(cls, n_z: int = 3, theta_names: Sequence[str] = ("a_XB",),
               hidden: Sequence[int] = (8,), scale: float = 0.3, seed: int = 0) -> "AnnWeights":
        """Small random network, handy for tests and demos."""
        rng = np.random.default_rng(seed)
        sizes = [n_z + len(theta_names) + 3, *hidden, n_z]
        W = [scale * rng.standard_normal((sizes[i + 1], sizes[i])) for i in range(len(sizes) - 1)]
        b = [scale * rng.standard_normal(sizes[i + 1]) for i in range(len(sizes) - 1)]
        return cls(n_z, tuple(theta_names), tuple(W), tuple(b), ("tanh",) * len(hidden))


def load_weights(path: str | Path) -> AnnWeights:
    """Read a JSON weight file (row-major flat arrays with explicit shapes)."""
    try:
        data = json.loads(Path(path).read_text())
        layers = data["layers"]
        W, b = [], []
        for i, layer in enumerate(layers):
            r, c = int(layer["rows"]), int(layer["cols"])
            w = np.array(layer["w"], dtype=float)
            if w.size != r * c:
                raise WeightFileError(f"layer {i}: {w.size} weights for shape ({r}, {c})")
            W.append(w.reshape(r, c))
            b.append(np.array(layer["b"], dtype=float))
        acts = data.get("activation", "tanh")
        if isinstance(acts, str):
            acts = (acts,) * max(len(W) - 1, 0)
        return AnnWeights(int(data["n_z"]), tuple(data.get("theta_names", [])),
                          tuple(W), tuple(b), tuple(acts))
    except WeightFileError:
        raise
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise WeightFileError(f"cannot parse weight file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# compiled network passes
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def ann_forward(x, rows, cols, w_off, b_off, wflat, bflat, acts, hbuf, out):
    """Forward pass; pre-activations of every layer are kept in ``hbuf``."""
    nl = rows.size
    src_off = -1          # -1 reads from x
    for l in range(nl):
        r = rows[l]
        c = cols[l]
        wo = w_off[l]
        ho = b_off[l]
        for i in range(r):
            acc = bflat[ho + i]
            for j in range(c):
                if src_off < 0:
                    xj = x[j]
                else:
                    hj = hbuf[src_off + j]
                    xj = math.tanh(hj) if acts[l - 1] == 0 else hj
                acc += wflat[wo + i * c + j] * xj
            hbuf[ho + i] = acc
        src_off = ho
    lo = b_off[nl - 1]
    for i in range(rows[nl - 1]):
        out[i] = hbuf[lo + i]


@njit(cache=True, nogil=True)
def ann_backward(bar_out, rows, cols, w_off, b_off, wflat, acts, hbuf, gbuf, bar_x):
    """Reverse pass of :func:`ann_forward` w.r.t. the network input."""
    nl = rows.size
    lo = b_off[nl - 1]
    for i in range(rows[nl - 1]):
        gbuf[lo + i] = bar_out[i]
    for l in range(nl - 1, -1, -1):
        r = rows[l]
        c = cols[l]
        wo = w_off[l]
        ho = b_off[l]
        if l == 0:
            for j in range(c):
                bar_x[j] = 0.0
            for i in range(r):
                g = gbuf[ho + i]
                for j in range(c):
                    bar_x[j] += wflat[wo + i * c + j] * g
        else:
            po = b_off[l - 1]
            for j in range(c):
                acc = 0.0
                for i in range(r):
                    acc += wflat[wo + i * c + j] * gbuf[ho + i]
                if acts[l - 1] == 0:
                    th = math.tanh(hbuf[po + j])
                    acc *= 1.0 - th * th
                gbuf[po + j] = acc


# ---------------------------------------------------------------------------
# surrogate objects
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ElastanceSurrogate:
    """Algebraic LV: ``V = V0_LV + p_LV / E_LV(t; a_XB)``."""

    kind: int = 1
    n_latent: int = 0

    def volume(self, z, p_lv: float, t: float, params: ParameterSet) -> float:
        from .circulation import lv_elastance
        e, _ = lv_elastance(params.vector(), float(t))
        return params["V0_LV"] + p_lv / e

    def rhs(self, z, p_lv: float, t: float, params: ParameterSet) -> np.ndarray:
        return np.zeros(0)


@dataclass(frozen=True)
class AnnSurrogate:
    """Network surrogate; ``z[0]`` is the LV volume."""

    weights: AnnWeights
    kind: int = 2

    @property
    def n_latent(self) -> int:
        return self.weights.n_z

    def volume(self, z, p_lv: float, t: float, params: ParameterSet) -> float:
        return float(np.asarray(z)[0])

    def rhs(self, z, p_lv: float, t: float, params: ParameterSet) -> np.ndarray:
        theta = [params[n] for n in self.weights.theta_names]
        return ann_rhs(z, p_lv, t, theta, self.weights, T_HB=params["T_HB"])


def ann_input(z, p_lv: float, t: float, theta_em, T_HB: float = 0.8) -> np.ndarray:
    w = 2.0 * math.pi * t / T_HB
    return np.concatenate([np.asarray(z, dtype=float).ravel(),
                           np.asarray(theta_em, dtype=float).ravel(),
                           [p_lv, math.cos(w), math.sin(w)]])


def ann_rhs(z, p_lv: float, t: float, theta_em, weights: AnnWeights,
            T_HB: float = 0.8) -> np.ndarray:
    """One forward pass of the latent dynamics network."""
    z = np.asarray(z, dtype=float).ravel()
    theta_em = np.asarray(theta_em, dtype=float).ravel()
    if z.size != weights.n_z or theta_em.size != len(weights.theta_names):
        raise ValueError(f"expected z of length {weights.n_z} and "
                         f"{len(weights.theta_names)} theta inputs")
    rows, cols, w_off, b_off, wflat, bflat, acts, _ = weights.packed()
    hbuf = np.empty(int(b_off[-1]))
    out = np.empty(weights.n_z)
    ann_forward(ann_input(z, p_lv, t, theta_em, T_HB), rows, cols, w_off, b_off,
                wflat, bflat, acts, hbuf, out)
    return out


def ann_input_vjp(z, p_lv: float, t: float, theta_em, weights: AnnWeights, v,
                  T_HB: float = 0.8) -> tuple[np.ndarray, float, np.ndarray]:
    """``v^T dNN/d(z, p_LV, theta_EM)`` as ``(bar_z, bar_p, bar_theta)``."""
    rows, cols, w_off, b_off, wflat, bflat, acts, _ = weights.packed()
    hbuf = np.empty(int(b_off[-1]))
    gbuf = np.empty_like(hbuf)
    out = np.empty(weights.n_z)
    x = ann_input(z, p_lv, t, theta_em, T_HB)
    ann_forward(x, rows, cols, w_off, b_off, wflat, bflat, acts, hbuf, out)
    bar_x = np.empty(x.size)
    ann_backward(np.asarray(v, dtype=float), rows, cols, w_off, b_off, wflat, acts,
                 hbuf, gbuf, bar_x)
    nz, nt = weights.n_z, len(weights.theta_names)
    return bar_x[:nz].copy(), float(bar_x[nz + nt]), bar_x[nz:nz + nt].copy()


def elastance_surrogate_pressure(V_LV: float, t: float, a_XB: float, params: ParameterSet) -> float:
    """LV pressure with the active elastance scaled by ``a_XB / 250``."""
    from .circulation import chamber_phi, P_DC_LV, P_DR_LV, P_TC_LV
    phi = chamber_phi(params.vector(), float(t), P_TC_LV, P_DC_LV, P_DR_LV)
    e = params["E_LV_pass"] + a_XB / A_XB_REF * params["E_LV_act_max"] * phi
    return e * (V_LV - params["V0_LV"])


def coupled_rhs(t: float, s, params: ParameterSet, surrogate, eps: float = DEFAULT_EPS,
                smoothing_width: float = 0.0) -> np.ndarray:
    """Derivative of the augmented state ``[c (12), p_LV, z]``."""
    if not eps > 0:
        raise ValueError("eps must be strictly positive")
    s = np.asarray(s, dtype=float)
    nz = surrogate.n_latent
    if s.size != N_CIRC + 1 + nz:
        raise ValueError(f"augmented state must have {N_CIRC + 1 + nz} entries")
    c, p_lv, z = s[:N_CIRC], float(s[N_CIRC]), s[N_CIRC + 1:]
    dc = circulation_rhs(t, c, params, lv_pressure=p_lv, smoothing_width=smoothing_width)
    v_sur = surrogate.volume(z, p_lv, t, params)
    dp = (c[I_VLV] - v_sur) / eps
    return np.concatenate([dc, [dp], surrogate.rhs(z, p_lv, t, params)])
