"""Twin-experiment orchestration: targets, noise, MAP, NUTS and reports.

A test case generates noisy observations from the model at known
parameters, optionally perturbs some fixed parameters of the estimation
model, runs the multistart MAP estimation, samples the posterior around the
averaged MAP estimate and summarizes everything in a JSON report.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .adjoint import adjoint_gradient, cost_objective
from .hmc import (ROM_LAMBDA, ROM_SIGMA, CovarianceModel, Posterior, PosteriorSamples,
                  likelihood_objective, nuts_sample, posterior_summary, prior_box)
from .model import Model
from .ode import SolverConfig, TimeTrace, run_to_limit_cycle
from .optim import MapResult, multistart_map, run_seeds
from .params import ParameterSet, ParameterVector, baseline_parameters
from .qoi import CostWeights, QoISet, extract_qois
from .surrogate import load_weights

log = logging.getLogger(__name__)

SCHEMA = 1
NONINVASIVE = ("p_AR_SYS", "V_LA", "V_LV", "V_RA", "V_RV")
T_LV_PARAMS = ("a_XB", "R_AR_SYS", "V_heart_tot")
T_ALL_PARAMS = ("a_XB", "E_RV_act", "E_LA_pass", "E_RA_pass", "R_AR_SYS", "R_VEN_SYS", "V_heart_tot")
PERTURBABLE = ("E_RV_act", "E_LA_pass", "E_RA_pass", "R_VEN_SYS")
CASES = {
    "T_LV": (T_LV_PARAMS, ("p_AR_SYS", "V_LV")),
    "T_all": (T_ALL_PARAMS, NONINVASIVE),
    "T_LV_perturbed": (T_LV_PARAMS, ("p_AR_SYS", "V_LV")),
}
SIGNAL_REFERENCE = 100.0   # mmHg or mL; SNR = sigma_meas / reference


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MapOptions:
    enabled: bool = True
    n_runs: int = 10
    lo_frac: float = 0.5
    hi_frac: float = 1.5
    max_iter: int = 100
    memory: int = 10
    tol_grad: float = 1e-8
    tol_J: float = 1e-10


@dataclass(frozen=True)
class HmcOptions:
    enabled: bool = True
    iters: int = 750
    warmup: int = 250
    iota: float = 0.1
    step_size: float = 1e-3
    adapt_step_size: bool = True
    target_accept: float = 0.8
    max_depth: int = 10
    lam: float = ROM_LAMBDA
    sigma_rom: Mapping[str, float] = field(default_factory=lambda: dict(ROM_SIGMA))
    band_draws: int = 100


def _from_mapping(cls, data: Mapping | None):
    if data is None:
        return cls()
    if isinstance(data, cls):
        return data
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    return cls(**dict(data))


@dataclass(frozen=True)
class TestCaseConfig:
    """Full description of one twin experiment (JSON-serializable)."""

    __test__ = False   # keep pytest from collecting this class

    case: str = "T_LV"
    estimate: tuple[str, ...] = ()
    channels: tuple[str, ...] = ()
    snr: float = 0.0
    weights: Mapping | None = None
    perturb_names: tuple[str, ...] = ()
    perturb_frac: float = 0.0
    seed: int = 0
    model: str = "direct"
    smoothing_width: float = 0.1
    eps: float = 1e-4
    weights_file: str | None = None
    params: Mapping[str, float] = field(default_factory=dict)
    truth: Mapping[str, float] = field(default_factory=dict)
    n_beats: int = 5
    dt_sample: float = 0.01
    solver: SolverConfig = SolverConfig()
    map: MapOptions = MapOptions()
    hmc: HmcOptions = HmcOptions()
    threads: int | None = None

    def __post_init__(self) -> None:
        if self.case not in CASES and self.case != "custom":
            raise ConfigError(f"unknown case {self.case!r}")
        est, ch = CASES.get(self.case, ((), ()))
        object.__setattr__(self, "estimate", tuple(self.estimate) or est)
        object.__setattr__(self, "channels", tuple(self.channels) or ch)
        object.__setattr__(self, "perturb_names", tuple(self.perturb_names))
        for name, cls in (("solver", SolverConfig), ("map", MapOptions), ("hmc", HmcOptions)):
            object.__setattr__(self, name, _from_mapping(cls, getattr(self, name)))
        if self.case in CASES and self.estimate != est:
            raise ConfigError(f"{self.case} estimates exactly {est}")
        if self.case == "T_LV_perturbed":
            if not self.perturb_names:
                object.__setattr__(self, "perturb_names", PERTURBABLE)
            if set(self.perturb_names) - set(PERTURBABLE):
                raise ConfigError(f"perturbation is limited to {PERTURBABLE}")
        elif self.perturb_names and self.case != "custom":
            raise ConfigError("perturbation only applies to T_LV_perturbed or custom cases")
        if not self.estimate or not self.channels:
            raise ConfigError("estimate and channels must be non-empty")
        bad = set(self.channels) - set(NONINVASIVE)
        if bad:
            raise ConfigError(f"channels {sorted(bad)} are not in the non-invasive set")
        if self.snr < 0 or self.perturb_frac < 0:
            raise ConfigError("snr and perturb_frac must be >= 0")

    # -- (de)serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimate"] = list(self.estimate)
        d["channels"] = list(self.channels)
        d["perturb_names"] = list(self.perturb_names)
        d["hmc"]["sigma_rom"] = dict(self.hmc.sigma_rom)
        d["weights"] = None if self.weights is None else self.cost_weights().to_dict()
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TestCaseConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**dict(data))

    @classmethod
    def from_json(cls, path: str | Path) -> "TestCaseConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def with_(self, **changes) -> "TestCaseConfig":
        return replace(self, **changes)

    # -- derived objects ------------------------------------------------------
    def cost_weights(self) -> CostWeights:
        if self.weights is None:
            return CostWeights.traces_only(self.channels)
        return CostWeights.from_dict(self.weights)

    def base_params(self) -> ParameterSet:
        base = baseline_parameters()
        return base.replace(**{k: float(v) for k, v in self.params.items()}) if self.params else base

    def truth_vector(self) -> ParameterVector:
        pv = ParameterVector.from_params(self.estimate, self.base_params())
        if self.truth:
            pv = pv.with_values([float(self.truth.get(n, v)) for n, v in zip(pv.names, pv.values)])
        return pv

    def build_model(self, params: ParameterSet | None = None) -> Model:
        weights = load_weights(self.weights_file) if self.weights_file else None
        return Model(self.model, self.base_params() if params is None else params,
                     self.smoothing_width, self.eps, weights)

    def sigma_meas(self) -> dict[str, float]:
        return {ch: self.snr * SIGNAL_REFERENCE for ch in self.channels}


def preset(case: str, **overrides) -> TestCaseConfig:
    """Configuration of a named case with keyword overrides."""
    return TestCaseConfig(case=case, **overrides)


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

@dataclass
class ObservationSet:
    channels: tuple[str, ...]
    clean: TimeTrace
    noisy: TimeTrace
    sigma: dict[str, float]
    snr: float
    theta_true: ParameterVector | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        bad = set(self.channels) - set(NONINVASIVE)
        if bad:
            raise ValueError(f"channels {sorted(bad)} cannot be measured non-invasively")

    @property
    def qois(self) -> QoISet:
        return extract_qois(self.noisy, self.channels)


def add_noise(trace: TimeTrace, sigma: float | Mapping[str, float],
              seed: int | np.random.Generator | np.random.SeedSequence) -> TimeTrace:
    """I.i.d. Gaussian noise; a scalar ``sigma`` applies to every channel."""
    rng = np.random.default_rng(seed)
    sig = {ch: float(sigma) for ch in trace.channels} if np.isscalar(sigma) else dict(sigma)
    out = {}
    for ch, x in trace.channels.items():
        s = sig.get(ch, 0.0)
        if s < 0:
            raise ValueError("sigma must be >= 0")
        noise = rng.normal(size=x.shape)      # drawn even at s = 0: streams stay aligned
        out[ch] = x + s * noise if s > 0 else x.copy()
    return TimeTrace(trace.t0, trace.dt_sample, out)


def _seeds(config: TestCaseConfig) -> dict[str, np.random.SeedSequence]:
    noise, map_, hmc, perturb = run_seeds(config.seed, 4)
    return {"noise": noise, "map": map_, "hmc": hmc, "perturb": perturb}


def generate_target(theta_true: ParameterVector, config: TestCaseConfig,
                    seed=None) -> ObservationSet:
    """Limit-cycle run at ``theta_true``, channel extraction and measurement noise."""
    model = config.build_model()
    lc = run_to_limit_cycle(model, theta_true, n_beats=config.n_beats, cfg=config.solver,
                            dt_sample=config.dt_sample)
    clean = lc.trace.select(config.channels)
    seed = _seeds(config)["noise"] if seed is None else seed
    sigma = config.sigma_meas()
    noisy = add_noise(clean, sigma, seed)
    return ObservationSet(tuple(config.channels), clean, noisy, sigma, config.snr, theta_true,
                          config.seed)


def perturbation_factors(config: TestCaseConfig, seed=None) -> dict[str, float]:
    """``1 +- frac`` per perturbed parameter with a random sign."""
    rng = np.random.default_rng(_seeds(config)["perturb"] if seed is None else seed)
    signs = rng.choice([-1.0, 1.0], size=len(config.perturb_names))
    return {n: 1.0 + s * config.perturb_frac for n, s in zip(config.perturb_names, signs)}


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass
class TestCaseReport:
    __test__ = False

    config: TestCaseConfig
    truth: ParameterVector
    observations: ObservationSet | None = None
    perturbation: dict[str, float] = field(default_factory=dict)
    map_result: MapResult | None = None
    samples: PosteriorSamples | None = None
    bands: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    fitted: TimeTrace | None = None
    errors: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def e_l2(self) -> float | None:
        return None if self.map_result is None else self.map_result.e_l2

    @property
    def summary(self):
        return None if self.samples is None else posterior_summary(self.samples)

    def to_dict(self) -> dict:
        """Report content; wall-clock times are kept out (see ``timings``)."""
        d: dict[str, Any] = {
            "schema": SCHEMA,
            "case": self.config.case,
            "config": self.config.to_dict(),
            "truth": self.truth.as_dict(),
            "perturbation": self.perturbation,
            "errors": self.errors,
        }
        if self.map_result is not None:
            m = self.map_result.to_dict()
            d["map"] = m
        if self.samples is not None:
            s = self.samples
            summ = posterior_summary(s)
            d["hmc"] = {
                "retained": int(s.draws.shape[0]),
                "warmup": s.warmup,
                "step_size": s.step_size,
                "acceptance": s.acceptance_rate,
                "divergences": s.n_divergent,
                "mean_tree_depth": float(np.mean(s.tree_depth)),
                "rhat": dict(zip(s.names, s.rhat.tolist())),
                "summary": summ.to_dict(),
                "truth_in_90": dict(zip(s.names, summ.contains(self.truth).tolist())),
            }
        return d


def _time_it(timings, key):
    class _T:
        def __enter__(self):
            self.t = time.perf_counter()

        def __exit__(self, *exc):
            timings[key] = time.perf_counter() - self.t
            return False
    return _T()


def run_map_stage(config: TestCaseConfig, model: Model, obs: ObservationSet,
                  truth: ParameterVector, seed) -> MapResult:
    objective = cost_objective(obs.qois, config.cost_weights(), n_beats=config.n_beats)

    def f(x):
        r = adjoint_gradient(model, truth.with_values(x), objective, cfg=config.solver)
        return r.J, r.grad

    mo = config.map
    return multistart_map(f, truth, n_runs=mo.n_runs, seed=seed, truth=truth,
                          lo_frac=mo.lo_frac, hi_frac=mo.hi_frac, threads=config.threads,
                          max_iter=mo.max_iter, memory=mo.memory, tol_grad=mo.tol_grad,
                          tol_J=mo.tol_J)


def build_posterior(config: TestCaseConfig, model: Model, obs: ObservationSet,
                    theta_map: ParameterVector) -> Posterior:
    grid = obs.noisy.t
    cov = CovarianceModel(grid, obs.sigma, config.hmc.sigma_rom, config.hmc.lam)
    objective = likelihood_objective(obs.qois, cov, n_beats=config.n_beats)
    return Posterior(model, prior_box(theta_map, config.hmc.iota), objective, cov, config.solver)


def run_hmc_stage(config: TestCaseConfig, model: Model, obs: ObservationSet,
                  theta_map: ParameterVector, seed, callback=None) -> PosteriorSamples:
    ho = config.hmc
    post = build_posterior(config, model, obs, theta_map)
    rng_seed = int(np.random.default_rng(seed).integers(2**63 - 1))
    return nuts_sample(post, theta_map, iters=ho.iters, warmup=ho.warmup, iota=ho.iota,
                       seed=rng_seed, step_size=ho.step_size, adapt_step_size=ho.adapt_step_size,
                       target_accept=ho.target_accept, max_depth=ho.max_depth, callback=callback)


def trace_bands(model: Model, draws: np.ndarray, names: Sequence[str], channels: Sequence[str],
                config: TestCaseConfig) -> dict[str, dict[str, np.ndarray]]:
    """Per-sample mean and 5th/95th percentiles of the simulated channels over ``draws``."""
    if len(draws) == 0:
        raise ValueError("trace_bands needs at least one draw")
    stacks: dict[str, list[np.ndarray]] = {ch: [] for ch in channels}
    base = ParameterVector.from_params(names, model.params)
    for row in draws:
        tr = run_to_limit_cycle(model, base.with_values(np.clip(row, base.lower, base.upper)),
                                n_beats=config.n_beats, cfg=config.solver,
                                dt_sample=config.dt_sample).trace
        for ch in channels:
            stacks[ch].append(tr[ch])
    out = {}
    for ch, rows in stacks.items():
        arr = np.array(rows)
        out[ch] = {"mean": arr.mean(axis=0), "p5": np.percentile(arr, 5.0, axis=0),
                   "p95": np.percentile(arr, 95.0, axis=0)}
    return out


def _band_rows(n_retained: int, n_band: int) -> np.ndarray:
    if n_band <= 0 or n_retained == 0:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.linspace(0, n_retained - 1, min(n_band, n_retained)).round().astype(np.int64))


def run_test_case(config: TestCaseConfig, hmc_callback=None) -> TestCaseReport:
    """Target generation, optional perturbation, multistart MAP and NUTS.

    Stage failures are recorded in ``report.errors`` and end the pipeline;
    everything computed so far is kept.  ``hmc_callback`` is handed to
    :func:`nuts_sample` (an exception raised there aborts the HMC stage).
    """
    seeds = _seeds(config)
    truth = config.truth_vector()
    report = TestCaseReport(config, truth)
    timings = report.timings
    t_all = time.perf_counter()
    stage = "target"
    try:
        with _time_it(timings, "target"):
            report.observations = generate_target(truth, config, seeds["noise"])
        est_params = config.base_params()
        if config.perturb_names and config.perturb_frac > 0:
            report.perturbation = perturbation_factors(config, seeds["perturb"])
            est_params = est_params.replace(**{n: est_params[n] * f
                                               for n, f in report.perturbation.items()})
        model = config.build_model(est_params)
        obs = report.observations
        if config.map.enabled:
            stage = "map"
            with _time_it(timings, "map"):
                report.map_result = run_map_stage(config, model, obs, truth, seeds["map"])
            theta_map = report.map_result.theta_mean
            report.fitted = run_to_limit_cycle(model, theta_map, n_beats=config.n_beats,
                                               cfg=config.solver,
                                               dt_sample=config.dt_sample).trace.select(config.channels)
        else:
            theta_map = truth
        if config.hmc.enabled:
            stage = "hmc"
            with _time_it(timings, "hmc"):
                report.samples = run_hmc_stage(config, model, obs, theta_map, seeds["hmc"],
                                               callback=hmc_callback)
            stage = "bands"
            rows = _band_rows(report.samples.draws.shape[0], config.hmc.band_draws)
            if rows.size:
                with _time_it(timings, "bands"):
                    report.bands = trace_bands(model, report.samples.draws[rows], truth.names,
                                               config.channels, config)
    except Exception as exc:  # partial report
        report.errors[stage] = f"{type(exc).__name__}: {exc}"
        log.error("stage %s failed: %s", stage, exc)
    timings["total"] = time.perf_counter() - t_all
    return report


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def atomic_write(path: str | Path, text: str) -> None:
    """Write via a temporary file in the same directory and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _bands_csv(report: TestCaseReport) -> str:
    obs = report.observations
    cols = ["t"]
    data = [obs.noisy.t]
    for ch in report.config.channels:
        cols += [f"{ch}_observed", f"{ch}_clean"]
        data += [obs.noisy[ch], obs.clean[ch]]
        if report.fitted is not None:
            cols.append(f"{ch}_map")
            data.append(report.fitted[ch])
        if ch in report.bands:
            b = report.bands[ch]
            cols += [f"{ch}_mean", f"{ch}_p5", f"{ch}_p95"]
            data += [b["mean"], b["p5"], b["p95"]]
    lines = [",".join(cols)]
    for row in np.column_stack(data):
        lines.append(",".join(format(float(v), ".17g") for v in row))
    return "\n".join(lines) + "\n"


REPORT_KEYS = {"schema": int, "case": str, "config": dict, "truth": dict,
               "perturbation": dict, "errors": dict}


def validate_report(data: Mapping) -> None:
    """Check the top-level structure of a report dictionary."""
    for key, typ in REPORT_KEYS.items():
        if key not in data:
            raise ValueError(f"report lacks {key!r}")
        if not isinstance(data[key], typ):
            raise ValueError(f"report field {key!r} must be {typ.__name__}")
    if data["schema"] != SCHEMA:
        raise ValueError(f"unsupported schema {data['schema']}")
    if "map" in data:
        for key in ("runs", "theta_mean", "E_L2"):
            if key not in data["map"]:
                raise ValueError(f"map block lacks {key!r}")
    if "hmc" in data:
        for key in ("summary", "rhat", "divergences"):
            if key not in data["hmc"]:
                raise ValueError(f"hmc block lacks {key!r}")


def emit_report(report: TestCaseReport, out: str | Path) -> dict[str, Path]:
    """Write ``report.json``, ``traces/*.csv``, ``posterior.csv``, ``bands.csv`` and ``timings.json``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    data = report.to_dict()
    validate_report(data)
    written["report"] = out / "report.json"
    atomic_write(written["report"], dumps(data))
    if report.observations is not None:
        obs = report.observations
        atomic_write(out / "traces" / "observed.csv", obs.noisy.to_csv())
        atomic_write(out / "traces" / "clean.csv", obs.clean.to_csv())
        written["traces"] = out / "traces"
        if report.fitted is not None:
            atomic_write(out / "traces" / "map_fit.csv", report.fitted.to_csv())
        written["bands"] = out / "bands.csv"
        atomic_write(written["bands"], _bands_csv(report))
    if report.samples is not None:
        written["posterior"] = out / "posterior.csv"
        atomic_write(written["posterior"], report.samples.to_csv())
    written["timings"] = out / "timings.json"
    atomic_write(written["timings"], dumps(report.timings))
    return written
