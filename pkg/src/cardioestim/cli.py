"""``cardio-estim`` command line: simulate, sobol, map, hmc and full test cases.

Exit status is 0 on success, 1 on a domain error (solver failure, invalid
parameters, failed stage) and 2 on a usage error (bad flags, missing input
files).  Every output file is written atomically.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .harness import TestCaseConfig, atomic_write, dumps
from .model import KINDS, Model
from .ode import SolverConfig, run_to_limit_cycle
from .params import ParameterSet, ParameterVector, baseline_parameters
from .surrogate import load_weights

log = logging.getLogger("cardioestim")


class UsageError(Exception):
    pass


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    return p


def _params(args) -> ParameterSet:
    p = _existing(args.params, "parameter")
    return ParameterSet.from_json(p) if p else baseline_parameters()


def _case_config(args) -> TestCaseConfig:
    source = args.config or getattr(args, "case", None)
    if source is None:
        raise UsageError("a test-case configuration is required (--config FILE or a case name)")
    if not Path(source).is_file() and source in harness.CASES:
        cfg = harness.preset(source)
    else:
        cfg = TestCaseConfig.from_json(_existing(source, "config"))
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threads is not None:
        changes["threads"] = args.threads
    if args.params:
        base = _params(args)
        changes["params"] = {n: base[n] for n in base}
    return cfg.with_(**changes) if changes else cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    params = _params(args)
    weights_file = _existing(args.weights, "weight")
    weights = load_weights(weights_file) if weights_file else None
    model = Model(args.model, params, args.smoothing, weights=weights)
    lc = run_to_limit_cycle(model, n_beats=args.beats, cfg=SolverConfig(), dt_sample=args.dt)
    out = _out(args)
    atomic_write(out / "trace.csv", lc.trace.to_csv())
    v = lc.trace["V_tot"]
    summary = {
        "n_beats": args.beats,
        "t_start": lc.trace.t0,
        "t_end": float(lc.trace.t[-1]),
        "samples": lc.trace.n,
        "periodicity": lc.periodicity,
        "volume_drift": float(np.max(np.abs(v - v[0])) / v[0]),
        "n_steps": lc.n_steps,
    }
    atomic_write(out / "simulate.json", dumps(summary))
    log.info("trace over [%.3f, %.3f] s written to %s", summary["t_start"], summary["t_end"], out)
    return 0


def cmd_sobol(args) -> int:
    from .sensitivity import LV_QOIS, run_sensitivity
    cfg = _case_config(args)
    model = cfg.build_model()
    names = tuple(args.estimate.split(",")) if args.estimate else cfg.estimate
    pv = ParameterVector.from_params(names, cfg.base_params())
    qois = tuple(args.qoi.split(",")) if args.qoi else LV_QOIS
    seed = cfg.seed
    res = run_sensitivity(model, pv, qois, N=args.n, seed=seed, threads=cfg.threads,
                          cfg=cfg.solver, n_beats=cfg.n_beats)
    out = _out(args)
    for which in ("S1", "ST", "S1_conf", "ST_conf"):
        atomic_write(out / f"{which}.csv", res.to_csv(which))
    atomic_write(out / "sobol.json", dumps({
        "N": args.n, "seed": seed, "parameters": list(res.names), "qois": list(res.qoi_names),
        "n_failed": res.n_failed,
        "ranking_ST": {q: res.ranking(q) for q in res.qoi_names},
    }))
    return 0


def cmd_map(args) -> int:
    cfg = _case_config(args)
    if args.runs is not None:
        cfg = cfg.with_(map=replace(cfg.map, n_runs=args.runs))
    cfg = cfg.with_(hmc=replace(cfg.hmc, enabled=False))
    report = harness.run_test_case(cfg)
    out = _out(args)
    data = report.to_dict()
    atomic_write(out / "map.json", dumps(data))
    if report.observations is not None:
        atomic_write(out / "observed.csv", report.observations.noisy.to_csv())
    if report.errors:
        for stage, msg in report.errors.items():
            print(f"error in stage {stage}: {msg}", file=sys.stderr)
        return 1
    log.info("E_L2 = %s", report.e_l2)
    return 0


def cmd_hmc(args) -> int:
    cfg = _case_config(args)
    changes = {}
    for key in ("iters", "warmup"):
        if getattr(args, key) is not None:
            changes[key] = getattr(args, key)
    if changes:
        cfg = cfg.with_(hmc=replace(cfg.hmc, **changes))
    truth = cfg.truth_vector()
    map_file = _existing(args.map, "MAP result")
    if map_file is not None:
        data = json.loads(map_file.read_text())
        mean = data["map"]["theta_mean"] if "map" in data else data["theta_mean"]
        theta_map = truth.with_values([float(mean[n]) for n in truth.names])
    else:
        theta_map = truth
    seeds = harness._seeds(cfg)
    obs = harness.generate_target(truth, cfg, seeds["noise"])
    model = cfg.build_model()
    samples = harness.run_hmc_stage(cfg, model, obs, theta_map, seeds["hmc"])
    from .hmc import posterior_summary
    summ = posterior_summary(samples)
    out = _out(args)
    atomic_write(out / "posterior.csv", samples.to_csv())
    atomic_write(out / "hmc.json", dumps({
        "schema": harness.SCHEMA,
        "theta_map": theta_map.as_dict(),
        "summary": summ.to_dict(),
        "rhat": dict(zip(samples.names, samples.rhat.tolist())),
        "divergences": samples.n_divergent,
        "acceptance": samples.acceptance_rate,
        "step_size": samples.step_size,
        "truth_in_90": dict(zip(samples.names, summ.contains(truth).tolist())),
    }))
    return 0


def cmd_case(args) -> int:
    cfg = _case_config(args)
    report = harness.run_test_case(cfg)
    harness.emit_report(report, _out(args))
    if report.errors:
        for stage, msg in report.errors.items():
            print(f"error in stage {stage}: {msg}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--params", help="JSON parameter file overriding the baseline")
    common.add_argument("--config", help="test-case configuration (JSON file or case name)")
    common.add_argument("--out", default=".", help="output directory (created if absent)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int,
                        help="worker threads (default: CARDIO_ESTIM_THREADS or 1)")
    common.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v progress, -vv debug")

    p = argparse.ArgumentParser(prog="cardio-estim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="run to the limit cycle, write the last beat")
    s.add_argument("--beats", type=int, default=5)
    s.add_argument("--model", choices=sorted(KINDS), default="direct")
    s.add_argument("--weights", help="ANN weight file (JSON) for --model ann")
    s.add_argument("--smoothing", type=float, default=0.0, help="valve smoothing width (mmHg)")
    s.add_argument("--dt", type=float, default=0.01, help="sampling interval (s)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sobol", parents=[common], help="Sobol indices of LV QoIs")
    s.add_argument("--case", help="alias of --config")
    s.add_argument("--n", type=int, default=4096, help="base sample count (power of two)")
    s.add_argument("--estimate", help="comma-separated parameters (default: the case's)")
    s.add_argument("--qoi", help="comma-separated QoIs such as max:p_LV,sv:V_LV")
    s.set_defaults(func=cmd_sobol)

    s = sub.add_parser("map", parents=[common], help="multistart MAP estimation")
    s.add_argument("--case", help="alias of --config")
    s.add_argument("--runs", type=int)
    s.set_defaults(func=cmd_map)

    s = sub.add_parser("hmc", parents=[common], help="NUTS around a MAP estimate")
    s.add_argument("--case", help="alias of --config")
    s.add_argument("--map", help="map.json from the map subcommand")
    s.add_argument("--iters", type=int)
    s.add_argument("--warmup", type=int)
    s.set_defaults(func=cmd_hmc)

    s = sub.add_parser("case", parents=[common], help="full twin experiment with report")
    s.add_argument("--case", help="alias of --config")
    s.set_defaults(func=cmd_case)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cardio-estim: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"cardio-estim: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
