from __future__ import annotations

import json

import numpy as np
import pytest

from cardioestim import harness
from cardioestim.adjoint import cost_objective, evaluate_objective
from cardioestim.harness import (
    ConfigError, ObservationSet, TestCaseConfig, add_noise, dumps, emit_report, generate_target,
    perturbation_factors, preset, run_test_case, trace_bands, validate_report,
)
from cardioestim.ode import TimeTrace, run_to_limit_cycle

TINY = dict(map={"n_runs": 2, "max_iter": 8}, hmc={"iters": 40, "warmup": 20, "band_draws": 5})


@pytest.fixture(scope="module")
def tiny_report():
    return run_test_case(preset("T_LV", snr=0.01, seed=3, **TINY))


def test_case_channels():
    assert preset("T_LV").channels == ("p_AR_SYS", "V_LV")
    assert len(preset("T_all").channels) == 5
    assert preset("T_all").estimate == harness.T_ALL_PARAMS
    assert preset("T_LV_perturbed").perturb_names == harness.PERTURBABLE


def test_config_validation():
    with pytest.raises(ConfigError):
        TestCaseConfig(case="T_bogus")
    with pytest.raises(ConfigError):
        TestCaseConfig(case="T_LV", estimate=("a_XB",))
    with pytest.raises(ConfigError):
        TestCaseConfig(case="custom", estimate=("a_XB",), channels=("p_LV",))
    with pytest.raises(ConfigError):
        TestCaseConfig(case="T_LV", perturb_names=("E_RV_act",))
    with pytest.raises(ConfigError):
        TestCaseConfig(case="T_LV_perturbed", perturb_names=("a_XB",))
    with pytest.raises(ConfigError):
        TestCaseConfig(case="T_LV", snr=-0.1)
    with pytest.raises(ConfigError):
        TestCaseConfig.from_dict({"case": "T_LV", "colour": "red"})
    with pytest.raises(ConfigError):
        TestCaseConfig(map={"n_run": 3})


def test_config_json_round_trip(tmp_path):
    cfg = preset("T_LV_perturbed", snr=0.05, perturb_frac=0.1, seed=9,
                 weights={"alpha": {"p_AR_SYS": 1.0}, "eta": {"V_LV": 0.5}},
                 params={"R_AR_PUL": 0.03}, hmc={"iters": 100, "warmup": 50})
    path = tmp_path / "c.json"
    path.write_text(dumps(cfg.to_dict()))
    back = TestCaseConfig.from_json(path)
    assert back.to_dict() == cfg.to_dict()
    assert back.base_params()["R_AR_PUL"] == 0.03
    assert back.cost_weights().eta == {"V_LV": 0.5}
    path.write_text("{oops")
    with pytest.raises(ConfigError):
        TestCaseConfig.from_json(path)


def test_add_noise():
    tr = TimeTrace(0.0, 0.01, {"p_AR_SYS": np.linspace(80, 120, 200)})
    same = add_noise(tr, 0.0, 1)
    assert np.array_equal(same["p_AR_SYS"], tr["p_AR_SYS"])
    noisy = add_noise(tr, 10.0, 1)
    resid = noisy["p_AR_SYS"] - tr["p_AR_SYS"]
    assert 7.0 < resid.std() < 13.0
    assert np.array_equal(add_noise(tr, 10.0, 1)["p_AR_SYS"], noisy["p_AR_SYS"])
    with pytest.raises(ValueError):
        add_noise(tr, -1.0, 1)


def test_snr_definition():
    cfg = preset("T_LV", snr=0.1)
    assert cfg.sigma_meas() == {"p_AR_SYS": 10.0, "V_LV": 10.0}
    assert 10.0 / harness.SIGNAL_REFERENCE == pytest.approx(0.1)


def test_twin_target_self_consistent(t_lv_obs, t_lv_config, smooth_model):
    obj = cost_objective(t_lv_obs.qois, t_lv_config.cost_weights())
    assert evaluate_objective(smooth_model, t_lv_config.truth_vector(), obj) == 0.0
    assert np.array_equal(t_lv_obs.clean["V_LV"], t_lv_obs.noisy["V_LV"])
    assert t_lv_obs.noisy.n == 81


def test_invasive_channel_rejected(t_lv_obs):
    with pytest.raises(ValueError):
        ObservationSet(("p_LV",), t_lv_obs.clean, t_lv_obs.noisy, {}, 0.0)


def test_perturbation_factors():
    cfg = preset("T_LV_perturbed", perturb_frac=0.2, seed=4)
    f = perturbation_factors(cfg)
    assert set(f) == set(harness.PERTURBABLE)
    assert all(v in (pytest.approx(0.8), pytest.approx(1.2)) for v in f.values())
    assert perturbation_factors(cfg) == f


def test_tiny_pipeline(tiny_report):
    r = tiny_report
    assert not r.errors
    assert r.map_result is not None and len(r.map_result.runs) == 2
    assert r.samples.draws.shape == (20, 3)
    d = r.to_dict()
    validate_report(d)
    json.loads(dumps(d))
    assert "total" in r.timings and "timings" not in d


def test_pipeline_deterministic(tiny_report):
    again = run_test_case(preset("T_LV", snr=0.01, seed=3, **TINY))
    assert dumps(again.to_dict()) == dumps(tiny_report.to_dict())


def test_band_rows():
    assert harness._band_rows(10, 0).size == 0
    assert harness._band_rows(0, 5).size == 0
    assert harness._band_rows(5, 10).tolist() == [0, 1, 2, 3, 4]
    rows = harness._band_rows(100, 5)
    assert rows[0] == 0 and rows[-1] == 99 and rows.size == 5


def test_bands_are_ordered_and_match_quantiles(tiny_report):
    r = tiny_report
    for ch, b in r.bands.items():
        assert np.all(b["p5"] <= b["mean"] + 1e-9) and np.all(b["mean"] <= b["p95"] + 1e-9)
    cfg = r.config
    model = cfg.build_model()
    draws = r.samples.draws[:6]
    bands = trace_bands(model, draws, r.truth.names, cfg.channels, cfg)
    sims = np.array([run_to_limit_cycle(model, r.truth.with_values(x), n_beats=cfg.n_beats,
                                        cfg=cfg.solver, dt_sample=cfg.dt_sample).trace["V_LV"]
                     for x in draws])
    np.testing.assert_allclose(bands["V_LV"]["p95"], np.percentile(sims, 95, axis=0), rtol=1e-12)
    np.testing.assert_allclose(bands["V_LV"]["mean"], sims.mean(axis=0), rtol=1e-12)


def test_emit_report(tiny_report, tmp_path):
    written = emit_report(tiny_report, tmp_path)
    assert (tmp_path / "report.json").is_file()
    for name in ("observed.csv", "clean.csv", "map_fit.csv"):
        assert (tmp_path / "traces" / name).is_file()
    assert (tmp_path / "posterior.csv").read_text().startswith("iter,logp,a_XB")
    header = (tmp_path / "bands.csv").read_text().splitlines()[0].split(",")
    assert "V_LV_p5" in header and "p_AR_SYS_map" in header
    data = json.loads((tmp_path / "report.json").read_text())
    validate_report(data)
    assert set(data["hmc"]["truth_in_90"]) == {"a_XB", "R_AR_SYS", "V_heart_tot"}
    assert written["report"] == tmp_path / "report.json"
    assert not list(tmp_path.glob(".*.tmp"))


def test_validate_report_rejects_bad_structure():
    with pytest.raises(ValueError):
        validate_report({"schema": 1})
    good = {"schema": 1, "case": "T_LV", "config": {}, "truth": {}, "perturbation": {}, "errors": {}}
    validate_report(good)
    with pytest.raises(ValueError):
        validate_report({**good, "schema": 2})
    with pytest.raises(ValueError):
        validate_report({**good, "map": {"runs": []}})


def test_stage_failure_gives_partial_report():
    cfg = preset("T_LV", solver={"max_steps": 10}, **TINY)
    r = run_test_case(cfg)
    assert "target" in r.errors and r.map_result is None
    validate_report(r.to_dict())


def test_map_only(t_lv_config):
    cfg = preset("T_LV", map={"n_runs": 1, "lo_frac": 1.0, "hi_frac": 1.0}, hmc={"enabled": False})
    r = run_test_case(cfg)
    assert r.samples is None and r.e_l2 < 1e-10
    assert "hmc" not in r.to_dict()


def test_generate_target_noise_seeded():
    cfg = preset("T_LV", snr=0.05, seed=2)
    a = generate_target(cfg.truth_vector(), cfg)
    b = generate_target(cfg.truth_vector(), cfg)
    assert np.array_equal(a.noisy["V_LV"], b.noisy["V_LV"])
    c = generate_target(cfg.truth_vector(), cfg.with_(seed=3))
    assert not np.array_equal(a.noisy["V_LV"], c.noisy["V_LV"])
    assert a.sigma == {"p_AR_SYS": 5.0, "V_LV": 5.0}


def test_hmc_callback_abort_keeps_map():
    def stop(it, *_):
        if it == 3:
            raise TimeoutError("budget")
    r = run_test_case(preset("T_LV", **TINY), hmc_callback=stop)
    assert r.errors == {"hmc": "TimeoutError: budget"}
    assert r.map_result is not None and r.samples is None
    validate_report(r.to_dict())


def test_target_failure_label_without_map():
    r = run_test_case(preset("T_LV", solver={"max_steps": 10}, map={"enabled": False}))
    assert set(r.errors) == {"target"}


def test_zero_band_draws_skips_bands(tmp_path):
    cfg = preset("T_LV", map={"n_runs": 1, "max_iter": 3}, hmc={"iters": 12, "warmup": 6, "band_draws": 0})
    r = run_test_case(cfg)
    assert not r.errors and r.bands == {} and r.samples.draws.shape[0] == 6
    emit_report(r, tmp_path)
    assert "V_LV_p5" not in (tmp_path / "bands.csv").read_text().splitlines()[0]
    with pytest.raises(ValueError):
        trace_bands(cfg.build_model(), np.zeros((0, 3)), cfg.estimate, cfg.channels, cfg)
