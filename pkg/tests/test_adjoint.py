from __future__ import annotations

import numpy as np
import pytest

from cardioestim.adjoint import (
    TraceObjective, adjoint_gradient, cost_objective, finite_difference_gradient, vjp_params,
    vjp_state,
)
from cardioestim.circulation import initial_state
from cardioestim.model import Model
from cardioestim.ode import SolverConfig
from cardioestim.params import ParameterVector, baseline_parameters
from cardioestim.qoi import CostWeights
from cardioestim.surrogate import AnnWeights

TIGHT = SolverConfig(rtol=1e-10, atol=1e-12)
T_LV = ("a_XB", "R_AR_SYS", "V_heart_tot")


def rel_err(a, b):
    return np.abs(np.asarray(a) - np.asarray(b)) / np.maximum(np.abs(b), 1e-12)


def one_beat(obj):
    return TraceObjective(obj.channels, obj.fn, n_beats=1, dt_sample=obj.dt_sample)


@pytest.fixture(scope="module")
def t_lv_objective(t_lv_obs, t_lv_config):
    return cost_objective(t_lv_obs.qois, t_lv_config.cost_weights())


def test_fd_oracle_on_quadratic():
    theta = ParameterVector.from_params(("a_XB", "R_AR_SYS")).with_values([200.0, 0.9])
    g = finite_difference_gradient(None, theta, None, fn=lambda x: float(np.sum(x ** 2)))
    np.testing.assert_allclose(g.grad, 2 * theta.values, rtol=1e-6)  # cancellation, J ~ 4e4
    assert g.J == pytest.approx(200.0 ** 2 + 0.81)


def test_fd_step_shrinks_at_bounds():
    theta = ParameterVector.from_params(("a_XB",)).with_values([320.0 - 1e-4])
    g = finite_difference_gradient(None, theta, None, fn=lambda x: float(x[0] ** 2))
    assert g.grad[0] == pytest.approx(2 * theta.values[0], rel=1e-9)
    on_bound = theta.with_values([320.0])
    with pytest.raises(ValueError):
        finite_difference_gradient(None, on_bound, None, fn=lambda x: float(x[0]))


def test_theta_independent_objective(smooth_model):
    const = TraceObjective(("p_AR_SYS",), lambda Y: (3.0, np.zeros_like(Y)), n_beats=1)
    theta = ParameterVector.from_params(T_LV)
    r = adjoint_gradient(smooth_model, theta, const)
    assert r.J == 3.0
    assert np.array_equal(r.grad, np.zeros(3))


def test_zero_weight_channel_gives_zero_gradient(smooth_model, t_lv_obs):
    w = CostWeights(alpha={"p_AR_SYS": 0.0}, delta={"V_LV": 0.0})
    r = adjoint_gradient(smooth_model, ParameterVector.from_params(T_LV), t_lv_obs.qois, w, n_beats=1)
    assert r.J == 0.0 and np.all(r.grad == 0.0)


def test_requires_weights_with_observations(smooth_model, t_lv_obs):
    with pytest.raises(ValueError):
        adjoint_gradient(smooth_model, ParameterVector.from_params(T_LV), t_lv_obs.qois)


def test_gradient_vanishes_at_truth(smooth_model, t_lv_objective):
    r = adjoint_gradient(smooth_model, ParameterVector.from_params(T_LV), t_lv_objective)
    assert r.J == pytest.approx(0.0, abs=1e-20)
    assert np.all(np.abs(r.grad) < 1e-8)


def test_t_lv_adjoint_matches_fd(smooth_model, t_lv_objective):
    theta = ParameterVector.from_params(T_LV).with_values([220.0, 0.75, 380.0])
    adj = adjoint_gradient(smooth_model, theta, t_lv_objective, cfg=TIGHT)
    fd = finite_difference_gradient(smooth_model, theta, t_lv_objective, cfg=TIGHT)
    assert adj.J == pytest.approx(fd.J, rel=1e-12)
    assert np.all(rel_err(adj.grad, fd.grad) < 1e-4)


@pytest.mark.xfail(strict=True, reason="FD of adaptive solves is noise-dominated at rtol 1e-6; see notes")
def test_t_lv_adjoint_matches_fd_default_tolerances(smooth_model, t_lv_objective):
    theta = ParameterVector.from_params(T_LV).with_values([220.0, 0.75, 380.0])
    adj = adjoint_gradient(smooth_model, theta, t_lv_objective)
    fd = finite_difference_gradient(smooth_model, theta, t_lv_objective)
    assert np.all(rel_err(adj.grad, fd.grad) < 1e-4)


def test_all_noninvasive_channels_and_pointwise_terms(smooth_model, t_lv_obs, t_lv_config):
    from cardioestim.harness import generate_target, preset
    cfg = preset("T_all", seed=0)
    obs = generate_target(cfg.truth_vector(), cfg)
    w = CostWeights(alpha={"p_AR_SYS": 1.0}, beta={"p_AR_SYS": 0.3}, gamma={"p_AR_SYS": 0.2},
                    delta={c: 1.0 for c in ("V_LA", "V_LV", "V_RA", "V_RV")},
                    epsilon={"V_LV": 0.5}, zeta={"V_LA": 0.5}, eta={"V_RV": 0.5})
    names = cfg.estimate
    theta = ParameterVector.from_params(names).with_values(
        ParameterVector.from_params(names).values * np.array([0.9, 1.1, 0.95, 1.05, 1.1, 0.9, 0.92]))
    obj = cost_objective(obs.qois, w)
    adj = adjoint_gradient(smooth_model, theta, obj, cfg=TIGHT)
    fd = finite_difference_gradient(smooth_model, theta, obj, cfg=TIGHT)
    assert np.all(rel_err(adj.grad, fd.grad) < 1e-4)


@pytest.mark.parametrize("kind", ["elastance", "ann"])
def test_coupled_models(kind, base, t_lv_obs, t_lv_config):
    kw = {"weights": AnnWeights.random(seed=0, scale=0.05)} if kind == "ann" else {}
    model = Model(kind, base, smoothing_width=0.1, eps=1e-2, **kw)
    theta = ParameterVector.from_params(T_LV).with_values([230.0, 0.7, 450.0])
    obj = one_beat(cost_objective(t_lv_obs.qois, t_lv_config.cost_weights()))
    adj = adjoint_gradient(model, theta, obj, cfg=TIGHT)
    fd = finite_difference_gradient(model, theta, obj, cfg=TIGHT)
    assert np.all(rel_err(adj.grad, fd.grad) < 1e-4)


def test_backward_pass_deterministic(smooth_model, t_lv_objective):
    theta = ParameterVector.from_params(T_LV).with_values([220.0, 0.75, 380.0])
    a = adjoint_gradient(smooth_model, theta, t_lv_objective)
    b = adjoint_gradient(smooth_model, theta, t_lv_objective)
    assert a.grad.tobytes() == b.grad.tobytes()


def _states(model, rng, n=5):
    c = initial_state(model.params).to_array()
    out = []
    for _ in range(n):
        s = c * (1 + 0.2 * rng.standard_normal(c.size))
        s[8:12] = 30 * rng.standard_normal(4)
        if model.kind != "direct":
            extra = [60 * rng.random()] + ([s[1] + rng.standard_normal()] +
                                          list(rng.standard_normal(model.n_latent - 1))
                                          if model.kind == "ann" else [])
            s = np.concatenate([s, extra])
        out.append(s)
    return out


@pytest.mark.parametrize("kind", ["direct", "elastance", "ann"])
def test_vjp_directional_fd(kind, base, rng):
    kw = {"weights": AnnWeights.random(seed=1)} if kind == "ann" else {}
    model = Model(kind, base, smoothing_width=0.1, eps=1e-3, **kw)
    theta = ParameterVector.from_params(("a_XB", "R_AR_SYS", "E_RV_act", "R_VEN_SYS"))
    P = model.parameter_array(theta)
    h = 1e-6
    for s in _states(model, rng):
        t = rng.uniform(0, 0.8)
        v = rng.standard_normal(s.size)
        gs = vjp_state(model, t, s, theta, v)
        for _ in range(3):
            u = rng.standard_normal(s.size) * np.maximum(np.abs(s), 1.0)
            fd = v @ (model.rhs(t, s + h * u, P) - model.rhs(t, s - h * u, P)) / (2 * h)
            assert gs @ u == pytest.approx(fd, rel=1e-6, abs=1e-6 * np.abs(v).sum())
        gp = vjp_params(model, t, s, theta, v)
        for i, idx in enumerate(theta.indices):
            dP = np.zeros_like(P)
            step = h * abs(P[idx])
            dP[idx] = step
            fd = v @ (model.rhs(t, s, P + dP) - model.rhs(t, s, P - dP)) / (2 * step)
            assert gp[i] == pytest.approx(fd, rel=1e-6, abs=1e-9 * np.abs(v).sum())


def test_vjp_zero_vector(smooth_model):
    s = initial_state(baseline_parameters()).to_array()
    theta = ParameterVector.from_params(T_LV)
    assert np.all(vjp_state(smooth_model, 0.2, s, theta, np.zeros(12)) == 0)
    assert np.all(vjp_params(smooth_model, 0.2, s, theta, np.zeros(12)) == 0)
