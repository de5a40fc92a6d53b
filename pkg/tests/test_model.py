import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ceampc.model import (ConfigurationError, ParameterSet, TrackingTarget, load_model,
                          optimal_setpoint, rollout, steady_state_residual)
from ceampc.simbench.benchmarks import build_msd_chain, build_quadrotor

from conftest import box_constraints, scalar_model

finite = st.floats(-5, 5, allow_nan=False)


@pytest.fixture(scope="module")
def chain():
    return build_msd_chain()


@pytest.fixture(scope="module")
def quad():
    return build_quadrotor()


def test_rollout_empty_horizon(scalar):
    assert rollout(scalar, [1.0], [0.5], np.zeros((0, 1))).tolist() == [[1.0]]


def test_rollout_scalar_recursion(scalar):
    xs = rollout(scalar, [1.0], [0.5], [[0.0], [0.0]])
    assert xs.ravel().tolist() == [1.0, 0.5, 0.25]


def test_rollout_chain_fixed_point(chain):
    th = chain.theta_true
    A, B = chain.model.linear_form.A(th), chain.model.linear_form.B(th)
    u = np.array([0.3])
    x_ss = np.linalg.solve(np.eye(A.shape[0]) - A, B @ u)
    xs = rollout(chain.model, x_ss, th, np.tile(u, (5, 1)))
    assert np.max(np.abs(xs - x_ss)) < 1e-10


def test_rollout_dimension_error(scalar):
    with pytest.raises(ConfigurationError):
        rollout(scalar, [1.0, 2.0], [0.5], [[0.0]])


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=8), st.integers(0, 8))
def test_rollout_causal(inputs, k):
    m = scalar_model()
    full = rollout(m, [0.3], [0.7], np.array(inputs)[:, None])
    k = min(k, len(inputs))
    part = rollout(m, [0.3], [0.7], np.array(inputs[:k])[:, None])
    assert np.array_equal(full[:k + 1], part)


def test_setpoint_origin(scalar):
    x, u, y = optimal_setpoint(scalar, [0.5], TrackingTarget([0.0], np.eye(1)), box_constraints())
    assert np.allclose([x[0], u[0], y[0]], 0.0, atol=1e-8)


def test_setpoint_saturated_target(scalar):
    x, u, y = optimal_setpoint(scalar, [0.5], TrackingTarget([10.0], np.eye(1)), box_constraints())
    assert np.allclose([x[0], u[0], y[0]], [2.0, 1.0, 2.0], atol=1e-8)


def test_setpoint_reaches_feasible_target(chain):
    x, u, y = optimal_setpoint(chain.model, chain.theta_true, TrackingTarget([0.5], chain.T),
                               chain.constraints)
    assert abs(y[0] - 0.5) < 1e-8
    assert steady_state_residual(chain.model, chain.theta_true, x, u) < 1e-8


def test_setpoint_respects_state_constraint(chain):
    x, u, y = optimal_setpoint(chain.model, chain.theta_true, TrackingTarget([1.0], chain.T),
                               chain.constraints)
    assert y[0] <= 0.7 + 1e-8 and abs(y[0] - 0.7) < 1e-6


def test_setpoint_nonlinear_sqp(quad):
    th = quad.theta_true
    x, u, y = optimal_setpoint(quad.model, th, TrackingTarget([3.0, 1.0], quad.T),
                               quad.constraints)
    assert np.allclose(y, [3.0, 1.0], atol=1e-6)
    assert np.allclose(u, 9.81 / (2 * th[0]), atol=1e-6)
    assert steady_state_residual(quad.model, th, x, u) < 1e-8


@given(st.floats(0.01, 100.0))
def test_setpoint_invariant_to_T_scale(c):
    m = scalar_model()
    cons = box_constraints()
    a = optimal_setpoint(m, [0.5], TrackingTarget([10.0], np.eye(1)), cons)
    b = optimal_setpoint(m, [0.5], TrackingTarget([10.0], c * np.eye(1)), cons)
    for p, q in zip(a, b):
        assert np.allclose(p, q, atol=1e-8)


def test_setpoint_multistart_agrees(quad):
    th = quad.theta_true
    tgt = TrackingTarget([2.0, 0.5], quad.T)
    ref = optimal_setpoint(quad.model, th, tgt, quad.constraints)
    rng = np.random.default_rng(3)
    for _ in range(3):
        z0 = np.concatenate([rng.uniform(-0.5, 0.5, 6), rng.uniform(1, 4, 2), np.zeros(2)])
        other = optimal_setpoint(quad.model, th, tgt, quad.constraints, z0=z0)
        assert np.allclose(other[2], ref[2], atol=1e-6)


def test_residual_examples(scalar):
    assert steady_state_residual(scalar, [0.5], [1.0], [0.0]) == 0.5
    assert steady_state_residual(scalar, [0.5], [2.0], [1.0]) == 0.0


def test_chain_equilibrium_residual(chain):
    th = chain.theta_true
    A, B = chain.model.linear_form.A(th), chain.model.linear_form.B(th)
    x = np.linalg.solve(np.eye(A.shape[0]) - A, B @ [1.0])
    assert steady_state_residual(chain.model, th, x, [1.0]) <= 1e-10


@pytest.mark.parametrize("which", ["chain", "quad"])
def test_linear_parametrization(which, chain, quad):
    bm = chain if which == "chain" else quad
    m = bm.model
    rng = np.random.default_rng(0)
    lo, hi = bm.state_box
    for _ in range(1000):
        x = rng.uniform(lo, hi)
        u = rng.uniform(bm.constraints.u_lo, bm.constraints.u_hi)
        th = rng.uniform(bm.theta_set.lo, bm.theta_set.hi)
        w = rng.uniform(-0.1, 0.1, m.n_w)
        lhs = m.f(x, u, th, w) - m.f(x, u, np.zeros(m.n_theta), w) - m.G(x, u, w) @ th
        assert np.linalg.norm(lhs) <= 1e-10 * (1 + np.linalg.norm(x))


def test_linear_form_agrees_with_evaluators(chain):
    m = chain.model
    rng = np.random.default_rng(1)
    for _ in range(20):
        x, u = rng.normal(size=m.n_x), rng.normal(size=1)
        th = chain.theta_set.sample(rng, 1)[0]
        A, B, E, e, *_ = m.linear_form.matrices(th)
        assert np.allclose(m.f(x, u, th), A @ x + B @ u + e, atol=1e-12, rtol=0)


def test_parameter_sets():
    with pytest.raises(ConfigurationError):
        ParameterSet.box([1.0], [0.0])
    with pytest.raises(ConfigurationError):
        ParameterSet.polytope([[1.0, 0.0]], [1.0])  # unbounded
    with pytest.raises(ConfigurationError):
        ParameterSet.polytope([[1.0], [-1.0]], [-1.0, -1.0])  # empty
    tri = ParameterSet.polytope([[-1, 0], [0, -1], [1, 1]], [0, 0, 1])
    assert np.allclose(tri.lo, 0) and np.allclose(tri.hi, 1)
    assert tri.contains([0.2, 0.2]) and not tri.contains([0.8, 0.8])


def test_target_needs_pd_weight():
    with pytest.raises(ConfigurationError):
        TrackingTarget([0.0], -np.eye(1))


def test_load_custom_model(tmp_path):
    doc = {"A": [[0.5]], "B": [[1.0]], "A_theta": [[[1.0]]], "theta_lo": [-0.2],
           "theta_hi": [0.2], "u_lo": [-1], "u_hi": [1], "state_D": [[1.0]], "state_d": [0.7]}
    path = tmp_path / "m.json"
    path.write_text(json.dumps(doc))
    model, theta_set, cons = load_model(str(path))
    assert model.is_linear and model.n_theta == 1 and cons.r == 1
    assert np.allclose(model.f([1.0], [0.0], [0.1]), [0.6])


def test_load_builtin():
    model, theta_set, cons = load_model({"builtin": "planar_quadrotor"})
    assert (model.n_x, model.n_u, model.n_theta) == (6, 2, 2)
    with pytest.raises(ConfigurationError):
        load_model({"builtin": "pendulum"})
