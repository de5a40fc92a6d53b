import numpy as np
import pytest
from hypothesis import given, strategies as st

from ceampc.cost import CONSTANT_TAIL, open_loop_cost
from ceampc.model import TrackingTarget, _fd_jac, optimal_setpoint
from ceampc.solver.mpc import MpcProblem, build_nlp, lqr_tail, solve
from ceampc.solver.qp import QPError, solve_qp
from ceampc.solver.sqp import LeastSquaresNLP, sqp_solve
from ceampc.simbench.benchmarks import GRAVITY, build_msd_chain, build_quadrotor

from conftest import box_constraints, scalar_model, weights


@pytest.fixture(scope="module")
def chain():
    return build_msd_chain()


@pytest.fixture(scope="module")
def quad():
    return build_quadrotor()


def projected_gradient(H, g, lb, ub, iters=20000):
    """Reference solution by fixed-step projected gradient."""
    step = 1.0 / np.max(np.linalg.eigvalsh(H))
    z = np.clip(np.zeros_like(g), lb, ub)
    for _ in range(iters):
        z_new = np.clip(z - step * (H @ z + g), lb, ub)
        if np.max(np.abs(z_new - z)) < 1e-14:
            break
        z = z_new
    return z


def random_box_qp(rng, n):
    A = rng.normal(size=(n, n))
    H = A @ A.T + n * np.eye(n)
    g = rng.normal(size=n) * 5
    lb = rng.uniform(-1, 0, n)
    ub = lb + rng.uniform(0.2, 1.5, n)
    return H, g, lb, ub


def test_qp_trivial():
    assert np.allclose(solve_qp(np.eye(3), np.zeros(3)).z, 0)
    assert solve_qp(np.eye(1) * 2, [-4.0], lb=[0.0], ub=[1.0]).z[0] == pytest.approx(1.0)


def test_qp_matches_projected_gradient():
    rng = np.random.default_rng(0)
    for _ in range(50):
        H, g, lb, ub = random_box_qp(rng, rng.integers(2, 12))
        sol = solve_qp(H, g, lb=lb, ub=ub)
        assert np.allclose(sol.z, projected_gradient(H, g, lb, ub), atol=1e-6)
        assert sol.residual <= 1e-8


@st.composite
def general_qp(draw):
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    n = int(rng.integers(2, 8))
    A = rng.normal(size=(n, n))
    H = A @ A.T + 0.5 * np.eye(n)
    z_feas = rng.uniform(-0.5, 0.5, n)
    m_eq, m_in = int(rng.integers(0, n)), int(rng.integers(0, 2 * n))
    Ae = rng.normal(size=(m_eq, n))
    Ai = rng.normal(size=(m_in, n))
    return (H, rng.normal(size=n) * 3, Ae, Ae @ z_feas, np.full(n, -1.0), np.full(n, 1.0), Ai,
            Ai @ z_feas + rng.uniform(0, 0.5, m_in))


@given(general_qp())
def test_qp_kkt_on_random_problems(prob):
    H, g, Ae, be, lb, ub, Ai, bi = prob
    sol = solve_qp(H, g, Ae, be, lb, ub, Ai, bi)
    assert sol.converged and sol.residual <= 1e-8
    z = sol.z
    assert np.allclose(Ae @ z, be, atol=1e-8)
    assert np.all(Ai @ z <= bi + 1e-8) and np.all(z >= lb - 1e-8) and np.all(z <= ub + 1e-8)
    assert np.all(sol.y_in >= -1e-10) and np.all(sol.y_lb >= -1e-10)
    assert abs(sol.y_in @ (Ai @ z - bi)) <= 1e-8


def test_qp_errors():
    with pytest.raises(QPError):
        solve_qp(-np.eye(2), np.zeros(2))
    with pytest.raises(QPError):
        solve_qp(np.eye(1), [0.0], A_in=[[1.0], [-1.0]], b_in=[-1.0, -1.0])


def test_sqp_rosenbrock():
    def evaluate(z):
        r = np.array([10 * (z[1] - z[0] ** 2), 1 - z[0]])
        J = np.array([[-20 * z[0], 10.0], [-1.0, 0.0]])
        return r, J, np.zeros(0), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2))

    nlp = LeastSquaresNLP(evaluate, 2, np.full(2, -np.inf), np.full(2, np.inf))
    sol = sqp_solve(nlp, [-1.2, 1.0], max_iter=200)
    assert sol.converged and np.allclose(sol.z, [1.0, 1.0], atol=1e-6)
    h = sol.merit_history
    assert all(b <= a + 1e-12 for a, b in zip(h, h[1:]))


def test_sqp_constrained_circle():
    # closest point to (2, 0) on the unit circle with z_1 <= 0.5
    def evaluate(z):
        r = z - np.array([2.0, 0.0])
        ce = np.array([z @ z - 1.0])
        return (r, np.eye(2), ce, 2 * z[None, :], np.array([z[0] - 0.5]),
                np.array([[1.0, 0.0]]))

    nlp = LeastSquaresNLP(evaluate, 2, np.full(2, -np.inf), np.full(2, np.inf))
    sol = sqp_solve(nlp, [0.0, 1.0], max_iter=100)
    assert sol.converged and np.allclose(sol.z, [0.5, np.sqrt(0.75)], atol=1e-6)


def test_exact_step_with_singular_hessian():
    # the residual ignores z_1; an equality pins it, so the QP is still well posed
    def evaluate(z):
        return (np.array([z[0] - 1.0]), np.array([[1.0, 0.0]]), np.array([z[1] - 2.0]),
                np.array([[0.0, 1.0]]), np.zeros(0), np.zeros((0, 2)))

    nlp = LeastSquaresNLP(evaluate, 2, np.full(2, -np.inf), np.full(2, np.inf))
    sol = sqp_solve(nlp, [0.0, 0.0], exact=True)
    assert sol.converged and np.allclose(sol.z, [1.0, 2.0], atol=1e-12)


def _scalar_problem(x_hat=1.0, N=1, M=0):
    return MpcProblem(scalar_model(), np.array([0.5]), np.array([x_hat]), weights(N=N, M=M),
                      box_constraints(), TrackingTarget([0.0], np.eye(1)))


def test_mpc_scalar_analytic():
    sol = solve(_scalar_problem())
    assert sol.u_star[0, 0] == pytest.approx(0.25, abs=1e-9)
    assert sol.setpoint[0][0] == pytest.approx(0.5, abs=1e-9)
    assert sol.J_star == pytest.approx(0.5, abs=1e-9)


def test_mpc_stationary_optimum(chain):
    th = chain.theta_true
    tgt = TrackingTarget([0.5], chain.T)
    x_rd, u_rd, _ = optimal_setpoint(chain.model, th, tgt, chain.constraints)
    sol = solve(MpcProblem(chain.model, th, x_rd, chain.weights, chain.constraints, tgt))
    assert np.max(np.abs(sol.u0 - u_rd)) <= 1e-5
    assert sol.J_star <= 1e-8 and sol.kkt_residual <= 1e-6


def _chain_problem(chain, seed, y_d=1.0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.5, 0.5, chain.model.n_x)
    th = chain.theta_set.sample(rng, 1)[0]
    return MpcProblem(chain.model, th, x, chain.weights, chain.constraints,
                      TrackingTarget([y_d], chain.T))


def test_mpc_cost_reevaluation(chain):
    for seed in range(5):
        p = _chain_problem(chain, seed)
        sol = solve(p)
        x_s, u_s, y_s = sol.setpoint
        J = open_loop_cost(p.x_hat, p.theta_hat, sol.u_star, x_s, u_s, p.weights, CONSTANT_TAIL,
                           p.model, p.constraints)
        J += float((y_s - p.target.y_d) @ p.target.T @ (y_s - p.target.y_d))
        assert sol.J_star == pytest.approx(J, rel=1e-8, abs=1e-12)
        assert np.all(sol.u_star >= -25 - 1e-8) and np.all(sol.u_star <= 25 + 1e-8)
        assert np.all(sol.slacks >= -1e-10)


def test_sqp_matches_qp_on_linear_model(chain):
    for seed in range(3):
        p = _chain_problem(chain, seed)
        a, b = solve(p, method="qp"), solve(p, method="sqp")
        assert b.converged
        assert np.max(np.abs(a.u_star - b.u_star)) <= 1e-8
        assert b.J_star == pytest.approx(a.J_star, rel=1e-8)


def test_warm_start_never_worse(chain):
    p = _chain_problem(chain, 7)
    cold = solve(p)
    nxt = chain.model.f(p.x_hat, cold.u0, p.theta_hat)
    from dataclasses import replace
    warm = solve(replace(p, x_hat=nxt, warm_start=cold))
    recold = solve(replace(p, x_hat=nxt))
    assert warm.J_star <= recold.J_star * (1 + 1e-6) + 1e-12


@pytest.mark.parametrize("y_d", [0.3, 0.6])
def test_setpoint_reaches_feasible_target(chain, y_d):
    th = chain.theta_true
    tgt = TrackingTarget([y_d], chain.T)
    x_rd, *_ = optimal_setpoint(chain.model, th, tgt, chain.constraints)
    sol = solve(MpcProblem(chain.model, th, x_rd, chain.weights, chain.constraints, tgt))
    assert sol.setpoint[2][0] == pytest.approx(y_d, abs=1e-6)


def test_quadrotor_jacobians_match_fd(quad):
    m = quad.model
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.uniform(*quad.state_box)
        u = rng.uniform(-1, 4, 2)
        th = quad.theta_set.sample(rng, 1)[0]
        Ax, Bu = m.jacobians(x, u, th)
        Fx, Fu = _fd_jac(lambda xx, uu: m.f(xx, uu, th), x, u)
        assert np.allclose(Ax, Fx, rtol=1e-4, atol=1e-4 * np.abs(Fx).max())
        assert np.allclose(Bu, Fu, rtol=1e-4, atol=1e-4 * np.abs(Fu).max())


def test_mpc_nlp_jacobians_match_fd(quad):
    th = quad.theta_true
    tgt = TrackingTarget([3.0, 1.0], quad.T)
    x_s, u_s, _ = optimal_setpoint(quad.model, th, tgt, quad.constraints, regional=True)
    tail = lqr_tail(quad.model, th, x_s, u_s, quad.lqr_Q, quad.lqr_R, quad.constraints)
    rng = np.random.default_rng(1)
    for tl in (CONSTANT_TAIL, tail):
        p = MpcProblem(quad.model, th, x_s + rng.uniform(-0.05, 0.05, 6), quad.weights,
                       quad.constraints, tgt, tl, regional=True)
        nlp, L = build_nlp(p)
        for _ in range(3):
            z = np.zeros(L.n)
            z[:L.N * 2] = u_s[0] + rng.uniform(-0.05, 0.05, L.N * 2)
            z[L.xs] = x_s + rng.uniform(-0.01, 0.01, 6)
            z[L.us] = u_s + rng.uniform(-0.01, 0.01, 2)
            z[L.ys] = z[L.xs][:2]
            z[L.xi0:] = rng.uniform(0, 0.1, L.n - L.xi0)
            r, Jr, ce, Je, ci, Ji = nlp.evaluate(z)
            for val, jac, idx in ((r, Jr, 0), (ce, Je, 2), (ci, Ji, 4)):
                fd = np.empty_like(jac)
                for i in range(L.n):
                    h = 1e-6 * (1 + abs(z[i]))
                    d = np.zeros(L.n)
                    d[i] = h
                    fd[:, i] = (nlp.evaluate(z + d)[idx] - nlp.evaluate(z - d)[idx]) / (2 * h)
                scale = max(1.0, np.abs(fd).max())
                assert np.max(np.abs(jac - fd)) <= 1e-4 * scale


def test_quadrotor_hover_input(quad):
    th = quad.theta_true
    tgt = TrackingTarget([3.0, 1.0], quad.T)
    x_s, u_s, _ = optimal_setpoint(quad.model, th, tgt, quad.constraints, regional=True)
    tail = lqr_tail(quad.model, th, x_s, u_s, quad.lqr_Q, quad.lqr_R, quad.constraints)
    sol = solve(MpcProblem(quad.model, th, x_s, quad.weights, quad.constraints, tgt, tail,
                           regional=True))
    assert sol.converged
    assert np.allclose(sol.u0, GRAVITY / (2 * th[0]), atol=1e-5)
