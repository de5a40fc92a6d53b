"""The two benchmark systems: a mass-spring-damper chain and a planar quadrotor."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from ..cost import CostWeights
from ..model import (AffineMatrix, ConfigurationError, ConstraintSpec, LinearForm, ParameterSet,
                     ParametricModel, default_slack_weights, linear_model)

GRAVITY = 9.81


@dataclass
class Benchmark:
    """A model with its parameter set, constraints and default controller data."""

    model: ParametricModel
    theta_set: ParameterSet
    constraints: ConstraintSpec
    theta_hat0: np.ndarray
    theta_true: np.ndarray
    weights: CostWeights
    T: np.ndarray
    schedule: list  # [(start_step, y_d), ...]
    x0: np.ndarray
    state_box: tuple
    w_box: tuple
    v_box: tuple
    diverge_norm: float = 1e6
    lqr_Q: Optional[np.ndarray] = None
    lqr_R: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    def y_d(self, k):
        y = self.schedule[0][1]
        for start, val in self.schedule:
            if k >= start:
                y = val
        return np.atleast_1d(np.asarray(y, dtype=float))


def discretize(Ac, Bc, dt):
    """Zero-order-hold discretization from the exponential of the augmented matrix."""
    if dt <= 0:
        raise ConfigurationError("sampling time must be positive")
    n, m = Bc.shape
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = Ac
    aug[:n, n:] = Bc
    Md = sla.expm(aug * dt)
    return Md[:n, :n], Md[:n, n:]


def chain_matrices(n_masses, mass=0.5, k=10.0, c=2.0, k_ground=1.0, c_ground=1.0, actuator=0):
    """Continuous-time chain; states are all positions followed by all velocities."""
    if n_masses < 1:
        raise ConfigurationError("need at least one mass")
    n = n_masses
    K = np.zeros((n, n))
    C = np.zeros((n, n))
    for i in range(n):
        # ground spring/damper plus the link to the left neighbour (the wall for i = 0)
        K[i, i] += k_ground + k
        C[i, i] += c_ground + c
        if i > 0:
            K[i - 1, i - 1] += k
            C[i - 1, i - 1] += c
            K[i, i - 1] -= k
            K[i - 1, i] -= k
            C[i, i - 1] -= c
            C[i - 1, i] -= c
    Ac = np.block([[np.zeros((n, n)), np.eye(n)], [-K / mass, -C / mass]])
    Bc = np.zeros((2 * n, 1))
    Bc[n + actuator, 0] = 1.0 / mass
    return Ac, Bc


def _entry_model(A0, B0, name):
    """Linear model whose parameters are all entries of ``[A B]`` (row-major)."""
    n_x, n_u = B0.shape
    width = n_x + n_u
    n_theta = n_x * width
    cA = np.zeros((n_theta, n_x, n_x))
    cB = np.zeros((n_theta, n_x, n_u))
    for i in range(n_x):
        for j in range(n_x):
            cA[i * width + j, i, j] = 1.0
        for j in range(n_u):
            cB[i * width + n_x + j, i, j] = 1.0
    C = np.zeros((1, n_x))
    C[0, 0] = 1.0
    form = LinearForm(AffineMatrix(np.zeros((n_x, n_x)), cA), AffineMatrix(np.zeros((n_x, n_u)), cB),
                      np.eye(n_x), AffineMatrix(np.zeros(n_x)), AffineMatrix(C),
                      AffineMatrix(np.zeros((1, n_u))), AffineMatrix(np.zeros(1)))
    base = linear_model(form, n_theta, name=name)

    # same model with a fast regressor: G = kron(I, [x; u]')
    def G(x, u, w):
        return np.kron(np.eye(n_x), np.concatenate([x, u])[None, :])

    def f(x, u, theta, w):
        AB = np.asarray(theta, float).reshape(n_x, width)
        return AB[:, :n_x] @ x + AB[:, n_x:] @ u + w

    def jac_f(x, u, theta):
        AB = np.asarray(theta, float).reshape(n_x, width)
        return AB[:, :n_x], AB[:, n_x:]

    return ParametricModel(n_x, n_u, n_theta, n_x, 1, f, G, base.eval_h, linear_form=form,
                           jac_f=jac_f, jac_h=base.jac_h, name=name)


def build_msd_chain(n_masses=10, dt=0.5, true_scale=0.5, true_seed=11, mass=0.5, k=10.0, c=4.0,
                    k_ground=1.0, c_ground=0.5, actuator=0, force_gain=1.0, u_max=25.0, y_max=0.7, w_amp=1e-3,
                    v_amp=1e-3, x_box=3.0, Q=None, R=None, T=None, N=6, M=22, omega=5.0,
                    schedule=None) -> Benchmark:
    """Chain of masses with the actuator and the measured output on the first mass.

    The nominal physical parameters give the initial estimate; the true
    system scales every entry of the discrete ``[A B]`` by ``1 +- true_scale``
    with signs drawn from ``true_seed``.  The parameter set is the +-50% box.
    """
    Ac, Bc = chain_matrices(n_masses, mass, k, c, k_ground, c_ground, actuator)
    A0, B0 = discretize(Ac, force_gain * Bc, dt)
    n_x = A0.shape[0]
    theta0 = np.hstack([A0, B0]).ravel()
    half = 0.5 * np.abs(theta0)
    theta_set = ParameterSet.box(theta0 - half, theta0 + half)
    rng = np.random.default_rng(true_seed)
    signs = rng.choice([-1.0, 1.0], size=theta0.size)
    theta_true = theta0 * (1.0 + true_scale * signs)
    model = _entry_model(A0, B0, "msd_chain")
    # rigorous Lipschitz bound over the box: entrywise magnitudes dominate the spectral norm
    AB_abs = np.abs(theta_set.hi).reshape(n_x, n_x + 1)
    L_f = float(np.linalg.norm(np.hstack([AB_abs[:, :n_x], np.eye(n_x)]), 2))
    model = _with_lipschitz(model, L_f)
    Q = np.eye(n_x) if Q is None else np.asarray(Q, float)
    R = 1e-2 * np.eye(1) if R is None else np.asarray(R, float)
    T = 100.0 * np.eye(1) if T is None else np.asarray(T, float)
    D = np.zeros((1, n_x))
    D[0, 0] = 1.0
    cons = ConstraintSpec(np.array([-u_max]), np.array([u_max]), D, np.array([y_max]),
                          default_slack_weights(Q, 1))
    if schedule is None:
        schedule = [(0, 0.5), (100, 1.0), (200, -0.8), (300, 0.65)]
    return Benchmark(model, theta_set, cons, theta0, theta_true,
                     CostWeights(Q, R, T, omega, N, M), T, schedule, np.zeros(n_x),
                     (-np.broadcast_to(np.asarray(x_box, float), (n_x,)).copy(), np.broadcast_to(np.asarray(x_box, float), (n_x,)).copy()),
                     (np.full(n_x, -w_amp), np.full(n_x, w_amp)),
                     (np.full(n_x, -v_amp), np.full(n_x, v_amp)),
                     info={"dt": dt, "n_masses": n_masses})


def _with_lipschitz(model, L_f):
    from dataclasses import replace
    return replace(model, lipschitz_f=L_f)


def quadrotor_model(dt=0.025) -> ParametricModel:
    """Euler-discretized planar quadrotor; theta scales collective thrust and torque."""
    if dt <= 0:
        raise ConfigurationError("sampling time must be positive")
    g = GRAVITY

    def rhs0(x, w):
        p1, p2, phi, v1, v2, om = x
        s, c = np.sin(phi), np.cos(phi)
        return np.array([v1 * c - v2 * s, v1 * s + v2 * c, om,
                         v2 * om - g * s + c * w[0], -v1 * om - g * c - s * w[0], 0.0])

    def G(x, u, w):
        out = np.zeros((6, 2))
        out[4, 0] = dt * (u[0] + u[1])
        out[5, 1] = dt * (u[0] - u[1])
        return out

    def f(x, u, theta, w):
        x = np.asarray(x, float)
        return x + dt * rhs0(x, w) + G(x, u, w) @ np.asarray(theta, float)

    def jac_f(x, u, theta):
        p1, p2, phi, v1, v2, om = x
        s, c = np.sin(phi), np.cos(phi)
        J = np.zeros((6, 6))
        J[0, 2], J[0, 3], J[0, 4] = -v1 * s - v2 * c, c, -s
        J[1, 2], J[1, 3], J[1, 4] = v1 * c - v2 * s, s, c
        J[2, 5] = 1.0
        J[3, 2], J[3, 4], J[3, 5] = -g * c, om, v2
        J[4, 2], J[4, 3], J[4, 5] = g * s, -om, -v1
        Ax = np.eye(6) + dt * J
        Bu = np.zeros((6, 2))
        Bu[4] = dt * theta[0]
        Bu[5] = dt * theta[1] * np.array([1.0, -1.0])
        return Ax, Bu

    C = np.zeros((2, 6))
    C[0, 0] = C[1, 1] = 1.0

    def h(x, u, theta):
        return C @ np.asarray(x, float)

    def jac_h(x, u, theta):
        return C, np.zeros((2, 2))

    return ParametricModel(6, 2, 2, 1, 2, f, G, h, jac_f=jac_f, jac_h=jac_h,
                           name="planar_quadrotor")


def build_quadrotor(dt=0.025, theta_true=(1.5, 5.0), estimate_factor=(2.0, 0.5),
                    target=(3.0, 1.0), phi_max=0.5, v_max=3.0, wall_p1=3.3, floor_p2=-0.3,
                    u_margin=0.1, w_amp=0.0, v_amp=0.0, Q=None, R=None, T=None, N=5, M=10,
                    omega=1.0, theta_lo=(1.3, 2.0), theta_hi=(3.2, 12.0)) -> Benchmark:
    """Planar quadrotor whose initial estimate is ``theta_true * estimate_factor``.

    Velocity and angle bounds and the two obstacle half-spaces (a wall beyond
    the target and a floor) are configurable defaults.
    """
    model = quadrotor_model(dt)
    theta_true = np.asarray(theta_true, float)
    theta_hat0 = theta_true * np.broadcast_to(np.asarray(estimate_factor, float), (2,))
    theta_set = ParameterSet.box(theta_lo, theta_hi)
    theta_hat0 = theta_set.clip(theta_hat0)
    rows, d = [], []

    def row(i, s, bound):
        r = np.zeros(6)
        r[i] = s
        rows.append(r)
        d.append(bound)

    row(2, 1.0, phi_max)
    row(2, -1.0, phi_max)
    for i in (3, 4):
        row(i, 1.0, v_max)
        row(i, -1.0, v_max)
    row(0, 1.0, wall_p1)
    row(1, -1.0, -floor_p2)
    Q = np.diag([10.0, 10.0, 1.0, 1.0, 1.0, 0.1]) if Q is None else np.asarray(Q, float)
    R = 0.1 * np.eye(2) if R is None else np.asarray(R, float)
    T = 1e4 * np.eye(2) if T is None else np.asarray(T, float)
    cons = ConstraintSpec(np.array([-1.0, -1.0]), np.array([4.0, 4.0]), np.array(rows),
                          np.array(d), default_slack_weights(Q, len(d)), u_margin)
    x_box = np.array([5.0, 5.0, phi_max, v_max, v_max, 5.0])
    return Benchmark(model, theta_set, cons, theta_hat0, theta_true,
                     CostWeights(Q, R, T, omega, N, M), T, [(0, np.asarray(target, float))],
                     np.zeros(6), (-x_box, x_box), (np.array([-w_amp]), np.array([w_amp])),
                     (np.full(6, -v_amp), np.full(6, v_amp)), diverge_norm=1e2,
                     lqr_Q=Q, lqr_R=R, info={"dt": dt})


def build_custom(model, theta_true, theta_hat0=None, x0=None, schedule=None, state_box=None,
                 w_box=None, v_box=None, Q=None, R=None, T=None, N=5, M=20, omega=1.0,
                 diverge_norm=1e6) -> Benchmark:
    """Benchmark around a model document accepted by ``load_model``."""
    from ..model import load_model

    mdl, theta_set, cons = load_model(model)
    n_x, n_u, n_y = mdl.n_x, mdl.n_u, mdl.n_y
    theta_true = np.asarray(theta_true, float)
    if not theta_set.contains(theta_true):
        raise ConfigurationError("theta_true lies outside the parameter set")
    th0 = theta_set.center if theta_hat0 is None else np.asarray(theta_hat0, float)
    Q = np.eye(n_x) if Q is None else _matrix(Q, n_x)
    R = np.eye(n_u) if R is None else _matrix(R, n_u)
    T = 100.0 * np.eye(n_y) if T is None else _matrix(T, n_y)
    if schedule is None:
        schedule = [(0, np.zeros(n_y))]
    schedule = [(int(k), np.atleast_1d(np.asarray(y, float))) for k, y in schedule]
    if state_box is None:
        state_box = (np.full(n_x, -10.0), np.full(n_x, 10.0))
    zero = (np.zeros(n_x), np.zeros(n_x))
    w_box = zero if w_box is None else tuple(np.asarray(b, float) for b in w_box)
    v_box = zero if v_box is None else tuple(np.asarray(b, float) for b in v_box)
    x0 = np.zeros(n_x) if x0 is None else np.asarray(x0, float)
    return Benchmark(mdl, theta_set, cons, th0, theta_true, CostWeights(Q, R, T, omega, N, M), T,
                     schedule, x0, tuple(np.asarray(b, float) for b in state_box), w_box, v_box,
                     diverge_norm=diverge_norm, info={"name": mdl.name})


def _matrix(value, n):
    """A square matrix from a scalar, a diagonal or a full nested list."""
    a = np.asarray(value, float)
    if a.ndim == 0:
        return float(a) * np.eye(n)
    if a.ndim == 1:
        return np.diag(a)
    return a
