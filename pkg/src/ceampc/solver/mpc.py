"""Tracking MPC with artificial setpoint, soft state constraints and finite-tail cost.

Decision vector ``z = [u_0..u_{N-1}, x_s, u_s, y_s, xi]`` where ``xi`` holds
one nonnegative slack per state-constraint row for every predicted state
after the measured one.  States are eliminated by forward simulation and the
objective is written as a sum of squared residuals, so the same transcription
serves the linear QP fast path (one exact Gauss-Newton step) and the SQP.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..cost import CONSTANT_TAIL, CostWeights, LqrFeedback, TailPolicy
from ..model import ConstraintSpec, ParametricModel, TrackingTarget, optimal_setpoint
from .qp import QPError
from .sqp import LeastSquaresNLP, sqp_solve

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


@dataclass
class MpcProblem:
    model: ParametricModel
    theta_hat: np.ndarray
    x_hat: np.ndarray
    weights: CostWeights
    constraints: ConstraintSpec
    target: TrackingTarget
    tail: TailPolicy = CONSTANT_TAIL
    regional: bool = False
    warm_start: Optional["MpcSolution"] = None
    max_iter: int = 50


@dataclass
class MpcSolution:
    u_star: np.ndarray  # (N, n_u)
    setpoint: tuple  # (x_s, u_s, y_s)
    slacks: np.ndarray  # (N + M - 1, r)
    J_star: float
    converged: bool
    iterations: int
    kkt_residual: float
    solve_time: float
    z: np.ndarray = field(repr=False, default=None)

    @property
    def u0(self):
        return self.u_star[0]


class _Layout:
    def __init__(self, model, weights, constraints):
        self.N, self.M = weights.N, weights.M
        self.nx, self.nu, self.ny = model.n_x, model.n_u, model.n_y
        self.r = constraints.r
        self.n_states = self.N + self.M  # penalized states x_0 .. x_{N+M-1}
        self.n_xi = max(self.n_states - 1, 0) * self.r
        o = self.N * self.nu
        self.xs = slice(o, o + self.nx)
        self.us = slice(o + self.nx, o + self.nx + self.nu)
        self.ys = slice(o + self.nx + self.nu, o + self.nx + self.nu + self.ny)
        self.xi0 = o + self.nx + self.nu + self.ny
        self.n = self.xi0 + self.n_xi

    def u(self, k):
        return slice(k * self.nu, (k + 1) * self.nu)

    def xi(self, k):
        # slack block of predicted state k >= 1
        s = self.xi0 + (k - 1) * self.r
        return slice(s, s + self.r)


def _dynamics(model, theta):
    """(f, jac) closures at fixed theta; linear models use their matrices directly."""
    if model.is_linear:
        A, B, _, e, C, D, fo = model.linear_form.matrices(theta)

        def f(x, u):
            return A @ x + B @ u + e

        def jac(x, u):
            return A, B

        def h(x, u):
            return C @ x + D @ u + fo

        def hjac(x, u):
            return C, D
    else:
        def f(x, u):
            return model.f(x, u, theta)

        def jac(x, u):
            return model.jacobians(x, u, theta)

        def h(x, u):
            return model.h(x, u, theta)

        def hjac(x, u):
            return model.output_jacobians(x, u, theta)
    return f, jac, h, hjac


def _feedback_jacobian(tail, x, theta, x_s, u_s, eps=1e-6):
    fb = tail.feedback
    if hasattr(fb, "jacobian"):
        return fb.jacobian(x, theta, x_s, u_s)
    u0 = fb(x, theta, x_s, u_s)
    cols = []
    for arg in range(3):
        base = [x, x_s, u_s][arg]
        J = np.empty((u0.size, base.size))
        for i in range(base.size):
            d = np.zeros_like(base)
            d[i] = eps * (1.0 + np.linalg.norm(base))
            args_p = [x, x_s, u_s]
            args_m = [x, x_s, u_s]
            args_p[arg] = base + d
            args_m[arg] = base - d
            J[:, i] = (fb(args_p[0], theta, args_p[1], args_p[2])
                       - fb(args_m[0], theta, args_m[1], args_m[2])) / (2 * d[i])
        cols.append(J)
    return tuple(cols)


def build_nlp(problem: MpcProblem):
    """Residual/constraint evaluator of the MPC problem and its variable layout."""
    model, w, cons, tgt = problem.model, problem.weights, problem.constraints, problem.target
    theta = np.asarray(problem.theta_hat, dtype=float)
    x_hat = np.asarray(problem.x_hat, dtype=float)
    L = _Layout(model, w, cons)
    nx, nu, ny, r, N, M = L.nx, L.nu, L.ny, L.r, L.N, L.M
    f, jac, h, hjac = _dynamics(model, theta)
    Qs = np.linalg.cholesky(w.Q).T
    Rs = np.linalg.cholesky(w.R).T
    Ts = np.linalg.cholesky(w.T).T
    qs = np.sqrt(cons.q_xi)
    sw = np.sqrt(w.omega)
    Dx, d = cons.D, cons.d
    feedback = problem.tail.kind == "feedback"
    n_res = (N * (nx + nu + r) + M * (nx + (nu if feedback else 0) + r) + ny)
    n_in = r + max(L.n_states - 1, 0) * r
    eye_nx = np.eye(nx)

    def evaluate(z):
        x_s, u_s, y_s = z[L.xs], z[L.us], z[L.ys]
        res = np.empty(n_res)
        Jr = np.zeros((n_res, L.n))
        ci = np.empty(n_in)
        Ji = np.zeros((n_in, L.n))
        x = x_hat
        S = np.zeros((nx, L.n))
        row = 0
        irow = r
        for k in range(N + M):
            tail = k >= N
            scale = sw if tail else 1.0
            if not tail:
                u = z[L.u(k)]
                dU = np.zeros((nu, L.n))
                dU[:, L.u(k)] = np.eye(nu)
            elif feedback:
                u = problem.tail.input(x, theta, x_s, u_s)
                Kx, Kxs, Kus = _feedback_jacobian(problem.tail, x, theta, x_s, u_s)
                dU = Kx @ S
                dU[:, L.xs] += Kxs
                dU[:, L.us] += Kus
            else:
                u = u_s
                dU = np.zeros((nu, L.n))
                dU[:, L.us] = np.eye(nu)
            # state tracking
            res[row:row + nx] = scale * Qs @ (x - x_s)
            Jr[row:row + nx] = scale * Qs @ S
            Jr[row:row + nx, L.xs] -= scale * Qs
            row += nx
            # input tracking; vanishes identically along a constant-input tail
            if not tail or feedback:
                res[row:row + nu] = scale * Rs @ (u - u_s)
                Jr[row:row + nu] = scale * Rs @ dU
                Jr[row:row + nu, L.us] -= scale * Rs
                row += nu
            # soft state constraints
            if k == 0:
                res[row:row + r] = qs * np.maximum(Dx @ x - d, 0.0)
            else:
                xi = z[L.xi(k)]
                res[row:row + r] = scale * qs * xi
                Jr[row:row + r, L.xi(k)] = scale * np.diag(qs)
                ci[irow:irow + r] = Dx @ x - d - xi
                Ji[irow:irow + r] = Dx @ S
                Ji[irow:irow + r, L.xi(k)] -= np.eye(r)
                irow += r
            row += r
            if k < N + M - 1:
                A, B = jac(x, u)
                x = f(x, u)
                S = A @ S + B @ dU
        res[row:row + ny] = Ts @ (y_s - tgt.y_d)
        Jr[row:row + ny, L.ys] = Ts
        row += ny
        assert row == n_res
        # steady-state manifold
        As, Bs = jac(x_s, u_s)
        Cs, Ds = hjac(x_s, u_s)
        ce = np.concatenate([f(x_s, u_s) - x_s, h(x_s, u_s) - y_s])
        Je = np.zeros((nx + ny, L.n))
        Je[:nx, L.xs] = As - eye_nx
        Je[:nx, L.us] = Bs
        Je[nx:, L.xs] = Cs
        Je[nx:, L.us] = Ds
        Je[nx:, L.ys] = -np.eye(ny)
        # setpoint inside X (hard)
        ci[:r] = Dx @ x_s - d
        Ji[:r] = 0.0
        Ji[:r, L.xs] = Dx
        return res, Jr, ce, Je, ci, Ji

    u_lo, u_hi = cons.u_lo, cons.u_hi
    us_lo, us_hi = cons.steady_input_box(problem.regional)
    lb = np.full(L.n, -np.inf)
    ub = np.full(L.n, np.inf)
    for k in range(N):
        lb[L.u(k)], ub[L.u(k)] = u_lo, u_hi
    lb[L.us], ub[L.us] = us_lo, us_hi
    lb[L.xi0:] = 0.0
    return LeastSquaresNLP(evaluate, L.n, lb, ub), L


def _slacks_for(z, L, problem):
    """Exact slacks max(Dx - d, 0) along the prediction encoded by ``z``."""
    model, cons = problem.model, problem.constraints
    theta = problem.theta_hat
    f, *_ = _dynamics(model, theta)
    x_s, u_s = z[L.xs], z[L.us]
    x = np.asarray(problem.x_hat, float)
    for k in range(L.N + L.M):
        if k >= 1:
            z[L.xi(k)] = np.maximum(cons.D @ x - cons.d, 0.0)
        u = z[L.u(k)] if k < L.N else problem.tail.input(x, theta, x_s, u_s)
        x = f(x, u)
    return z


def initial_guess(problem: MpcProblem, L: _Layout):
    z = np.zeros(L.n)
    ws = problem.warm_start
    if ws is not None and ws.u_star.shape == (L.N, L.nu):
        x_s, u_s, y_s = ws.setpoint
        u_prev = ws.u_star
        z[:L.N * L.nu] = np.vstack([u_prev[1:], u_s[None, :]]).ravel()
    else:
        try:
            x_s, u_s, y_s = optimal_setpoint(problem.model, problem.theta_hat, problem.target,
                                             problem.constraints, regional=problem.regional)
        except Exception:  # noqa: BLE001 - cold start falls back to mid-box
            lo, hi = problem.constraints.steady_input_box(problem.regional)
            u_s = 0.5 * (lo + hi)
            x_s = np.asarray(problem.x_hat, float)
            y_s = problem.model.h(x_s, u_s, problem.theta_hat)
        z[:L.N * L.nu] = np.tile(u_s, L.N)
    z[L.xs], z[L.us], z[L.ys] = x_s, u_s, y_s
    return _slacks_for(z, L, problem)


def solve(problem: MpcProblem, method="auto") -> MpcSolution:
    """Solve the tracking MPC problem; ``method`` is ``auto``, ``qp`` or ``sqp``."""
    t0 = time.perf_counter()
    nlp, L = build_nlp(problem)
    z0 = initial_guess(problem, L)
    if method == "auto":
        method = ("qp" if problem.model.is_linear and problem.tail.kind == "constant_input"
                  else "sqp")
    try:
        if method == "qp":
            sol = sqp_solve(nlp, z0, exact=True)
        else:
            sol = sqp_solve(nlp, z0, max_iter=problem.max_iter)
    except QPError as exc:
        raise SolverError(f"MPC subproblem failed: {exc}") from exc
    z = sol.z
    if not sol.converged:
        log.warning("MPC solve not converged (kkt=%.2e, it=%d)", sol.kkt_residual,
                    sol.iterations)
    u_star = z[:L.N * L.nu].reshape(L.N, L.nu)
    setpoint = (z[L.xs].copy(), z[L.us].copy(), z[L.ys].copy())
    slacks = z[L.xi0:].reshape(max(L.n_states - 1, 0), L.r)
    return MpcSolution(u_star, setpoint, slacks, sol.cost, sol.converged, sol.iterations,
                       sol.kkt_residual, time.perf_counter() - t0, z)


def lqr_tail(model: ParametricModel, theta, x_s, u_s, Q, R, constraints: ConstraintSpec):
    """Feedback tail from the LQR of the dynamics linearized at the setpoint."""
    from ..controller import make_lqr_feedback

    return TailPolicy("feedback", make_lqr_feedback(model, theta, x_s, u_s, Q, R,
                                                    constraints))
