"""Closed-loop adaptive MPC: LMS adaptation plus certainty-equivalent tracking MPC."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .cost import CONSTANT_TAIL, CostWeights, LqrFeedback, TailPolicy, stage_cost
from .lms import LmsDiagnostics, LmsState, assumption4_margin, lms_update
from .model import ConfigurationError, ConstraintSpec, ParametricModel, TrackingTarget
from .solver.mpc import MpcProblem, MpcSolution, solve

log = logging.getLogger(__name__)

RESYNTH_THETA_TOL = 1e-3
RESYNTH_SETPOINT_TOL = 1e-2


class StabilizabilityError(RuntimeError):
    pass


def dare_gain(A, B, Q, R):
    """Stabilizing LQR gain ``K`` (``u = K x``) and Riccati solution ``P``."""
    try:
        P = sla.solve_discrete_are(A, B, Q, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise StabilizabilityError(f"not stabilizable at setpoint: {exc}") from exc
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    if np.max(np.abs(np.linalg.eigvals(A + B @ K))) >= 1.0:
        raise StabilizabilityError("not stabilizable at setpoint: closed loop not Schur")
    return K, P


def make_lqr_feedback(model: ParametricModel, theta, x_s, u_s, Q, R,
                      constraints: Optional[ConstraintSpec] = None) -> LqrFeedback:
    """LQR of the dynamics linearized at ``(x_s, u_s, theta)``, clipped to the input box."""
    A, B = model.jacobians(np.asarray(x_s, float), np.asarray(u_s, float), theta)
    K, _ = dare_gain(np.atleast_2d(A), np.atleast_2d(B), np.atleast_2d(Q), np.atleast_2d(R))
    if constraints is None:
        lo = np.full(model.n_u, -np.inf)
        hi = np.full(model.n_u, np.inf)
    else:
        lo, hi = constraints.u_lo, constraints.u_hi
    return LqrFeedback(K, lo, hi)


@dataclass
class StepRecord:
    step: int
    u_applied: np.ndarray
    J_star: float
    setpoint: tuple
    theta_hat: np.ndarray
    converged: bool
    kkt_residual: float
    solve_time: float
    slacks: np.ndarray
    sublevel_flag: Optional[bool] = None
    decrease_slack: Optional[float] = None
    asm4_margin: Optional[float] = None
    lms: Optional[LmsDiagnostics] = None


@dataclass
class AdaptiveController:
    """Certainty-equivalent adaptive MPC.

    ``mode='semiglobal'`` uses the constant-input tail; ``mode='regional'``
    uses an LQR feedback tail re-synthesized when the estimate or the
    artificial setpoint moves, and monitors the sublevel bound ``J_bar``.
    ``adapt=False`` freezes the estimate.
    """

    model: ParametricModel
    lms: LmsState
    weights: CostWeights
    constraints: ConstraintSpec
    target: TrackingTarget
    mode: str = "semiglobal"
    J_bar: Optional[float] = None
    lqr_Q: Optional[np.ndarray] = None
    lqr_R: Optional[np.ndarray] = None
    adapt: bool = True
    decrease_constants: Optional[tuple] = None  # trial (rho_V, c_V)
    method: str = "auto"
    max_iter: int = 50
    last_solution: Optional[MpcSolution] = None
    tail: TailPolicy = CONSTANT_TAIL
    k: int = 0
    asm4_violations: int = 0
    _prev: Optional[tuple] = field(default=None, repr=False)
    _synth: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("semiglobal", "regional"):
            raise ConfigurationError(f"unknown controller mode {self.mode!r}")
        if self.mode == "regional" and (self.J_bar is None or self.J_bar <= 0):
            raise ConfigurationError("regional mode needs J_bar > 0")
        if not self.lms.theta_set.contains(self.lms.theta_hat):
            raise ConfigurationError("initial estimate lies outside the parameter set")

    @property
    def theta_hat(self):
        return self.lms.theta_hat

    def _update_tail(self, x_s, u_s):
        th = self.lms.theta_hat
        if self._synth is not None:
            th0, xs0, us0 = self._synth
            d = x_s - xs0
            moved = float(np.sqrt(d @ self.weights.Q @ d))
            if np.linalg.norm(th - th0) <= RESYNTH_THETA_TOL and moved <= RESYNTH_SETPOINT_TOL:
                return
        Q = self.weights.Q if self.lqr_Q is None else self.lqr_Q
        R = self.weights.R if self.lqr_R is None else self.lqr_R
        fb = make_lqr_feedback(self.model, th, x_s, u_s, Q, R, self.constraints)
        self.tail = TailPolicy("feedback", fb)
        self._synth = (th.copy(), np.array(x_s, float), np.array(u_s, float))

    def _initial_setpoint(self):
        from .model import optimal_setpoint

        return optimal_setpoint(self.model, self.lms.theta_hat, self.target, self.constraints,
                                regional=self.mode == "regional")

    def step(self, x_hat):
        """Consume the measurement, adapt, solve and return ``(u, record)``."""
        x_hat = np.asarray(x_hat, dtype=float)
        asm4 = None
        pred_err = None
        if self._prev is not None:
            x_prev, u_prev, _ = self._prev
            Phi = self.model.G(x_prev, u_prev)
            asm4 = assumption4_margin(self.lms.gamma, Phi)
            if asm4 < -1e-12:
                self.asm4_violations += 1
                (log.warning if self.asm4_violations == 1 else log.debug)(
                    "step %d: gain assumption violated (margin %.3e)", self.k, asm4)
            e = x_hat - self.model.f(x_prev, u_prev, self.lms.theta_hat)
            pred_err = float(e @ e)
            if self.adapt:
                self.lms = lms_update(self.lms, self.model, x_prev, u_prev, x_hat)
        if self.mode == "regional":
            if self.last_solution is not None:
                x_s, u_s, _ = self.last_solution.setpoint
            else:
                x_s, u_s, _ = self._initial_setpoint()
            self._update_tail(x_s, u_s)
        problem = MpcProblem(self.model, self.lms.theta_hat, x_hat, self.weights,
                             self.constraints, self.target, self.tail,
                             regional=self.mode == "regional", warm_start=self.last_solution,
                             max_iter=self.max_iter)
        sol = solve(problem, method=self.method)
        u = np.clip(sol.u0, self.constraints.u_lo, self.constraints.u_hi)
        rec = StepRecord(self.k, u, sol.J_star, sol.setpoint, self.lms.theta_hat.copy(),
                         sol.converged, sol.kkt_residual, sol.solve_time, sol.slacks,
                         asm4_margin=asm4)
        if self.mode == "regional":
            rec.sublevel_flag = bool(sol.J_star <= self.J_bar)
        if self.decrease_constants is not None and self._prev is not None:
            rho_v, c_v = self.decrease_constants
            rec.decrease_slack = float(sol.J_star - rho_v * self._prev[2] - c_v * pred_err)
        self.last_solution = sol
        self._prev = (x_hat, u, sol.J_star)
        self.k += 1
        return u, rec


def nominal_decrease_check(controller: AdaptiveController, model: ParametricModel, theta_true,
                           x, alpha: float):
    """``J*(x+) - J*(x) + alpha * l(x, u*, x_s*, u_s*)`` with exact parameters and no noise.

    Returns ``(slack, J*(x), x+)``.  The controller itself is not modified.
    """
    theta_true = np.asarray(theta_true, dtype=float)
    x = np.asarray(x, dtype=float)
    tail = controller.tail
    base = MpcProblem(model, theta_true, x, controller.weights, controller.constraints,
                      controller.target, tail, regional=controller.mode == "regional",
                      warm_start=controller.last_solution, max_iter=controller.max_iter)
    s0 = solve(base, method=controller.method)
    x_s, u_s, _ = s0.setpoint
    x_next = model.f(x, s0.u0, theta_true)
    s1 = solve(replace(base, x_hat=x_next, warm_start=s0), method=controller.method)
    ell = stage_cost(x, s0.u0, x_s, u_s, controller.weights, controller.constraints)
    return float(s1.J_star - s0.J_star + alpha * ell), s0.J_star, x_next
