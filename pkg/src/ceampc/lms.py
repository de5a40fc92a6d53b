"""Projected LMS parameter adaptation."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import ConfigurationError, ParameterSet, ParametricModel

log = logging.getLogger(__name__)

ABS_TOL = 1e-9
REL_TOL = 1e-9

DIAGNOSTIC_COLUMNS = ("step", "v_theta_err", "v_theta_step", "ineq5a_slack", "ineq5b_slack")


@dataclass(frozen=True)
class LmsState:
    theta_hat: np.ndarray
    gamma: np.ndarray
    theta_set: ParameterSet

    def __post_init__(self):
        th = np.asarray(self.theta_hat, dtype=float).ravel()
        G = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        if G.shape != (th.size, th.size):
            raise ConfigurationError(f"gain has shape {G.shape}, expected {(th.size,) * 2}")
        if not np.allclose(G, G.T) or np.min(np.linalg.eigvalsh(G)) <= 0:
            raise ConfigurationError("LMS gain must be symmetric positive definite")
        object.__setattr__(self, "theta_hat", th)
        object.__setattr__(self, "gamma", G)
        object.__setattr__(self, "_diagonal",
                           np.count_nonzero(G - np.diag(np.diag(G))) == 0)

    def with_estimate(self, theta_hat):
        """Copy with a new estimate; the gain was validated at construction."""
        new = object.__new__(LmsState)
        object.__setattr__(new, "theta_hat", np.asarray(theta_hat, dtype=float).ravel())
        object.__setattr__(new, "gamma", self.gamma)
        object.__setattr__(new, "theta_set", self.theta_set)
        object.__setattr__(new, "_diagonal", self._diagonal)
        return new

    @property
    def gamma_is_diagonal(self):
        return self._diagonal

    def v_theta(self, dtheta):
        """``||dtheta||^2`` in the inverse-gain norm."""
        dtheta = np.asarray(dtheta, dtype=float)
        if self.gamma_is_diagonal:
            return float(np.sum(dtheta**2 / np.diag(self.gamma)))
        return float(dtheta @ np.linalg.solve(self.gamma, dtheta))


@dataclass(frozen=True)
class LmsDiagnostics:
    x_tilde: np.ndarray
    w_tilde: np.ndarray
    v_theta_err: float
    v_theta_err_next: float
    v_theta_step: float
    c_theta: float
    ineq5a_slack: float
    ineq5b_slack: float
    ineq5c_slack: Optional[float]
    ineq5a: bool
    ineq5b: bool
    ineq5c: Optional[bool]

    def row(self, step):
        return (step, self.v_theta_err, self.v_theta_step, self.ineq5a_slack, self.ineq5b_slack)


def project_weighted(theta_tilde, gamma, theta_set: ParameterSet, diagonal=None):
    """Minimize ``||theta - theta_tilde||^2`` in the inverse-gain norm over the set."""
    theta_tilde = np.asarray(theta_tilde, dtype=float).ravel()
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    if diagonal is None:
        diagonal = np.count_nonzero(gamma - np.diag(np.diag(gamma))) == 0
    if theta_set.kind == "box":
        if diagonal:
            return np.clip(theta_tilde, theta_set.lo, theta_set.hi)
        if theta_set.contains(theta_tilde, tol=0.0):
            return theta_tilde.copy()
    elif theta_set.contains(theta_tilde, tol=0.0):
        return theta_tilde.copy()

    from .solver.qp import QPError, solve_qp

    W = np.linalg.inv(gamma)
    W = 0.5 * (W + W.T)
    try:
        if theta_set.kind == "box":
            sol = solve_qp(W, -W @ theta_tilde, lb=theta_set.lo, ub=theta_set.hi)
        else:
            sol = solve_qp(W, -W @ theta_tilde, A_in=theta_set.H, b_in=theta_set.b)
    except QPError as exc:  # only reachable for an empty set
        raise RuntimeError(f"weighted projection failed: {exc}") from exc
    if theta_set.kind == "box":
        return np.clip(sol.z, theta_set.lo, theta_set.hi)
    return sol.z


def lms_update(state: LmsState, model: ParametricModel, x_hat_k, u_k, x_hat_next) -> LmsState:
    """One projected LMS step from the measured transition ``(x_hat_k, u_k) -> x_hat_next``."""
    theta_tilde = _unprojected(state, model, x_hat_k, u_k, x_hat_next)
    new = project_weighted(theta_tilde, state.gamma, state.theta_set, state.gamma_is_diagonal)
    return state.with_estimate(new)


def _unprojected(state, model, x_hat_k, u_k, x_hat_next):
    x_hat_k = np.asarray(x_hat_k, dtype=float)
    u_k = np.asarray(u_k, dtype=float)
    Phi = model.G(x_hat_k, u_k)
    pred = model.f(x_hat_k, u_k, state.theta_hat)
    return state.theta_hat + state.gamma @ (Phi.T @ (np.asarray(x_hat_next, float) - pred))


def c_theta(gamma, theta_set: ParameterSet, diagonal=None):
    """Diameter of the parameter set in the inverse-gain norm.

    Exact for boxes with diagonal gain and for boxes of dimension up to 16
    (vertex enumeration); otherwise the bounding-box upper bound
    ``sqrt(lambda_max(gamma^-1)) * ||hi - lo||``.
    """
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    width = theta_set.hi - theta_set.lo
    if diagonal is None:
        diagonal = np.count_nonzero(gamma - np.diag(np.diag(gamma))) == 0
    if theta_set.kind == "box" and diagonal:
        return float(np.sqrt(np.sum(width**2 / np.diag(gamma))))
    W = np.linalg.inv(gamma)
    if theta_set.kind == "box" and width.size <= 16:
        # the maximum of a convex quadratic over the difference box sits at a vertex
        best = 0.0
        for signs in itertools.product((-1.0, 1.0), repeat=width.size):
            d = np.asarray(signs) * width
            best = max(best, float(d @ W @ d))
        return float(np.sqrt(best))
    return float(np.sqrt(np.max(np.linalg.eigvalsh(W))) * np.linalg.norm(width))


def design_gain(model: ParametricModel, state_box, constraints, noise_box=None, n_samples=2000,
                rng=None, safety=1.2):
    """Scalar gain ``mu * I`` with ``mu = 1 / (safety * sup ||Phi||^2)`` over sampled points.

    ``state_box`` and ``noise_box`` are ``(lo, hi)`` pairs; the noise is added to
    the sampled state before the regressor is evaluated.  Samples include box
    vertices because the regressor norm is often largest there.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x_lo, x_hi = (np.asarray(b, dtype=float) for b in state_box)
    u_lo, u_hi = constraints.u_lo, constraints.u_hi
    if noise_box is None:
        v_lo = v_hi = np.zeros_like(x_lo)
    else:
        v_lo, v_hi = (np.asarray(b, dtype=float) for b in noise_box)
    if np.any(x_lo > x_hi) or np.any(v_lo > v_hi) or not np.all(np.isfinite([x_lo, x_hi])):
        raise ConfigurationError("state and noise boxes must be non-empty and bounded")
    lo = np.concatenate([x_lo + v_lo, u_lo])
    hi = np.concatenate([x_hi + v_hi, u_hi])
    n_x = x_lo.size
    pts = []
    if lo.size <= 10:
        pts.extend(np.array(c) for c in itertools.product(*zip(lo, hi)))
    half = n_samples // 2
    pts.extend(np.where(rng.random((half, lo.size)) < 0.5, lo, hi))
    pts.extend(rng.uniform(lo, hi, size=(n_samples - half, lo.size)))
    sup = 0.0
    for p in pts:
        sup = max(sup, float(np.linalg.norm(model.G(p[:n_x], p[n_x:]), 2)))
    if sup == 0.0:
        log.warning("regressor vanishes on every sample; using identity gain")
        return np.eye(model.n_theta)
    return np.eye(model.n_theta) / (safety * sup**2)


def assumption4_margin(gamma, Phi):
    """``1 - lambda_max(Phi gamma Phi')``; negative when the gain is too large."""
    M = Phi @ gamma @ Phi.T
    return float(1.0 - np.max(np.linalg.eigvalsh(0.5 * (M + M.T)), initial=0.0))


def _holds(lhs, rhs):
    return bool(lhs <= rhs + ABS_TOL + REL_TOL * max(abs(lhs), abs(rhs)))


def lms_diagnostics(state: LmsState, model: ParametricModel, theta_true, x_true_k, w_k, v_k,
                    v_next, u_k, theta_next=None, lipschitz_f=None) -> LmsDiagnostics:
    """Quantities of the LMS convergence bound at one simulated step.

    ``theta_next`` is the true parameter at the following step (defaults to
    ``theta_true``); ``lipschitz_f`` overrides the model constant for the
    noise bound, which is skipped when neither is available.
    """
    theta = np.asarray(theta_true, dtype=float)
    theta_next = theta if theta_next is None else np.asarray(theta_next, dtype=float)
    x = np.asarray(x_true_k, dtype=float)
    w = np.asarray(w_k, dtype=float)
    v = np.asarray(v_k, dtype=float)
    v1 = np.asarray(v_next, dtype=float)
    u = np.asarray(u_k, dtype=float)
    x_hat = x + v
    x_hat_next = model.f(x, u, theta, w) + v1
    new = lms_update(state, model, x_hat, u, x_hat_next)

    Phi = model.G(x_hat, u)
    x_tilde = Phi @ (theta - state.theta_hat)
    w_tilde = x_hat_next - model.f(x_hat, u, theta)
    cth = c_theta(state.gamma, state.theta_set, state.gamma_is_diagonal)
    v_err = state.v_theta(state.theta_hat - theta)
    v_err_next = state.v_theta(new.theta_hat - theta_next)
    v_step = state.v_theta(new.theta_hat - state.theta_hat)
    v_drift = state.v_theta(theta_next - theta)

    lhs_a = v_err_next - v_err
    rhs_a = -float(x_tilde @ x_tilde) + float(w_tilde @ w_tilde) + cth * np.sqrt(v_drift)
    e = x_tilde + w_tilde
    rhs_b = float(e @ e)
    L = model.lipschitz_f if lipschitz_f is None else lipschitz_f
    if L is not None:
        rhs_c = L * (np.linalg.norm(w) + np.linalg.norm(v)) + np.linalg.norm(v1)
        lhs_c = float(np.linalg.norm(w_tilde))
        slack_c, ok_c = float(rhs_c - lhs_c), _holds(lhs_c, rhs_c)
    else:
        slack_c = ok_c = None
    return LmsDiagnostics(x_tilde, w_tilde, v_err, v_err_next, v_step, cth,
                          float(rhs_a - lhs_a), float(rhs_b - v_step), slack_c,
                          _holds(lhs_a, rhs_a), _holds(v_step, rhs_b), ok_c)
