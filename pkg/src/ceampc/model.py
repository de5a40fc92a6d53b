"""Uncertain discrete-time models that are linear in their parameters.

A model is a bundle of evaluators ``f(x, u, theta, w)``, the regressor
``G(x, u, w)`` and the output map ``h(x, u, theta)``, plus an optional
affine-in-theta linear form that enables the QP fast path.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linprog


class ConfigurationError(ValueError):
    """Inconsistent dimensions or invalid model data."""


class SetpointError(RuntimeError):
    """The steady-state optimization did not converge."""

    def __init__(self, msg, residuals=None):
        super().__init__(msg)
        self.residuals = residuals


@dataclass(frozen=True)
class AffineMatrix:
    """Matrix ``M(theta) = base + sum_i theta_i * coeffs[i]``."""

    base: np.ndarray
    coeffs: Optional[np.ndarray] = None  # shape (n_theta, *base.shape)

    def __call__(self, theta):
        if self.coeffs is None or self.coeffs.shape[0] == 0:
            return self.base
        return self.base + np.tensordot(np.asarray(theta, float), self.coeffs, axes=1)

    @classmethod
    def constant(cls, m):
        return cls(np.asarray(m, dtype=float))


@dataclass(frozen=True)
class LinearForm:
    """``x+ = A x + B u + E w + e``,  ``y = C x + D u + f``; all but E affine in theta."""

    A: AffineMatrix
    B: AffineMatrix
    E: np.ndarray
    e: AffineMatrix
    C: AffineMatrix
    D: AffineMatrix
    f: AffineMatrix

    def matrices(self, theta):
        return (self.A(theta), self.B(theta), self.E, self.e(theta),
                self.C(theta), self.D(theta), self.f(theta))


@dataclass(frozen=True)
class ParametricModel:
    n_x: int
    n_u: int
    n_theta: int
    n_w: int
    n_y: int
    eval_f: Callable
    eval_G: Callable
    eval_h: Callable
    linear_form: Optional[LinearForm] = None
    jac_f: Optional[Callable] = None  # (x, u, theta) -> (df/dx, df/du) at w = 0
    jac_h: Optional[Callable] = None  # (x, u, theta) -> (dh/dx, dh/du)
    lipschitz_f: Optional[float] = None
    lipschitz_h: Optional[float] = None
    name: str = "custom"

    def f(self, x, u, theta, w=None):
        if w is None:
            w = np.zeros(self.n_w)
        return np.asarray(self.eval_f(x, u, theta, w), dtype=float)

    def G(self, x, u, w=None):
        if w is None:
            w = np.zeros(self.n_w)
        return np.asarray(self.eval_G(x, u, w), dtype=float).reshape(self.n_x, self.n_theta)

    def h(self, x, u, theta):
        return np.asarray(self.eval_h(x, u, theta), dtype=float).reshape(self.n_y)

    def jacobians(self, x, u, theta):
        """(df/dx, df/du) at w = 0; central differences when no analytic form exists."""
        if self.jac_f is not None:
            return self.jac_f(x, u, theta)
        return _fd_jac(lambda xx, uu: self.f(xx, uu, theta), x, u)

    def output_jacobians(self, x, u, theta):
        if self.jac_h is not None:
            return self.jac_h(x, u, theta)
        return _fd_jac(lambda xx, uu: self.h(xx, uu, theta), x, u)

    @property
    def is_linear(self):
        return self.linear_form is not None

    def check_dims(self, x=None, u=None, theta=None):
        for name, v, n in (("state", x, self.n_x), ("input", u, self.n_u),
                           ("parameter", theta, self.n_theta)):
            if v is not None and np.size(v) != n:
                raise ConfigurationError(f"{name} has size {np.size(v)}, expected {n}")


def _fd_jac(fun, x, u):
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    hx = 1e-6 * (1.0 + np.linalg.norm(x))
    hu = 1e-6 * (1.0 + np.linalg.norm(u))
    f0 = np.asarray(fun(x, u))
    Jx = np.empty((f0.size, x.size))
    Ju = np.empty((f0.size, u.size))
    for i in range(x.size):
        d = np.zeros_like(x)
        d[i] = hx
        Jx[:, i] = (fun(x + d, u) - fun(x - d, u)) / (2 * hx)
    for i in range(u.size):
        d = np.zeros_like(u)
        d[i] = hu
        Ju[:, i] = (fun(x, u + d) - fun(x, u - d)) / (2 * hu)
    return Jx, Ju


def linear_model(form: LinearForm, n_theta: int, name="linear", lipschitz_f=None,
                 lipschitz_h=None) -> ParametricModel:
    """Build the evaluators of a model from its affine-in-theta linear form."""
    B0 = form.B.base
    n_x, n_u = B0.shape
    n_w = form.E.shape[1]
    n_y = form.C.base.shape[0]
    cA, cB, ce = form.A.coeffs, form.B.coeffs, form.e.coeffs

    def f(x, u, theta, w):
        A, B, E, e, *_ = form.matrices(theta)
        return A @ x + B @ u + E @ w + e

    def G(x, u, w):
        out = np.zeros((n_x, n_theta))
        if cA is not None:
            out += np.einsum("pij,j->ip", cA, x)
        if cB is not None:
            out += np.einsum("pij,j->ip", cB, u)
        if ce is not None:
            out += ce.T
        return out

    def h(x, u, theta):
        C, D, fo = form.C(theta), form.D(theta), form.f(theta)
        return C @ x + D @ u + fo

    def jac_f(x, u, theta):
        return form.A(theta), form.B(theta)

    def jac_h(x, u, theta):
        return form.C(theta), form.D(theta)

    return ParametricModel(n_x, n_u, n_theta, n_w, n_y, f, G, h, linear_form=form,
                           jac_f=jac_f, jac_h=jac_h, lipschitz_f=lipschitz_f,
                           lipschitz_h=lipschitz_h, name=name)


@dataclass(frozen=True)
class ParameterSet:
    """Known convex set containing the true parameters: a box or a bounded polytope."""

    kind: str
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    H: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None

    @classmethod
    def box(cls, lo, hi):
        lo = np.asarray(lo, dtype=float).ravel()
        hi = np.asarray(hi, dtype=float).ravel()
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ConfigurationError("parameter box needs lo <= hi")
        return cls("box", lo=lo, hi=hi)

    @classmethod
    def polytope(cls, H, b):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        b = np.asarray(b, dtype=float).ravel()
        n = H.shape[1]
        lo, hi = np.empty(n), np.empty(n)
        for i in range(n):
            for sgn, store in ((1.0, lo), (-1.0, hi)):
                c = np.zeros(n)
                c[i] = sgn
                res = linprog(c, A_ub=H, b_ub=b, bounds=[(None, None)] * n, method="highs")
                if res.status == 2:
                    raise ConfigurationError("parameter polytope is empty")
                if res.status == 3:
                    raise ConfigurationError("parameter polytope is unbounded")
                store[i] = sgn * res.fun
        return cls("polytope", lo=lo, hi=hi, H=H, b=b)

    @property
    def n_theta(self):
        return self.lo.size

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    def contains(self, theta, tol=1e-9):
        theta = np.asarray(theta, dtype=float)
        if self.kind == "box":
            return bool(np.all(theta >= self.lo - tol) and np.all(theta <= self.hi + tol))
        return bool(np.all(self.H @ theta <= self.b + tol))

    def clip(self, theta):
        """Euclidean projection onto the set."""
        if self.kind == "box":
            return np.clip(theta, self.lo, self.hi)
        from .lms import project_weighted
        return project_weighted(theta, np.eye(self.n_theta), self)

    def sample(self, rng, n, vertices=False):
        """Uniform samples (rejection for polytopes) or random box vertices."""
        out = []
        while len(out) < n:
            if vertices:
                t = np.where(rng.random(self.n_theta) < 0.5, self.lo, self.hi)
            else:
                t = rng.uniform(self.lo, self.hi)
            if self.contains(t):
                out.append(t)
        return np.array(out)


@dataclass(frozen=True)
class ConstraintSpec:
    """Input box, polytopic soft state constraints ``D x <= d`` and their penalty weights."""

    u_lo: np.ndarray
    u_hi: np.ndarray
    D: np.ndarray
    d: np.ndarray
    q_xi: np.ndarray
    u_margin: float = 0.0

    def __post_init__(self):
        for name in ("u_lo", "u_hi", "d", "q_xi"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))
        D = np.asarray(self.D, float)
        if D.ndim != 2:
            D = D.reshape(self.d.size, -1) if self.d.size else D.reshape(0, 0)
        if D.shape[0] != self.d.size:
            raise ConfigurationError("state constraint matrix and vector disagree")
        object.__setattr__(self, "D", D)
        if np.any(self.q_xi <= 0):
            raise ConfigurationError("slack weights must be positive")
        if self.q_xi.size != self.d.size:
            raise ConfigurationError("one slack weight per state-constraint row")
        if np.any(self.u_lo > self.u_hi) or self.u_margin < 0:
            raise ConfigurationError("invalid input box")

    @property
    def r(self):
        return self.d.size

    def steady_input_box(self, regional=False):
        if not regional or self.u_margin == 0.0:
            return self.u_lo, self.u_hi
        lo, hi = self.u_lo + self.u_margin, self.u_hi - self.u_margin
        if np.any(lo > hi):
            raise ConfigurationError("input margin leaves an empty steady-state input set")
        return lo, hi

    def violation(self, x):
        return np.maximum(self.D @ x - self.d, 0.0)


def default_slack_weights(Q, r):
    """Ten times the largest eigenvalue of Q for every row."""
    return np.full(r, 10.0 * float(np.max(np.linalg.eigvalsh(np.atleast_2d(Q)))))


@dataclass(frozen=True)
class TrackingTarget:
    y_d: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y_d", np.atleast_1d(np.asarray(self.y_d, float)))
        T = np.atleast_2d(np.asarray(self.T, float))
        if not np.allclose(T, T.T) or np.min(np.linalg.eigvalsh(T)) <= 0:
            raise ConfigurationError("T must be symmetric positive definite")
        object.__setattr__(self, "T", T)


def rollout(model: ParametricModel, x0, theta, inputs):
    """Noise-free state sequence x_0..x_N for the given input sequence."""
    x0 = np.asarray(x0, dtype=float).ravel()
    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.n_u)
    model.check_dims(x=x0, theta=theta)
    xs = np.empty((inputs.shape[0] + 1, model.n_x))
    xs[0] = x0
    w = np.zeros(model.n_w)
    for k, u in enumerate(inputs):
        xs[k + 1] = model.f(xs[k], u, theta, w)
    return xs


def steady_state_residual(model: ParametricModel, theta, x, u):
    return float(np.linalg.norm(model.f(x, u, theta) - np.asarray(x, float)))


def optimal_setpoint(model: ParametricModel, theta, target: TrackingTarget,
                     constraints: ConstraintSpec, regional=False, z0=None):
    """Closest feasible steady state to the output target in the T-norm.

    Returns ``(x_rd, u_rd, y_rd)``, computed with the Gauss-Newton SQP from a
    zero state and mid-box input unless ``z0`` is given.
    """
    from .solver.sqp import LeastSquaresNLP, sqp_solve

    n_x, n_u, n_y = model.n_x, model.n_u, model.n_y
    u_lo, u_hi = constraints.steady_input_box(regional)
    if model.is_linear and z0 is None:
        sol = _linear_setpoint(model, theta, target, constraints, u_lo, u_hi)
        if sol is not None:
            return sol
    Tsq = np.linalg.cholesky(target.T).T
    nz = n_x + n_u + n_y
    lb = np.concatenate([np.full(n_x, -np.inf), u_lo, np.full(n_y, -np.inf)])
    ub = np.concatenate([np.full(n_x, np.inf), u_hi, np.full(n_y, np.inf)])
    Dx, d = constraints.D, constraints.d

    def evaluate(z):
        x, u, y = z[:n_x], z[n_x:n_x + n_u], z[n_x + n_u:]
        A, B = model.jacobians(x, u, theta)
        C, Dm = model.output_jacobians(x, u, theta)
        r = Tsq @ (y - target.y_d)
        Jr = np.zeros((n_y, nz))
        Jr[:, n_x + n_u:] = Tsq
        ce = np.concatenate([model.f(x, u, theta) - x, model.h(x, u, theta) - y])
        Je = np.zeros((n_x + n_y, nz))
        Je[:n_x, :n_x] = A - np.eye(n_x)
        Je[:n_x, n_x:n_x + n_u] = B
        Je[n_x:, :n_x] = C
        Je[n_x:, n_x:n_x + n_u] = Dm
        Je[n_x:, n_x + n_u:] = -np.eye(n_y)
        ci = Dx @ x - d
        Ji = np.zeros((Dx.shape[0], nz))
        Ji[:, :n_x] = Dx
        return r, Jr, ce, Je, ci, Ji

    nlp = LeastSquaresNLP(evaluate, nz, lb, ub)
    if z0 is None:
        z0 = np.concatenate([np.zeros(n_x), 0.5 * (u_lo + u_hi), np.zeros(n_y)])
    # the objective only sees y, so the Hessian is singular in (x, u); proximal
    # Gauss-Newton steps keep every subproblem well conditioned
    sol = sqp_solve(nlp, z0, max_iter=100, reg=1e-8, tol=1e-9)
    z = sol.z
    x, u, y = z[:n_x], z[n_x:n_x + n_u], z[n_x + n_u:]
    res = steady_state_residual(model, theta, x, u)
    if not sol.converged or res > 1e-8:
        raise SetpointError("steady-state optimization did not converge",
                            residuals={"stationarity": res, "kkt": sol.kkt_residual})
    return x, u, y


def _linear_setpoint(model, theta, target, constraints, u_lo, u_hi):
    """Eliminate the state through ``x = (I - A)^-1 (B u + e)`` and solve a QP in ``u``.

    Returns None when ``I - A`` is (nearly) singular so the caller can fall back.
    """
    from .solver.qp import QPError, solve_qp

    A, B, _, e, C, D, f = model.linear_form.matrices(theta)
    I_A = np.eye(model.n_x) - A
    if np.linalg.cond(I_A) > 1e10:
        return None
    S = np.linalg.solve(I_A, np.column_stack([B, e]))
    Sx, s0 = S[:, :-1], S[:, -1]
    Y = C @ Sx + D
    y0 = C @ s0 + f - target.y_d
    # the small proximal term picks the input nearest mid-box when Y has a null space
    reg = 1e-10 * max(1.0, float(np.max(np.abs(Y.T @ target.T @ Y), initial=0.0)))
    mid = 0.5 * (u_lo + u_hi)
    H = 2.0 * (Y.T @ target.T @ Y) + 2.0 * reg * np.eye(model.n_u)
    g = 2.0 * Y.T @ target.T @ y0 - 2.0 * reg * mid
    A_in = constraints.D @ Sx if constraints.r else None
    b_in = constraints.d - constraints.D @ s0 if constraints.r else None
    try:
        sol = solve_qp(H, g, lb=u_lo, ub=u_hi, A_in=A_in, b_in=b_in)
    except QPError as exc:
        raise SetpointError(f"no feasible steady state: {exc}") from exc
    u = sol.z
    x = Sx @ u + s0
    return x, u, model.h(x, u, theta)


def load_model(doc):
    """Build a model, parameter set and constraints from a JSON document or path.

    Either ``{"builtin": "msd_chain" | "planar_quadrotor", ...options}`` or a
    custom linear model with keys ``A, B`` (base matrices), optional
    ``A_theta, B_theta, e, e_theta, E, C, D, f``, ``theta_lo, theta_hi``,
    ``u_lo, u_hi``, ``state_D, state_d`` and optional ``q_xi``.
    """
    if isinstance(doc, str):
        with open(doc) as fh:
            doc = json.load(fh)
    if "builtin" in doc:
        from .simbench import benchmarks
        opts = {k: v for k, v in doc.items() if k != "builtin"}
        if doc["builtin"] in ("msd_chain", "msd"):
            bm = benchmarks.build_msd_chain(**opts)
        elif doc["builtin"] in ("planar_quadrotor", "quadrotor"):
            bm = benchmarks.build_quadrotor(**opts)
        else:
            raise ConfigurationError(f"unknown builtin model {doc['builtin']!r}")
        return bm.model, bm.theta_set, bm.constraints

    A0 = np.atleast_2d(np.asarray(doc["A"], float))
    B0 = np.atleast_2d(np.asarray(doc["B"], float))
    n_x, n_u = B0.shape
    if A0.shape != (n_x, n_x):
        raise ConfigurationError("A must be n_x by n_x and B n_x by n_u")
    lo = np.asarray(doc["theta_lo"], float)
    hi = np.asarray(doc["theta_hi"], float)
    n_theta = lo.size

    def aff(key, base):
        c = doc.get(key + "_theta")
        if c is None:
            return AffineMatrix(base)
        c = np.asarray(c, float).reshape((n_theta,) + base.shape)
        return AffineMatrix(base, c)

    e0 = np.asarray(doc.get("e", np.zeros(n_x)), float)
    E = np.atleast_2d(np.asarray(doc.get("E", np.eye(n_x)), float))
    C0 = np.atleast_2d(np.asarray(doc.get("C", np.eye(n_x)), float))
    n_y = C0.shape[0]
    D0 = np.atleast_2d(np.asarray(doc.get("D", np.zeros((n_y, n_u))), float))
    f0 = np.asarray(doc.get("f", np.zeros(n_y)), float)
    form = LinearForm(aff("A", A0), aff("B", B0), E, aff("e", e0), AffineMatrix(C0),
                      AffineMatrix(D0), AffineMatrix(f0))
    model = linear_model(form, n_theta, name=doc.get("name", "custom"))
    Dx = np.asarray(doc.get("state_D", np.zeros((0, n_x))), float).reshape(-1, n_x)
    d = np.asarray(doc.get("state_d", np.zeros(0)), float)
    q = doc.get("q_xi")
    q = default_slack_weights(np.eye(n_x), d.size) if q is None else np.asarray(q, float)
    cons = ConstraintSpec(np.asarray(doc["u_lo"], float), np.asarray(doc["u_hi"], float),
                          Dx, d, q, float(doc.get("u_margin", 0.0)))
    return model, ParameterSet.box(lo, hi), cons
