"""Gauss-Newton SQP for least-squares objectives with smooth constraints.

The objective is ``||r(z)||^2`` subject to ``c_eq(z) = 0``, ``c_in(z) <= 0``
and simple bounds.  Each iteration solves the Gauss-Newton QP with
Levenberg damping and globalizes with an l1 merit function and backtracking.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .qp import QPError, solve_qp

log = logging.getLogger(__name__)


@dataclass
class LeastSquaresNLP:
    """``evaluate(z) -> (r, Jr, c_eq, J_eq, c_in, J_in)``."""

    evaluate: Callable
    n: int
    lb: np.ndarray
    ub: np.ndarray


@dataclass
class SQPResult:
    z: np.ndarray
    cost: float
    converged: bool
    iterations: int
    kkt_residual: float
    y_eq: np.ndarray = None
    y_in: np.ndarray = None
    merit_history: list = field(default_factory=list)


def _violation(ce, ci):
    return float(np.sum(np.abs(ce)) + np.sum(np.maximum(ci, 0.0)))


def _qp_step(nlp, z, r, Jr, ce, Je, ci, Ji, reg):
    H = 2.0 * Jr.T @ Jr
    H[np.diag_indices_from(H)] += 2.0 * reg
    g = 2.0 * Jr.T @ r
    sol = solve_qp(H, g, Je, -ce, nlp.lb - z, nlp.ub - z, Ji, -ci)
    return H, g, sol


def sqp_solve(nlp: LeastSquaresNLP, z0, max_iter=50, tol=1e-6, exact=False, reg=1e-9,
              damping=1e-6, damping_max=1e6, verbose=False):
    """Minimize ``||r(z)||^2`` from ``z0``.

    With ``exact=True`` the problem is taken to be a QP (affine residuals and
    constraints) and a single undamped step is returned.
    """
    z = np.clip(np.asarray(z0, dtype=float).copy(), nlp.lb, nlp.ub)
    r, Jr, ce, Je, ci, Ji = nlp.evaluate(z)

    if exact:
        # residuals and constraints are affine, so linearizations are exact
        try:
            H, g, sol = _qp_step(nlp, z, r, Jr, ce, Je, ci, Ji, 0.0)
            ok, used = sol.converged, 0.0
        except QPError:
            # singular Hessian: regularize, and let a second pass remove most of the bias
            H, g, first = _qp_step(nlp, z, r, Jr, ce, Je, ci, Ji, reg)
            z, r = z + first.z, r + Jr @ first.z
            ce, ci = ce + Je @ first.z, ci + Ji @ first.z
            H, g, sol = _qp_step(nlp, z, r, Jr, ce, Je, ci, Ji, reg)
            ok, used = first.converged and sol.converged, reg
        z, r = z + sol.z, r + Jr @ sol.z
        res = sol.residual + 2.0 * used * float(np.max(np.abs(sol.z), initial=0.0))
        return SQPResult(z, float(r @ r), ok and res <= tol, 1, res, sol.y_eq, sol.y_in)

    nu = 1.0
    lam = damping
    history = []
    best = None
    it = 0
    converged = False
    kkt = np.inf
    y_eq = y_in = None
    while it < max_iter:
        it += 1
        try:
            H, g, sol = _qp_step(nlp, z, r, Jr, ce, Je, ci, Ji, reg + lam)
        except QPError as exc:
            log.debug("SQP subproblem failed: %s", exc)
            break
        step = sol.z
        y_eq, y_in = sol.y_eq, sol.y_in
        viol = _violation(ce, ci)
        kkt = max(float(np.max(np.abs(H @ step), initial=0.0)), viol, sol.residual)
        phi = float(r @ r) + nu * viol
        history.append(phi)
        if best is None or (viol <= max(tol, best[2]) and phi < best[1]) or viol < best[2]:
            best = (z.copy(), phi, viol)
        if verbose:
            log.info("sqp it=%d merit=%.6e viol=%.2e step=%.2e lam=%.1e", it, phi, viol,
                     np.max(np.abs(step), initial=0.0), lam)
        if np.max(np.abs(step), initial=0.0) <= tol * (1.0 + np.max(np.abs(z))) and viol <= tol:
            converged = True
            z = z + step
            r, Jr, ce, Je, ci, Ji = nlp.evaluate(z)
            break

        ymax = max(np.max(np.abs(y_eq), initial=0.0), np.max(np.abs(y_in), initial=0.0))
        nu = max(nu, 1.1 * ymax + 1e-8)
        phi = float(r @ r) + nu * viol
        slope = float(g @ step) - nu * viol
        alpha = 1.0
        accepted = False
        while alpha >= 1e-4:
            zt = z + alpha * step
            rt, Jrt, cet, Jet, cit, Jit = nlp.evaluate(zt)
            phit = float(rt @ rt) + nu * _violation(cet, cit)
            if np.isfinite(phit) and phit <= phi + 1e-4 * alpha * min(slope, 0.0):
                accepted = True
                break
            alpha *= 0.5
        if accepted:
            z, r, Jr, ce, Je, ci, Ji = zt, rt, Jrt, cet, Jet, cit, Jit
            lam = max(lam / 10.0, damping)
        else:
            lam *= 10.0
            if lam > damping_max:
                break

    if not converged and best is not None and _violation(ce, ci) > best[2] + tol:
        z = best[0]
        r, Jr, ce, Je, ci, Ji = nlp.evaluate(z)
    return SQPResult(z, float(r @ r), converged, it, float(kkt), y_eq, y_in, history)
