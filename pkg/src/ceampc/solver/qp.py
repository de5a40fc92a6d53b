"""Dense convex QP kernel.

Solves

    min  0.5 z'Hz + g'z
    s.t. A_eq z = b_eq,  A_in z <= b_in,  lb <= z <= ub

with the dual active-set method of Goldfarb and Idnani.  The method starts
from the unconstrained minimizer and adds violated constraints one at a
time, so no feasible starting point is needed.  Problems here are small
(tens to a few hundred variables) and everything is dense.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

log = logging.getLogger(__name__)


class QPError(RuntimeError):
    """Raised for infeasible problems or an indefinite Hessian."""


@dataclass
class QPResult:
    z: np.ndarray
    y_eq: np.ndarray
    y_in: np.ndarray
    y_lb: np.ndarray
    y_ub: np.ndarray
    residual: float
    iterations: int
    converged: bool = True
    active: list = field(default_factory=list)

    @property
    def duals(self):
        return self.y_eq, self.y_in, self.y_lb, self.y_ub


def _as2d(a, n):
    if a is None:
        return np.zeros((0, n))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return np.zeros((0, n))
    return a


def _as1d(b, m):
    if b is None:
        return np.zeros(m)
    return np.asarray(b, dtype=float).reshape(m)


def solve_qp(H, g, A_eq=None, b_eq=None, lb=None, ub=None, A_in=None, b_in=None,
             max_iter=None, feas_tol=1e-11):
    """Solve a strictly convex QP.

    Multipliers follow the sign convention
    ``H z + g + A_eq' y_eq + A_in' y_in - y_lb + y_ub = 0`` with
    ``y_in, y_lb, y_ub >= 0``.  Infinite bounds are ignored.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float).ravel()
    n = g.size
    A_eq = _as2d(A_eq, n)
    A_in = _as2d(A_in, n)
    m_eq, m_in = A_eq.shape[0], A_in.shape[0]
    b_eq = _as1d(b_eq, m_eq)
    b_in = _as1d(b_in, m_in)
    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float).ravel()
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float).ravel()
    if np.any(lb > ub + feas_tol):
        raise QPError("inconsistent bounds")

    try:
        L = np.linalg.cholesky(0.5 * (H + H.T))
    except np.linalg.LinAlgError as exc:
        raise QPError("Hessian is not positive definite") from exc

    # every constraint stored as  c' z >= b
    ilb = np.flatnonzero(np.isfinite(lb))
    iub = np.flatnonzero(np.isfinite(ub))
    eye = np.eye(n)
    C = np.vstack([A_eq, -A_in, eye[ilb], -eye[iub]])
    b = np.concatenate([b_eq, -b_in, lb[ilb], -ub[iub]])
    m = C.shape[0]
    is_eq = np.zeros(m, dtype=bool)
    is_eq[:m_eq] = True
    cnorm = np.linalg.norm(C, axis=1)
    cnorm[cnorm == 0.0] = 1.0

    Linv_C = sla.solve_triangular(L, C.T, lower=True, check_finite=False)  # columns L^{-1} c_i
    z = -sla.cho_solve((L, True), g, check_finite=False)
    sign = np.ones(m)
    active: list[int] = []
    u = np.zeros(0)
    if max_iter is None:
        max_iter = max(10 * (n + m), 100)
    it = 0
    pending_eq = list(range(m_eq))

    while True:
        if pending_eq:
            p = pending_eq.pop(0)
            if C[p] @ z - b[p] > 0.0:
                sign[p] = -1.0
        else:
            s = (C @ z - b) / cnorm
            s[active] = np.inf
            s[:m_eq] = np.inf
            p = int(np.argmin(s)) if m else 0
            if m == 0 or s[p] >= -feas_tol:
                break
        cp, bp, wp = sign[p] * C[p], sign[p] * b[p], sign[p] * Linv_C[:, p]
        up = 0.0
        while True:
            it += 1
            if it > max_iter:
                log.warning("QP iteration cap %d reached", max_iter)
                return _finish(H, g, A_eq, b_eq, A_in, b_in, lb, ub, z, C, sign, active, u,
                               m_eq, m_in, ilb, iub, it, False)
            if active:
                V = Linv_C[:, active] * sign[active]
                r = _project_coeffs(V, wp)
                zhat = wp - V @ r
            else:
                r = np.zeros(0)
                zhat = wp
            step = sla.solve_triangular(L.T, zhat, lower=False, check_finite=False)
            dependent = np.linalg.norm(zhat) <= 1e-10 * max(np.linalg.norm(wp), 1e-300)

            t1, blocking = np.inf, -1
            for pos, j in enumerate(active):
                if not is_eq[j] and r[pos] > 0.0:
                    ratio = u[pos] / r[pos]
                    if ratio < t1:
                        t1, blocking = ratio, pos

            if dependent:
                if not np.isfinite(t1):
                    if is_eq[p]:
                        # redundant but consistent equality: skip it
                        if abs(cp @ z - bp) <= 1e-9 * (1.0 + abs(bp)):
                            break
                    raise QPError("QP is infeasible")
                u = u - t1 * r
                up += t1
                del active[blocking]
                u = np.delete(u, blocking)
                continue

            t2 = -(cp @ z - bp) / (zhat @ zhat)
            t = min(t1, t2)
            z = z + t * step
            u = u - t * r
            up += t
            if t2 <= t1:
                active.append(p)
                u = np.append(u, up)
                break
            del active[blocking]
            u = np.delete(u, blocking)

    return _finish(H, g, A_eq, b_eq, A_in, b_in, lb, ub, z, C, sign, active, u,
                   m_eq, m_in, ilb, iub, it, True)


def _project_coeffs(V, w):
    """Least-squares coefficients of ``w`` on the columns of ``V``."""
    VtV = V.T @ V
    try:
        c = sla.cho_factor(VtV, lower=True, check_finite=False)
        if np.min(np.abs(np.diag(c[0]))) ** 2 > 1e-10 * np.max(np.diag(VtV)):
            return sla.cho_solve(c, V.T @ w, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    r, *_ = np.linalg.lstsq(V, w, rcond=None)
    return r


def _finish(H, g, A_eq, b_eq, A_in, b_in, lb, ub, z, C, sign, active, u,
            m_eq, m_in, ilb, iub, it, converged):
    m = C.shape[0]
    lam = np.zeros(m)
    for pos, j in enumerate(active):
        lam[j] = u[pos] * sign[j]
    # c'z >= b rows: H z + g = sum lam_i c_i
    y_eq = -lam[:m_eq]
    y_in = lam[m_eq:m_eq + m_in]
    n = g.size
    y_lb = np.zeros(n)
    y_ub = np.zeros(n)
    off = m_eq + m_in
    y_lb[ilb] = lam[off:off + ilb.size]
    y_ub[iub] = lam[off + ilb.size:]
    res = kkt_residual(H, g, z, A_eq, b_eq, A_in, b_in, lb, ub, y_eq, y_in, y_lb, y_ub)
    return QPResult(z, y_eq, y_in, y_lb, y_ub, res, it, converged, list(active))


def kkt_residual(H, g, z, A_eq, b_eq, A_in, b_in, lb, ub, y_eq, y_in, y_lb, y_ub):
    """Max-norm KKT residual: stationarity, feasibility, complementarity, dual sign."""
    stat = H @ z + g + A_eq.T @ y_eq + A_in.T @ y_in - y_lb + y_ub
    parts = [np.abs(stat)]
    if A_eq.shape[0]:
        parts.append(np.abs(A_eq @ z - b_eq))
    if A_in.shape[0]:
        s_in = A_in @ z - b_in
        parts += [np.maximum(s_in, 0.0), np.abs(y_in * s_in), np.maximum(-y_in, 0.0)]
    fl, fu = np.isfinite(lb), np.isfinite(ub)
    s_lb = lb[fl] - z[fl]
    s_ub = z[fu] - ub[fu]
    parts += [np.maximum(s_lb, 0.0), np.maximum(s_ub, 0.0),
              np.abs(y_lb[fl] * s_lb), np.abs(y_ub[fu] * s_ub),
              np.maximum(-y_lb, 0.0), np.maximum(-y_ub, 0.0)]
    return float(max(np.max(p) if p.size else 0.0 for p in parts))
