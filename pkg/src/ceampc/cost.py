"""Stage cost with soft-constraint penalty and finite-tail terminal costs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import ConfigurationError, ConstraintSpec, ParametricModel


def _spd(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.allclose(M, M.T) or np.min(np.linalg.eigvalsh(M)) <= 0:
        raise ConfigurationError(f"{name} must be symmetric positive definite")
    return M


@dataclass(frozen=True)
class CostWeights:
    Q: np.ndarray
    R: np.ndarray
    T: np.ndarray
    omega: float
    N: int
    M: int

    def __post_init__(self):
        for name in ("Q", "R", "T"):
            object.__setattr__(self, name, _spd(getattr(self, name), name))
        if self.omega <= 0 or self.N < 1 or self.M < 0:
            raise ConfigurationError("need omega > 0, N >= 1, M >= 0")

    def replace(self, **kw):
        data = dict(Q=self.Q, R=self.R, T=self.T, omega=self.omega, N=self.N, M=self.M)
        data.update(kw)
        return CostWeights(**data)


class LqrFeedback:
    """``kappa(x) = clip(u_s + K (x - x_s), U)`` for a fixed gain K."""

    def __init__(self, K, u_lo, u_hi):
        self.K = np.atleast_2d(np.asarray(K, dtype=float))
        self.u_lo = np.asarray(u_lo, dtype=float)
        self.u_hi = np.asarray(u_hi, dtype=float)
        self.clip_count = 0

    def __call__(self, x, theta, x_s, u_s):
        u = u_s + self.K @ (x - x_s)
        uc = np.clip(u, self.u_lo, self.u_hi)
        if np.any(uc != u):
            self.clip_count += 1
        return uc

    def jacobian(self, x, theta, x_s, u_s):
        """Derivatives of kappa with respect to (x, x_s, u_s)."""
        u = u_s + self.K @ (x - x_s)
        free = ((u > self.u_lo) & (u < self.u_hi)).astype(float)[:, None]
        Kx = free * self.K
        return Kx, -Kx, free * np.eye(u.size)


@dataclass(frozen=True)
class TailPolicy:
    """Input used along the terminal rollout: constant ``u_s`` or a feedback law."""

    kind: str = "constant_input"
    feedback: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in ("constant_input", "feedback"):
            raise ConfigurationError(f"unknown tail kind {self.kind!r}")
        if self.kind == "feedback" and self.feedback is None:
            raise ConfigurationError("feedback tail needs a feedback law")

    def input(self, x, theta, x_s, u_s):
        if self.kind == "constant_input":
            return np.asarray(u_s, dtype=float)
        return np.asarray(self.feedback(x, theta, x_s, u_s), dtype=float)


CONSTANT_TAIL = TailPolicy()


def stage_cost(x, u, x_s, u_s, weights: CostWeights, constraints: ConstraintSpec):
    dx = np.asarray(x, float) - x_s
    du = np.asarray(u, float) - u_s
    viol = constraints.violation(np.asarray(x, float))
    return float(dx @ weights.Q @ dx + du @ weights.R @ du + constraints.q_xi @ viol**2)


def tail_rollout(x_N, x_s, u_s, theta, tail: TailPolicy, model: ParametricModel, M):
    """States and inputs of the M-step terminal rollout starting at ``x_N``."""
    xs, us = [], []
    x = np.asarray(x_N, dtype=float)
    for _ in range(M):
        u = tail.input(x, theta, x_s, u_s)
        xs.append(x)
        us.append(u)
        x = model.f(x, u, theta)
    return xs, us


def terminal_cost(x_N, x_s, u_s, theta, weights: CostWeights, tail: TailPolicy,
                  model: ParametricModel, constraints: ConstraintSpec):
    xs, us = tail_rollout(x_N, x_s, u_s, theta, tail, model, weights.M)
    return sum(stage_cost(x, u, x_s, u_s, weights, constraints) for x, u in zip(xs, us))


def open_loop_cost(x0, theta, inputs, x_s, u_s, weights: CostWeights, tail: TailPolicy,
                   model: ParametricModel, constraints: ConstraintSpec):
    """Finite-horizon cost: N stage costs plus omega times the finite-tail cost."""
    from .model import rollout

    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.n_u)
    xs = rollout(model, x0, theta, inputs)
    J = sum(stage_cost(xs[k], inputs[k], x_s, u_s, weights, constraints)
            for k in range(inputs.shape[0]))
    return J + weights.omega * terminal_cost(xs[-1], x_s, u_s, theta, weights, tail, model,
                                             constraints)
