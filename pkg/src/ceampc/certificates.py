"""Stability constants for the finite-tail MPC: decay bounds, gamma_N, eps_f, alpha, horizons."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .cost import CONSTANT_TAIL, CostWeights, TailPolicy
from .model import ConstraintSpec, ParametricModel

log = logging.getLogger(__name__)

HORIZON_CAP = 500


class CertificateError(ValueError):
    pass


@dataclass(frozen=True)
class DecayEstimate:
    C_rho: float
    rho: float
    C_ell: float
    source: str = "analytic"

    def __post_init__(self):
        if not (0.0 < self.rho < 1.0) or self.C_rho < 1.0 or self.C_ell < 1.0:
            raise CertificateError(
                f"invalid decay constants C_rho={self.C_rho}, rho={self.rho}, C_ell={self.C_ell}")


@dataclass
class CertificateReport:
    decay: DecayEstimate
    gamma: list
    gamma_bar: float
    epsilon_f: float
    alpha: float
    omega_lower: Optional[float]
    N_min: Optional[int]
    regional_N_min: Optional[int] = None
    J_bar: Optional[float] = None
    N: int = 1
    M: int = 0
    omega: float = 1.0
    notes: list = field(default_factory=list)

    @property
    def certified(self):
        return self.alpha > 0.0

    def to_dict(self):
        d = asdict(self)
        d["certified"] = self.certified
        return d

    def text(self):
        dec = self.decay
        rows = [
            ("source", dec.source),
            ("C_rho", f"{dec.C_rho:.6g}"),
            ("rho", f"{dec.rho:.6g}"),
            ("C_ell", f"{dec.C_ell:.6g}"),
            ("N", str(self.N)),
            ("M", str(self.M)),
            ("omega", f"{self.omega:.6g}"),
            ("gamma_N", f"{self.gamma[-1]:.6g}"),
            ("gamma_bar", f"{self.gamma_bar:.6g}"),
            ("epsilon_f", f"{self.epsilon_f:.6g}"),
            ("alpha", f"{self.alpha:.6g}"),
            ("omega_lower", "n/a" if self.omega_lower is None else f"{self.omega_lower:.6g}"),
            ("N_min", "n/a" if self.N_min is None else str(self.N_min)),
        ]
        if self.regional_N_min is not None:
            rows.append(("regional_N_min", str(self.regional_N_min)))
        if self.J_bar is not None:
            rows.append(("J_bar", f"{self.J_bar:.6g}"))
        rows.append(("certified", "yes" if self.certified else "no"))
        width = max(len(k) for k, _ in rows)
        lines = [f"{k:<{width}}  {v}" for k, v in rows]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


def stage_cost_constant(C_rho, Q, constraints: Optional[ConstraintSpec] = None):
    """``C_ell = C_rho (sigma_max(Q) + sigma_xi) / sigma_min(Q)``."""
    Q = np.atleast_2d(Q)
    ev = np.linalg.eigvalsh(Q)
    sig_xi = 0.0
    if constraints is not None and constraints.r:
        D = constraints.D
        S = D.T @ (constraints.q_xi[:, None] * D)
        sig_xi = float(np.max(np.linalg.eigvalsh(S)))
    return float(C_rho * (ev[-1] + sig_xi) / ev[0])


def estimate_decay(model: ParametricModel, theta_samples, setpoint_samples=None,
                   horizon_probe=200, Q=None, constraints=None, tail: TailPolicy = CONSTANT_TAIL,
                   rng=None, n_rollouts=200, rollout_len=50, radius=1.0):
    """Uniform decay constants over the sampled parameters.

    Linear models with a constant-input tail use the spectral radius and
    powers of ``A(theta)``.  Everything else fits the stage-cost decay along
    sampled rollouts started ``radius`` away from the given setpoints.
    """
    theta_samples = np.atleast_2d(np.asarray(theta_samples, dtype=float))
    Q = np.eye(model.n_x) if Q is None else np.atleast_2d(Q)
    if model.is_linear and tail.kind == "constant_input":
        rho = 0.0
        mats = []
        for th in theta_samples:
            A = model.linear_form.A(th)
            sr = float(np.max(np.abs(np.linalg.eigvals(A))))
            if sr >= 1.0:
                raise CertificateError(
                    f"not open-loop stable (spectral radius {sr:.4f} at a sampled parameter); "
                    "use regional mode with a feedback tail")
            rho = max(rho, sr)
            mats.append(A)
        C_rho = 1.0
        for A in mats:
            P = np.eye(model.n_x)
            for k in range(1, horizon_probe + 1):
                P = P @ A
                C_rho = max(C_rho, float(np.linalg.norm(P, 2)) / rho**k)
        return DecayEstimate(C_rho, rho, stage_cost_constant(C_rho, Q, constraints), "analytic")
    return _sampled_decay(model, theta_samples, setpoint_samples, Q, constraints, tail, rng,
                          n_rollouts, rollout_len, radius)


def _sampled_decay(model, theta_samples, setpoint_samples, Q, constraints, tail, rng,
                   n_rollouts, rollout_len, radius):
    from .cost import stage_cost

    if not setpoint_samples:
        raise CertificateError("sampled decay estimate needs setpoint samples")
    rng = np.random.default_rng(0) if rng is None else rng
    R = np.eye(model.n_u)
    weights = CostWeights(Q, R, np.eye(model.n_y), 1.0, 1, 0)
    ks, ys = [], []
    for i in range(n_rollouts):
        th = theta_samples[i % len(theta_samples)]
        x_s, u_s = setpoint_samples[i % len(setpoint_samples)][:2]
        d = rng.standard_normal(model.n_x)
        x = x_s + radius * rng.uniform(0.05, 1.0) * d / np.linalg.norm(d)
        dx = x - x_s
        l0 = float(dx @ Q @ dx)
        for k in range(rollout_len):
            u = tail.input(x, th, x_s, u_s)
            lk = stage_cost(x, u_s, x_s, u_s, weights, constraints) if constraints else \
                float((x - x_s) @ Q @ (x - x_s))
            if not np.isfinite(lk) or lk > 1e12 * l0:
                raise CertificateError("not open-loop stable along sampled rollouts; "
                                       "use regional mode with a feedback tail")
            if lk > 1e-300:
                ks.append(k)
                ys.append(math.log(lk / l0))
            x = model.f(x, u, th)
    ks, ys = np.asarray(ks, float), np.asarray(ys, float)
    A = np.column_stack([np.ones_like(ks), ks])
    (_, slope), *_ = np.linalg.lstsq(A, ys, rcond=None)
    rho = float(math.exp(slope))
    if rho >= 1.0:
        raise CertificateError(f"sampled stage-cost decay rate {rho:.4f} >= 1")
    C_ell = 1.1 * max(1.0, float(np.max(np.exp(ys - slope * ks))))
    rho = min(rho ** (1.0 / 1.1), 1.0 - 1e-9)
    ev = np.linalg.eigvalsh(Q)
    C_rho = max(1.0, math.sqrt(C_ell * ev[0] / ev[-1]))
    return DecayEstimate(C_rho, rho, C_ell, "sampled")


def gamma_n(decay: DecayEstimate, weights: CostWeights, N: int) -> float:
    if N < 1:
        raise CertificateError("horizon must be >= 1")
    C, r, w, M = decay.C_ell, decay.rho, weights.omega, weights.M
    return C * ((1 - r**N) / (1 - r) + w * r**N * (1 - r**M) / (1 - r))


def gamma_bar(decay: DecayEstimate, weights: CostWeights) -> float:
    return decay.C_ell * max(1.0, weights.omega) / (1 - decay.rho)


def epsilon_f_closed(decay: DecayEstimate, omega: float, M: int) -> float:
    if M < 1:
        raise CertificateError("terminal tail is empty (M = 0); epsilon_f is undefined")
    C, r = decay.C_ell, decay.rho
    val = (1 - r) / (1 - r**M) * (C * r**M + (1 - omega) / omega)
    return max(val, 0.0)


def epsilon_f_lp(decay: DecayEstimate, omega: float, M: int) -> float:
    """Worst-case tail cost sequence, solved as an LP over ``l_0..l_M``."""
    if M < 1:
        raise CertificateError("terminal tail is empty (M = 0); epsilon_f is undefined")
    C, r = decay.C_ell, decay.rho
    c = np.zeros(M + 1)
    c[M] = -1.0
    c[0] -= (1 - omega) / omega
    A_eq = np.zeros((1, M + 1))
    A_eq[0, :M] = 1.0
    A_ub = np.zeros((M, M + 1))
    for k in range(M):
        A_ub[k, M] = 1.0
        A_ub[k, k] = -C * r ** (M - k)
    # l_k >= 0 is implied by the rows; stating it keeps the LP bounded when the
    # solver drops coefficients C rho^(M-k) below its matrix tolerance
    bounds = [(0, None)] * (M + 1)
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(M), A_eq=A_eq, b_eq=[1.0], bounds=bounds,
                  method="highs")
    if res.status != 0:
        raise RuntimeError(f"epsilon_f LP failed: {res.message}")
    # only M = 1 can give a negative optimum; the constant is used as a nonnegative bound
    return max(float(-res.fun), 0.0)


def alpha(gammas: Sequence[float], epsilon_f: float) -> float:
    """Decrease rate of the value function given ``gamma_1..gamma_N``."""
    g = np.asarray(gammas, dtype=float)
    if np.any(g < 1.0) or epsilon_f < 0:
        raise CertificateError("need all gamma >= 1 and epsilon_f >= 0")
    if epsilon_f == 0.0:
        return 1.0
    N = g.size
    gN = g[-1]
    # divide numerator and denominator by prod(gamma_2..gamma_N) to avoid overflow
    q = float(np.prod((g[1:] - 1.0) / g[1:]))
    den = (1 + epsilon_f) - epsilon_f * q
    if den <= 0:
        log.warning("alpha denominator %.3e <= 0 for N=%d", den, N)
        return -math.inf
    return 1.0 - epsilon_f * (gN - 1) * q / den


def alpha_for_horizon(decay, weights: CostWeights, N: int, epsilon_f=None) -> float:
    eps = epsilon_f_closed(decay, weights.omega, weights.M) if epsilon_f is None else epsilon_f
    return alpha([gamma_n(decay, weights, k) for k in range(1, N + 1)], eps)


def omega_lower(decay: DecayEstimate, M: int) -> float:
    C, r = decay.C_ell, decay.rho
    if C * r**M >= 1.0:
        raise CertificateError(
            f"C_ell * rho^M = {C * r**M:.4g} >= 1; increase M")
    return max((C - 1 + r**M) / (C * (1 - C * r**M)), 1.0)


def minimal_horizon(decay: DecayEstimate, weights: CostWeights, cap=HORIZON_CAP) -> int:
    eps = epsilon_f_closed(decay, weights.omega, weights.M)
    if not math.isfinite(eps):
        raise CertificateError("epsilon_f is not finite")
    gammas = []
    for N in range(1, cap + 1):
        gammas.append(gamma_n(decay, weights, N))
        if alpha(gammas, eps) > 0:
            return N
    raise CertificateError(f"no certified horizon up to N = {cap}")


def regional_minimal_horizon(decay: DecayEstimate, weights: CostWeights, J_bar: float,
                             c_loc: float, gamma_bar_value=None, epsilon_f=None) -> int:
    gb = gamma_bar(decay, weights) if gamma_bar_value is None else gamma_bar_value
    eps = epsilon_f_closed(decay, weights.omega, weights.M) if epsilon_f is None else epsilon_f
    N0 = max(0.0, (J_bar - gb * c_loc) / c_loc)
    if eps == 0.0:
        return max(1, math.ceil(N0 + 1 - 1e-12))
    if gb <= 1.0:
        raise CertificateError("gamma_bar must exceed 1")
    extra = (math.log(gb) + math.log(eps)) / (math.log(gb) - math.log(gb - 1.0))
    return max(1, math.ceil(N0 + max(extra, 0.0) - 1e-12))


def certify(decay: DecayEstimate, weights: CostWeights, J_bar=None, c_loc=None,
            notes=None) -> CertificateReport:
    """Assemble every certificate for the configured horizon and tail."""
    notes = list(notes or [])
    N, M, w = weights.N, weights.M, weights.omega
    gammas = [gamma_n(decay, weights, k) for k in range(1, N + 1)]
    gb = gamma_bar(decay, weights)
    if M == 0:
        notes.append("M = 0: no terminal tail, epsilon_f undefined; nothing certified")
        return CertificateReport(decay, gammas, gb, math.inf, -math.inf, None, None,
                                 N=N, M=M, omega=w, J_bar=J_bar, notes=notes)
    eps = epsilon_f_closed(decay, w, M)
    a = alpha(gammas, eps)
    try:
        wl = omega_lower(decay, M)
    except CertificateError as exc:
        wl = None
        notes.append(str(exc))
    try:
        n_min = minimal_horizon(decay, weights)
    except CertificateError as exc:
        n_min = None
        notes.append(str(exc))
    reg = None
    if J_bar is not None and c_loc is not None:
        reg = regional_minimal_horizon(decay, weights, J_bar, c_loc)
    if decay.source == "sampled":
        notes.append("decay constants are sampled estimates, not proofs")
    return CertificateReport(decay, gammas, gb, eps, a, wl, n_min, reg, J_bar, N, M, w, notes)
