"""Closed-loop simulation of the adaptive MPC on a benchmark, with metrics and CSV output."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from ..controller import AdaptiveController
from ..lms import LmsState, design_gain, lms_diagnostics
from ..model import ConfigurationError, SetpointError, TrackingTarget, optimal_setpoint
from ..solver.qp import solve_qp
from .benchmarks import Benchmark, build_custom, build_msd_chain, build_quadrotor

log = logging.getLogger(__name__)

CSV_SCHEMA = "# ceampc-sim-csv v1"
ABLATIONS = ("full", "no_term", "no_adapt")
CHANNELS = {"w": 1, "v": 2, "drift": 3}


def channel_rng(seed, channel, step):
    """Counter-based generator keyed by (seed, channel, step)."""
    ss = np.random.SeedSequence([int(seed), CHANNELS[channel], int(step)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class Scenario:
    """One closed-loop experiment; every random draw is keyed by ``seed``."""

    benchmark: str = "msd"
    benchmark_options: dict = field(default_factory=dict)
    ablation: str = "full"
    seed: int = 0
    K: int = 400
    mode: Optional[str] = None  # defaults: semiglobal for msd, regional for quadrotor
    J_bar: Optional[float] = None
    noise_scale: float = 1.0
    drift_amp: float = 0.0  # per-step drift box, fraction of the parameter-box width
    theta_hat0: Optional[str] = None  # "true" starts from the true parameters
    lms_check: bool = False
    diverge_norm: Optional[float] = None
    gain_samples: int = 2000

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"unknown ablation {self.ablation!r}")
        if self.benchmark not in ("msd", "quadrotor", "custom"):
            raise ConfigurationError(f"unknown benchmark {self.benchmark!r}")
        if self.K < 0:
            raise ConfigurationError("episode length must be >= 0")

    def build(self) -> Benchmark:
        if self.benchmark == "msd":
            return build_msd_chain(**self.benchmark_options)
        if self.benchmark == "custom":
            return build_custom(**self.benchmark_options)
        return build_quadrotor(**self.benchmark_options)


@dataclass
class SimResult:
    scenario: Scenario
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    y_d: np.ndarray
    y_rd: np.ndarray
    theta_err: np.ndarray
    records: list
    lms_rows: list
    track_terms: np.ndarray
    constr_terms: np.ndarray
    diverged: bool
    wall_ms_per_step: float
    steps: int

    @property
    def track(self):
        return float(np.sum(self.track_terms))

    @property
    def constr(self):
        return float(np.sum(self.constr_terms))

    def metrics(self):
        return {"track": self.track, "constr": self.constr, "diverged": self.diverged,
                "steps": self.steps, "wall_ms_per_step": self.wall_ms_per_step}

    def csv_text(self):
        """Per-step table; deterministic given the scenario (no timing columns)."""
        buf = io.StringIO()
        buf.write(CSV_SCHEMA + "\n")
        n_x = self.x.shape[1]
        n_u = self.u.shape[1] if self.u.ndim == 2 else 0
        n_y = self.y.shape[1]
        head = (["step"] + [f"x{i}" for i in range(n_x)] + [f"u{i}" for i in range(n_u)]
                + [f"y{i}" for i in range(n_y)] + [f"yd{i}" for i in range(n_y)]
                + [f"ys{i}" for i in range(n_y)]
                + ["J_star", "theta_err", "track", "constr", "slack_sum", "sublevel_flag",
                   "converged", "v_theta_err", "v_theta_step", "ineq5a_slack", "ineq5b_slack"])
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(head)
        fmt = _fmt
        for k in range(self.steps):
            rec = self.records[k]
            lr = self.lms_rows[k] if k < len(self.lms_rows) else None
            row = ([k] + [fmt(v) for v in self.x[k]] + [fmt(v) for v in self.u[k]]
                   + [fmt(v) for v in self.y[k]] + [fmt(v) for v in self.y_d[k]]
                   + [fmt(v) for v in rec.setpoint[2]]
                   + [fmt(rec.J_star), fmt(self.theta_err[k]), fmt(self.track_terms[k]),
                      fmt(self.constr_terms[k]), fmt(float(np.sum(rec.slacks))),
                      "" if rec.sublevel_flag is None else int(rec.sublevel_flag),
                      int(rec.converged)]
                   + (["", "", "", ""] if lr is None else [fmt(v) for v in lr[1:]]))
            w.writerow(row)
        return buf.getvalue()

    def summary_json(self):
        return json.dumps(self.metrics(), sort_keys=True)


def _fmt(v):
    return repr(float(v))


def _distance_sq(x, cons):
    """Squared Euclidean distance from ``x`` to ``{s : D s <= d}``."""
    if cons.r == 0 or np.all(cons.D @ x <= cons.d):
        return 0.0
    n = x.size
    sol = solve_qp(np.eye(n), -x, A_in=cons.D, b_in=cons.d)
    return float(np.sum((sol.z - x) ** 2))


def make_controller(sc: Scenario, bm: Benchmark, theta_hat0=None):
    model = bm.model
    mode = sc.mode or ("regional" if sc.benchmark == "quadrotor" else "semiglobal")
    weights = bm.weights
    if sc.ablation == "no_term":
        weights = weights.replace(M=0)
    th0 = bm.theta_hat0 if theta_hat0 is None else theta_hat0
    v_lo, v_hi = (sc.noise_scale * b for b in bm.v_box)
    gamma = design_gain(model, bm.state_box, bm.constraints, (v_lo, v_hi),
                        n_samples=sc.gain_samples, rng=np.random.default_rng(sc.seed))
    lms = LmsState(th0, gamma, bm.theta_set)
    J_bar = sc.J_bar
    if mode == "regional" and J_bar is None:
        J_bar = np.inf
    return AdaptiveController(model, lms, weights, bm.constraints,
                              TrackingTarget(bm.y_d(0), bm.T), mode=mode, J_bar=J_bar,
                              lqr_Q=bm.lqr_Q, lqr_R=bm.lqr_R, adapt=sc.ablation != "no_adapt")


def run(sc: Scenario, controller=None, on_step=None) -> SimResult:
    """Simulate ``sc.K`` steps; stops early and flags divergence on blow-up."""
    bm = sc.build()
    model = bm.model
    theta = bm.theta_true.copy()
    th0 = theta.copy() if sc.theta_hat0 == "true" else None
    ctrl = make_controller(sc, bm, th0) if controller is None else controller
    cons = bm.constraints
    diverge = sc.diverge_norm if sc.diverge_norm is not None else bm.diverge_norm
    width = bm.theta_set.hi - bm.theta_set.lo
    x = bm.x0.copy()
    xs, us, ys, yds, yrds, terr = [x.copy()], [], [], [], [], []
    records, lms_rows, tr, co = [], [], [], []
    diverged = False
    rd_cache = {}
    w_lo, w_hi = (sc.noise_scale * b for b in bm.w_box)
    v_lo, v_hi = (sc.noise_scale * b for b in bm.v_box)

    def noise(ch, k, lo, hi):
        if np.all(lo == hi):
            return lo.copy()
        return channel_rng(sc.seed, ch, k).uniform(lo, hi)

    v = noise("v", 0, v_lo, v_hi)
    t_solve = 0.0
    for k in range(sc.K):
        y_d = bm.y_d(k)
        if not np.array_equal(y_d, ctrl.target.y_d):
            ctrl.target = TrackingTarget(y_d, bm.T)
        key = (y_d.tobytes(), theta.tobytes())
        if key not in rd_cache:
            try:
                rd_cache[key] = optimal_setpoint(model, theta, ctrl.target, cons)[2]
            except SetpointError:
                rd_cache[key] = np.full(model.n_y, np.nan)
        y_rd = rd_cache[key]
        t0 = time.perf_counter()
        u, rec = ctrl.step(x + v)
        t_solve += time.perf_counter() - t0
        w = noise("w", k, w_lo, w_hi)
        v_next = noise("v", k + 1, v_lo, v_hi)
        theta_next = theta
        if sc.drift_amp > 0:
            step = channel_rng(sc.seed, "drift", k).uniform(-1, 1, theta.size) * sc.drift_amp * width
            theta_next = bm.theta_set.clip(theta + step)
        if sc.lms_check:
            diag = lms_diagnostics(ctrl.lms, model, theta, x, w, v, v_next, u,
                                   theta_next=theta_next)
            rec.lms = diag
            lms_rows.append(diag.row(k))
        y = model.h(x, u, theta)
        ys.append(y)
        yds.append(y_d)
        yrds.append(y_rd)
        us.append(u)
        records.append(rec)
        terr.append(float(np.linalg.norm(ctrl.lms.theta_hat - theta)))
        tr.append(float(np.sum((y - y_rd) ** 2)))
        co.append(_distance_sq(x, cons))
        if on_step is not None:
            on_step(k, x, u, rec)
        x = model.f(x, u, theta, w)
        theta = theta_next
        v = v_next
        xs.append(x.copy())
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > diverge:
            diverged = True
            log.info("scenario diverged at step %d", k)
            break
    steps = len(us)
    n_u, n_y = model.n_u, model.n_y
    return SimResult(sc, np.array(xs), np.array(us).reshape(steps, n_u),
                     np.array(ys).reshape(steps, n_y), np.array(yds).reshape(steps, n_y),
                     np.array(yrds).reshape(steps, n_y), np.array(terr), records, lms_rows,
                     np.array(tr), np.array(co), diverged,
                     1000.0 * t_solve / max(steps, 1), steps)


def compare(results: dict):
    """Track and constraint metrics normalized to the ``full`` ablation.

    ``results`` maps ablation name to SimResult; returns a list of row dicts.
    """
    if not results:
        raise ConfigurationError("nothing to compare")
    seeds = {r.scenario.seed for r in results.values()}
    if len(seeds) > 1:
        raise ConfigurationError(f"ablations use different seeds: {sorted(seeds)}")
    ref = results.get("full")
    if ref is None:
        raise ConfigurationError("comparison needs the 'full' ablation")
    rows = []
    for name in [a for a in ABLATIONS if a in results]:
        r = results[name]
        rows.append({"ablation": name, "track": r.track, "constr": r.constr,
                     "track_ratio": _ratio(r.track, ref.track),
                     "constr_ratio": _ratio(r.constr, ref.constr), "diverged": r.diverged})
    return rows


def _ratio(a, b):
    if b == 0.0:
        return 1.0 if a == 0.0 else float("inf")
    return a / b


def comparison_text(rows):
    lines = [f"{'ablation':<10} {'Track':>10} {'Constr':>10}"]
    for r in rows:
        lines.append(f"{r['ablation']:<10} {r['track_ratio']:>10.2f} {r['constr_ratio']:>10.2f}")
    return "\n".join(lines)


def comparison_csv(rows):
    buf = io.StringIO()
    buf.write("# ceampc-compare-csv v1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ablation", "track", "constr", "track_ratio", "constr_ratio", "diverged"])
    for r in rows:
        w.writerow([r["ablation"], _fmt(r["track"]), _fmt(r["constr"]), _fmt(r["track_ratio"]),
                    _fmt(r["constr_ratio"]), int(r["diverged"])])
    return buf.getvalue()
