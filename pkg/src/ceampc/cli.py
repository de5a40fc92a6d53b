"""Command line front end: ``ceampc {certify,simulate,compare,bench}``.

Exit codes: 0 success, 1 error, 2 not certified (certify), 3 diverged (simulate).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor

import jsonschema
import numpy as np

from .certificates import CertificateError, certify, estimate_decay
from .controller import StabilizabilityError, make_lqr_feedback
from .cost import TailPolicy
from .model import ConfigurationError, SetpointError, TrackingTarget, optimal_setpoint
from .simbench.scenario import (ABLATIONS, Scenario, compare, comparison_csv, comparison_text,
                                run)

log = logging.getLogger("ceampc")

EXIT_OK, EXIT_ERROR, EXIT_UNCERTIFIED, EXIT_DIVERGED = 0, 1, 2, 3

_matrix_like = {"oneOf": [{"type": "number"},
                          {"type": "array", "items": {"type": "number"}},
                          {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}]}

RUN_CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "benchmark": {"enum": ["msd", "quadrotor", "custom"]},
        "benchmark_options": {"type": "object"},
        "model": {"type": "object"},
        "mode": {"enum": ["semiglobal", "regional"]},
        "ablation": {"enum": list(ABLATIONS)},
        "ablations": {"type": "array", "items": {"enum": list(ABLATIONS)}},
        "ablation_seeds": {"type": "object", "additionalProperties": {"type": "integer",
                                                                     "minimum": 0}},
        "seed": {"type": "integer", "minimum": 0},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "K": {"type": "integer", "minimum": 0},
        "noise_scale": {"type": "number", "minimum": 0},
        "drift_amp": {"type": "number", "minimum": 0},
        "J_bar": {"type": "number", "exclusiveMinimum": 0},
        "theta_hat0": {"enum": ["true"]},
        "lms_check": {"type": "boolean"},
        "weights": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"Q": _matrix_like, "R": _matrix_like, "T": _matrix_like,
                           "omega": {"type": "number", "exclusiveMinimum": 0},
                           "N": {"type": "integer", "minimum": 1},
                           "M": {"type": "integer", "minimum": 0}},
        },
        "certify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"n_vertices": {"type": "integer", "minimum": 0},
                           "n_interior": {"type": "integer", "minimum": 0},
                           "horizon_probe": {"type": "integer", "minimum": 1},
                           "c_loc": {"type": "number", "exclusiveMinimum": 0},
                           "seed": {"type": "integer", "minimum": 0}},
        },
        "out": {"type": "string"},
        "jobs": {"type": "integer", "minimum": 1},
    },
}

_BUILTIN_ALIASES = {"msd": "msd", "msd_chain": "msd", "quadrotor": "quadrotor",
                    "planar_quadrotor": "quadrotor"}


def load_config(path):
    """Read and validate a RunConfig document; ``None`` gives an empty config."""
    if path is None:
        return {}
    with open(path) as fh:
        doc = json.load(fh)
    validate_config(doc)
    return doc


def validate_config(doc):
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigurationError(f"invalid config at {where}: {exc.message}") from exc
    if doc.get("benchmark") == "custom" and "model" not in doc:
        raise ConfigurationError("a custom benchmark needs a 'model' document")


def _merged(cfg, args):
    """Command-line flags override config values."""
    cfg = dict(cfg)
    if args.builtin is not None:
        cfg["benchmark"] = _BUILTIN_ALIASES[args.builtin]
    if getattr(args, "ablation", None) is not None:
        cfg["ablation"] = args.ablation
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if getattr(args, "jobs", None) is not None:
        cfg["jobs"] = args.jobs
    cfg.setdefault("benchmark", "msd")
    return cfg


def _benchmark_options(cfg):
    opts = dict(cfg.get("benchmark_options", {}))
    for key, val in cfg.get("weights", {}).items():
        opts[key] = np.asarray(val, float) if key in ("Q", "R", "T") else val
    for key in ("Q", "R", "T"):
        if key in opts and np.ndim(opts[key]) < 2:
            a = np.asarray(opts[key], float)
            opts[key] = np.diag(np.atleast_1d(a)) if a.ndim == 1 else a * np.eye(1)
    if cfg["benchmark"] == "custom":
        opts["model"] = cfg["model"]
    return opts


def scenario_from_config(cfg, ablation=None, seed=None) -> Scenario:
    opts = _benchmark_options(cfg)
    return Scenario(benchmark=cfg["benchmark"], benchmark_options=opts,
                    ablation=ablation or cfg.get("ablation", "full"),
                    seed=cfg.get("seed", 0) if seed is None else seed,
                    K=cfg.get("K", 400), mode=cfg.get("mode"), J_bar=cfg.get("J_bar"),
                    noise_scale=cfg.get("noise_scale", 1.0), drift_amp=cfg.get("drift_amp", 0.0),
                    theta_hat0=cfg.get("theta_hat0"), lms_check=cfg.get("lms_check", False))


def write_atomic(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(args, payload, text):
    if args.json:
        print(json.dumps(payload, sort_keys=True, default=_jsonable))
    else:
        print(text)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")


# --- certify ---------------------------------------------------------------

def certificate_report(cfg):
    """Certificates for the configured benchmark and horizons."""
    sc = scenario_from_config(cfg)
    bm = sc.build()
    mode = sc.mode or ("regional" if sc.benchmark == "quadrotor" else "semiglobal")
    opts = cfg.get("certify", {})
    rng = np.random.default_rng(opts.get("seed", 1))
    n_vert, n_int = opts.get("n_vertices", 32), opts.get("n_interior", 100)
    samples = [bm.theta_set.sample(rng, n_vert, vertices=True)] if n_vert else []
    if n_int:
        samples.append(bm.theta_set.sample(rng, n_int))
    thetas = np.vstack(samples + [bm.theta_hat0[None, :]])
    w = bm.weights
    if mode == "semiglobal":
        if w.M == 0:
            raise CertificateError("semiglobal certificate needs M >= 1 "
                                   "(epsilon_f is undefined for an empty tail)")
        decay = estimate_decay(bm.model, thetas, horizon_probe=opts.get("horizon_probe", 200),
                               Q=w.Q, constraints=bm.constraints, rng=rng,
                               setpoint_samples=_setpoints(bm, thetas[:8]))
    else:
        decay = _regional_decay(bm, thetas, rng)
    return certify(decay, w, J_bar=sc.J_bar, c_loc=opts.get("c_loc"))


def _setpoints(bm, thetas):
    out = []
    for th in thetas:
        for _, y_d in bm.schedule:
            try:
                out.append(optimal_setpoint(bm.model, th, TrackingTarget(y_d, bm.T),
                                            bm.constraints))
            except SetpointError:
                continue
    return out


def _regional_decay(bm, thetas, rng):
    """Worst sampled decay of the LQR tail over parameters near the estimate."""
    from .certificates import DecayEstimate

    worst = None
    Q = bm.lqr_Q if bm.lqr_Q is not None else bm.weights.Q
    R = bm.lqr_R if bm.lqr_R is not None else bm.weights.R
    for th in thetas[-1:]:
        sps = _setpoints(bm, [th])
        if not sps:
            raise CertificateError("no feasible setpoint for the certificate samples")
        x_s, u_s, _ = sps[0]
        try:
            fb = make_lqr_feedback(bm.model, th, x_s, u_s, Q, R, bm.constraints)
        except StabilizabilityError as exc:
            raise CertificateError(str(exc)) from exc
        d = estimate_decay(bm.model, [th], setpoint_samples=sps, Q=bm.weights.Q,
                           constraints=bm.constraints, tail=TailPolicy("feedback", fb), rng=rng,
                           radius=0.1)
        if worst is None or (d.C_ell, d.rho) > (worst.C_ell, worst.rho):
            worst = d
    return DecayEstimate(worst.C_rho, worst.rho, worst.C_ell, worst.source)


def cmd_certify(args, cfg):
    report = certificate_report(cfg)
    _emit(args, report.to_dict(), report.text())
    if not report.certified:
        print("not certified: alpha <= 0; see the omega lower bound and minimal horizon",
              file=sys.stderr)
        return EXIT_UNCERTIFIED
    return EXIT_OK


# --- simulate / compare / bench ---------------------------------------------

def _out_dir(cfg):
    return cfg.get("out", "ceampc_out")


def _stem(sc):
    return f"{sc.benchmark}_{sc.ablation}_seed{sc.seed}"


def _run_and_write(sc, out):
    res = run(sc)
    write_atomic(os.path.join(out, _stem(sc) + ".csv"), res.csv_text())
    write_atomic(os.path.join(out, _stem(sc) + ".json"), res.summary_json() + "\n")
    return res


def cmd_simulate(args, cfg):
    sc = scenario_from_config(cfg)
    res = _run_and_write(sc, _out_dir(cfg))
    m = res.metrics()
    _emit(args, m, f"{_stem(sc)}: track={m['track']:.6g} constr={m['constr']:.6g} "
                   f"steps={m['steps']} diverged={m['diverged']}")
    if res.diverged:
        print(f"{_stem(sc)}: trajectory diverged", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _ablation_set(cfg):
    abls = cfg.get("ablations", list(ABLATIONS))
    if not abls:
        raise ConfigurationError("empty ablation list")
    seeds = cfg.get("ablation_seeds", {})
    unknown = set(seeds) - set(abls)
    if unknown:
        raise ConfigurationError(f"seeds given for ablations not in the set: {sorted(unknown)}")
    base = cfg.get("seed", 0)
    return [(a, seeds.get(a, base)) for a in abls]


def _run_set(scenarios, out, jobs):
    if jobs <= 1 or len(scenarios) <= 1:
        return [_run_and_write(sc, out) for sc in scenarios]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_and_write, scenarios, [out] * len(scenarios)))


def compare_rows(cfg):
    pairs = _ablation_set(cfg)
    seeds = {s for _, s in pairs}
    if len(seeds) > 1:
        raise ConfigurationError(f"ablations use different seeds: {sorted(seeds)}")
    scenarios = [scenario_from_config(cfg, a, s) for a, s in pairs]
    results = _run_set(scenarios, _out_dir(cfg), cfg.get("jobs", 1))
    return compare({sc.ablation: r for sc, r in zip(scenarios, results)})


def cmd_compare(args, cfg):
    rows = compare_rows(cfg)
    out = _out_dir(cfg)
    name = f"compare_{cfg['benchmark']}_seed{cfg.get('seed', 0)}"
    write_atomic(os.path.join(out, name + ".csv"), comparison_csv(rows))
    write_atomic(os.path.join(out, name + ".txt"), comparison_text(rows) + "\n")
    _emit(args, rows, comparison_text(rows))
    return EXIT_OK


def bench_table(cfg):
    """Median normalized metrics over seeds, one row per ablation."""
    seeds = cfg.get("seeds", [0, 1, 2, 3, 4])
    per_seed = [compare_rows(dict(cfg, seed=s)) for s in seeds]
    table = []
    for i, row in enumerate(per_seed[0]):
        tr = [rows[i]["track_ratio"] for rows in per_seed]
        co = [rows[i]["constr_ratio"] for rows in per_seed]
        table.append({"ablation": row["ablation"], "track_ratio": float(np.median(tr)),
                      "constr_ratio": float(np.median(co)),
                      "diverged": sum(rows[i]["diverged"] for rows in per_seed),
                      "seeds": len(seeds)})
    return table


def _bench_csv(table):
    lines = ["# ceampc-bench-csv v1", "ablation,track_ratio,constr_ratio,diverged,seeds"]
    for r in table:
        lines.append(f"{r['ablation']},{r['track_ratio']!r},{r['constr_ratio']!r},"
                     f"{r['diverged']},{r['seeds']}")
    return "\n".join(lines) + "\n"


def cmd_bench(args, cfg):
    table = bench_table(cfg)
    out = _out_dir(cfg)
    write_atomic(os.path.join(out, f"bench_{cfg['benchmark']}.csv"), _bench_csv(table))
    text = [f"{'ablation':<10} {'Track':>10} {'Constr':>10} {'diverged':>9}"]
    text += [f"{r['ablation']:<10} {r['track_ratio']:>10.2f} {r['constr_ratio']:>10.2f} "
             f"{r['diverged']:>9d}" for r in table]
    _emit(args, table, "\n".join(text))
    return EXIT_OK


COMMANDS = {"certify": cmd_certify, "simulate": cmd_simulate, "compare": cmd_compare,
            "bench": cmd_bench}


def build_parser():
    p = argparse.ArgumentParser(prog="ceampc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="RunConfig JSON file")
        s.add_argument("--builtin", choices=sorted(_BUILTIN_ALIASES))
        s.add_argument("--json", action="store_true", help="machine-readable stdout")
        s.add_argument("--out", help="output directory")
        s.add_argument("-v", "--verbose", action="count", default=0)
        if name in ("simulate", "compare", "bench"):
            s.add_argument("--seed", type=int)
        if name == "simulate":
            s.add_argument("--ablation", choices=ABLATIONS)
        if name in ("compare", "bench"):
            s.add_argument("--jobs", type=int)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    if os.environ.get("CEAMPC_LOG"):
        level = getattr(logging, os.environ["CEAMPC_LOG"].upper(), level)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        cfg = _merged(load_config(args.config), args)
        if getattr(args, "seed", None) is not None and args.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if getattr(args, "jobs", None) is not None and args.jobs < 1:
            raise ConfigurationError("--jobs must be >= 1")
        validate_config(cfg)
        return COMMANDS[args.command](args, cfg)
    except (ConfigurationError, CertificateError, SetpointError, StabilizabilityError,
            OSError, json.JSONDecodeError) as exc:
        msg = str(exc)
        if "open-loop stable" in msg and "regional" not in msg:
            msg += "; use regional mode"
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
