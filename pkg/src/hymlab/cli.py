"""Command-line surface: degree / functional / decompose / flow / report.

Every subcommand reads one YAML experiment configuration, writes a JSON
summary into the output directory, and exits with: 0 on success, 2 on an
invariant failure (the summary names the violated invariant), 3 on a
configuration error, 4 on numerical breakdown (dt underflow).  Scalar
results carry their tolerance and are emitted in both unit conventions:
"internal" (integer line-bundle degrees, deg = (1/pi) int tr F dx dy) and
"paper_eq2" (the un-normalized curvature integral, a factor pi larger).
Summaries are deterministic: identical config and seed give byte-identical
JSON on one platform.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bundles as bd
from . import chern as ch
from . import flow as fl
from . import functional as fn
from . import subobjects as so
from .config import ConfigError, ExperimentConfig, load_config

EXIT_OK = 0
EXIT_INVARIANT = 2
EXIT_CONFIG = 3
EXIT_NUMERICAL = 4


def _tagged(value: float, tol: float) -> dict:
    return {"value": float(value), "unit": "internal", "tolerance": tol,
            "paper_eq2": float(value) * float(np.pi)}


def _scalar(value: float, tol: float, unit: str = "internal") -> dict:
    return {"value": float(value), "unit": unit, "tolerance": tol}


def _write_summary(out_dir: str, name: str, payload: dict) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path

def _echo(cfg: ExperimentConfig) -> dict:
    return {"base": cfg.base, "bundle": cfg.bundle,
            "initial_metric": cfg.initial_metric,
            "inclusion": cfg.inclusion, "label": cfg.label}


def _apply_grid_override(cfg: ExperimentConfig, grid: int | None) -> None:
    if grid is None:
        return
    if cfg.base["kind"] == "torus":
        cfg.base["n"] = grid
    else:
        cfg.base["n_r"] = grid
        cfg.base["n_theta"] = 2 * grid


def cmd_degree(cfg: ExperimentConfig, out_dir: str, args) -> int:
    geom = cfg.build_geometry()
    spec = cfg.build_bundle()
    H = cfg.build_metric(geom, spec)
    rep = ch.chern_report(H)
    checks = {}
    # metric independence across conformal and exp perturbations
    seed = int(cfg.initial_metric.get("seed", 23))
    degs = [rep.degree]
    for k in range(3):
        recipe = {"recipe": "conformal", "seed": seed + 100 + k, "amplitude": 0.2} \
            if k % 2 == 0 else \
            {"recipe": "exp_perturb", "kind": "trig", "seed": seed + 100 + k,
             "amplitude": 0.2}
        try:
            from .config import _build_metric
            Hk = _build_metric(geom, spec, recipe)
            degs.append(ch.degree(Hk))
        except bd.BundleError:
            continue
    spread = max(degs) - min(degs)
    checks["degree_metric_independence"] = {
        "pass": bool(spread < 1e-5), "value": float(spread), "tolerance": 1e-5}
    payload = {
        "inputs": _echo(cfg),
        "degree": _tagged(rep.degree, 1e-6),
        "slope": _tagged(rep.slope, 1e-6),
        "he_constant": _scalar(rep.he_constant, 1e-6),
        "he_defect": _scalar(rep.he_defect, 1e-4),
        "hym_energy": _scalar(rep.hym_energy, 1e-6),
        "lambda_f_l2": _scalar(rep.lambda_f_l2, 1e-6),
        "checks": checks,
    }
    _write_summary(out_dir, "summary.json", payload)
    return EXIT_OK if all(c["pass"] for c in checks.values()) else EXIT_INVARIANT


def cmd_functional(cfg: ExperimentConfig, out_dir: str, args) -> int:
    geom = cfg.build_geometry()
    spec = cfg.build_bundle()
    H0 = cfg.build_metric(geom, spec, "reference_metric") \
        if cfg.reference_metric else cfg.build_metric(geom, spec)
    H1 = cfg.build_metric(geom, spec)
    if cfg.reference_metric is None:
        # default contrast: seeded smooth perturbation of the initial metric
        from .config import _build_metric
        H1 = _build_metric(geom, spec, {
            "recipe": "exp_perturb", "kind": "trig",
            "seed": int(cfg.initial_metric.get("seed", 11)) + 1,
            "amplitude": float(cfg.initial_metric.get("amplitude", 0.25))})
    n_t = int(cfg.functional.get("n_t", 16))
    paths = cfg.functional.get("paths", ["exp", "linear", "eigen"])
    results = {}
    if "exp" in paths:
        r = fn.functional_path(H0, H1, path="exp", n_t=n_t)
        results["path_exp"] = {"value": r.value, "curvature_term": r.curvature_term,
                               "logdet_term": r.logdet_term, "n_t": n_t}
    if "linear" in paths:
        r = fn.functional_path(H0, H1, path="linear", n_t=n_t)
        results["path_linear"] = {"value": r.value, "curvature_term": r.curvature_term,
                                  "logdet_term": r.logdet_term, "n_t": n_t}
    if "eigen" in paths:
        r = fn.functional_eigen(H0, H1)
        results["eigen"] = {"value": r.value, "curvature_term": r.curvature_term,
                            "logdet_term": r.logdet_term}
    checks = {}
    if "path_exp" in results and "path_linear" in results:
        d = abs(results["path_exp"]["value"] - results["path_linear"]["value"])
        checks["path_independence"] = {"pass": bool(d < 1e-5), "value": d,
                                       "tolerance": 1e-5}
    if "path_exp" in results and "eigen" in results:
        d = abs(results["path_exp"]["value"] - results["eigen"]["value"]) \
            / (1.0 + abs(results["path_exp"]["value"]))
        checks["evaluator_agreement"] = {"pass": bool(d < 1e-4), "value": d,
                                         "tolerance": 1e-4}
    payload = {"inputs": _echo(cfg), "functional": results, "checks": checks,
               "unit": "internal"}
    _write_summary(out_dir, "summary.json", payload)
    return EXIT_OK if all(c["pass"] for c in checks.values()) else EXIT_INVARIANT


def cmd_decompose(cfg: ExperimentConfig, out_dir: str, args) -> int:
    geom = cfg.build_geometry()
    spec = cfg.build_bundle()
    inc = cfg.build_inclusion(geom, spec)
    H = cfg.build_metric(geom, spec)
    pkg = so.induce_all(inc, H)
    res_s, res_q = so.curvature_decomposition_residual(inc, H)
    deg_e = ch.degree(H)
    deg_s = ch.degree(pkg.J)
    deg_q = ch.degree(pkg.K)
    whitney = abs(deg_s + deg_q - deg_e)
    K2 = so.induced_quot_metric(inc, H, lift=[l + f @ (0.25 + 0.5j * np.ones(l.shape[:2] + (inc.sub_rank, inc.quot_rank)))
                                             for l, f in zip(inc.lift, inc.f)])
    lift_dep = max(np.abs(a - b).max() for a, b in zip(K2.data, pkg.K.data))
    checks = {
        "whitney_additivity": {"pass": bool(whitney < 1e-6), "value": whitney,
                               "tolerance": 1e-6},
        "lift_independence": {"pass": bool(lift_dep < 1e-9), "value": float(lift_dep),
                              "tolerance": 1e-9},
    }
    payload = {
        "inputs": _echo(cfg),
        "deg_S": _tagged(deg_s, 1e-6),
        "deg_Q": _tagged(deg_q, 1e-6),
        "deg_E": _tagged(deg_e, 1e-6),
        "sff_l2": _scalar(pkg.sff_l2, 1e-3),
        "res_S": _scalar(res_s, 5e-4),
        "res_Q": _scalar(res_q, 5e-4),
        "checks": checks,
    }
    _write_summary(out_dir, "summary.json", payload)
    return EXIT_OK if all(c["pass"] for c in checks.values()) else EXIT_INVARIANT


def cmd_flow(cfg: ExperimentConfig, out_dir: str, args) -> int:
    geom = cfg.build_geometry()
    spec = cfg.build_bundle()
    H0 = cfg.build_metric(geom, spec)
    controls = cfg.flow_controls(out_dir=out_dir)
    trace, Hend, H0used = fl.run(H0, controls, resume=args.resume)
    rows = trace.as_array()
    eps = controls.eps_targets or (0.1, 0.05, 0.01)
    report = fl.he_report(trace, eps)
    checks = {
        "monotonicity": {
            "pass": bool(max(trace.step_dm, default=0.0) <= 1e-10),
            "value": float(max(trace.step_dm, default=0.0)), "tolerance": 1e-10},
        "degree_drift": {
            "pass": bool(np.abs(rows[:, 8] - rows[0, 8]).max() < 1e-6),
            "value": float(np.abs(rows[:, 8] - rows[0, 8]).max()), "tolerance": 1e-6},
    }
    payload = {
        "inputs": _echo(cfg),
        "status": trace.status,
        "stop_detail": trace.stop_detail,
        "steps": len(trace.step_dm),
        "t_final": float(rows[-1, 0]),
        "M_final": _scalar(float(rows[-1, 1]), 1e-6),
        "he_defect_final": _scalar(float(rows[-1, 2]), 1e-6),
        "he_report": {str(k): v for k, v in report["first_passage"].items()},
        "sup_defect_achieved": _scalar(report["sup_defect_achieved"], 1e-6),
        "checks": checks,
    }
    if cfg.flow.get("flag"):
        flag = [(float(m), int(r)) for m, r in cfg.flow["flag"]]
        payload["atiyah_bott"] = fl.ab_compare(trace, flag, spec.rank,
                                               float(rows[0, 8]))
    _write_summary(out_dir, "summary.json", payload)
    return EXIT_OK if all(c["pass"] for c in checks.values()) else EXIT_INVARIANT


def cmd_report(cfg: ExperimentConfig, out_dir: str, args) -> int:
    trace_path = os.path.join(out_dir, "trace.csv")
    if not os.path.exists(trace_path):
        print(f"no trace.csv under {out_dir}", file=sys.stderr)
        return EXIT_CONFIG
    import csv

    rows = []
    with open(trace_path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for line in reader:
            rows.append([float(v) for v in line])
    arr = np.array(rows)
    trace = fl.FlowTrace(rows=[tuple(r) for r in arr])
    eps = tuple(cfg.flow.get("eps_targets", (0.1, 0.05, 0.01)))
    report = fl.he_report(trace, eps)
    payload = {
        "inputs": _echo(cfg),
        "columns": header,
        "rows": len(rows),
        "t_range": [float(arr[0, 0]), float(arr[-1, 0])],
        "M_final": _scalar(float(arr[-1, 1]), 1e-6),
        "he_report": {str(k): v for k, v in report["first_passage"].items()},
        "sup_defect_achieved": _scalar(report["sup_defect_achieved"], 1e-6),
        "M_monotone": bool(np.all(np.diff(arr[:, 1]) <= 1e-10)),
    }
    if "flag" in (cfg.flow or {}):
        pass
    _write_summary(out_dir, "report.json", payload)
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hymlab",
        description="numerical laboratory for canonical-metric flows on "
                    "holomorphic bundles over model curves")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn_cmd in (("degree", cmd_degree), ("functional", cmd_functional),
                         ("decompose", cmd_decompose), ("flow", cmd_flow),
                         ("report", cmd_report)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment configuration")
        p.add_argument("--out", required=True, help="output / run directory")
        p.add_argument("--resume", default=None, help="checkpoint to resume from")
        p.add_argument("--grid", type=int, default=None,
                       help="override base resolution (torus n / sphere n_r)")
        p.set_defaults(handler=fn_cmd)
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        _apply_grid_override(cfg, args.grid)
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.handler(cfg, args.out, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except fl.FlowBreakdown as exc:
        print(f"numerical breakdown: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (bd.BundleError, fn.PreconditionError) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
