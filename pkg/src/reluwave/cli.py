"""Command line driver.

Every command reads a JSON config (see ``reluwave.config``), writes JSON and
CSV files into ``--out`` and exits with 0 on success, 1 when a check or an
``--assert`` threshold fails (or a pipeline stage breaks) and 2 on a config
error.  Outputs depend only on the config and seed.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .atlas import ManifoldModel
from .config import ConfigError, config_hash, load, validate
from .expansion import Grid, fit_spacing, rate_fit
from .network import (
    analytic_evaluate,
    compile_network,
    count_units,
    evaluate_network,
    expected_widths,
    preactivation_bound,
    relu_simulate_linear,
)
from .pipeline import (
    StageError,
    build_experiment,
    chart_box,
    chart_errors,
    default_planted_terms,
    fit_expansions,
    manifold_errors,
    masking_check,
    oga_chart,
    pou_check,
    radii_check,
    reconstruction_check,
    stage,
)
from .selfcheck import run_selfcheck

COMMANDS = ("frame-selfcheck", "atlas-build", "approximate", "compile-eval", "rates")
DEFAULT_OUT = "reluwave-out"


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _plain(obj):
    """JSON-ready copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        val = float(obj)
        return val if math.isfinite(val) else repr(val)
    return obj


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


def _write_json(out: Path, name: str, obj) -> Path:
    return _write(out, name, json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")


def _header(command: str, cfg: dict) -> dict:
    return {"tool": "reluwave", "version": __version__, "command": command,
            "config_hash": config_hash(cfg), "config": cfg}


def _rates_csv(rows, metric: str, digest: str) -> str:
    lines = ["N,error,metric,config_hash"]
    lines += [f"{n},{err!r},{metric},{digest}" for n, err in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# shared setup
# ---------------------------------------------------------------------------

def _model(cfg: dict) -> ManifoldModel:
    spec = dict(cfg["model"])
    try:
        return ManifoldModel.make(spec.pop("kind"), spec.pop("m"), d=spec.pop("d", None),
                                  embed_seed=spec.pop("embed_seed", 0), **spec)
    except ValueError as exc:
        raise ConfigError(f"bad model: {exc}") from None


def _experiment(cfg: dict, with_target: bool = True):
    model = _model(cfg)
    if model.m <= model.d:
        raise ConfigError("ambient dimension m must exceed the manifold dimension")
    target = cfg.get("target") if with_target else None
    try:
        return build_experiment(model, cfg["delta"], cfg["samples"], cfg["seed"], target,
                                fixture=cfg.get("fixture"))
    except OSError as exc:
        raise ConfigError(f"cannot read fixture: {exc}") from None


def _planted_count(cfg: dict, d: int) -> int | None:
    target = cfg["target"]
    if target["id"] != "finite_combination":
        return None
    return len(target.get("terms") or default_planted_terms(d))


def _fit_budget(exp, cfg: dict, budget: int):
    """Expansions for one budget: K for truncation, N per chart for OGA."""
    if cfg["method"] == "oga":
        return [oga_chart(exp, i, budget, cfg["k_min"], cfg["k_max"])[0].expansion
                for i in range(exp.atlas.size)]
    return fit_expansions(exp, budget, cfg["k_min"], cfg["fit"], cfg["fit_samples"], cfg["seed"] + 1)


def _budgets(cfg: dict) -> list[int]:
    key = "N" if cfg["method"] == "oga" else "K"
    if key not in cfg:
        raise ConfigError(f"method '{cfg['method']}' needs a budget list '{key}'")
    budgets = cfg[key]
    if cfg["method"] == "truncate" and min(budgets) < cfg["k_min"]:
        raise ConfigError("every K must be at least k_min")
    return budgets


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_frame_selfcheck(cfg: dict, args) -> int:
    dims = args.dim or cfg["dims"]
    fixture = args.fixture or cfg.get("fixture")
    if fixture is not None and not Path(fixture).is_file():
        raise ConfigError(f"fixture {fixture} not found")
    reports = []
    for d in dims:
        try:
            reports.append(run_selfcheck(d, fixture=fixture, seed=cfg["seed"]))
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"fixture unusable for d={d}: {exc}") from None
    failed = [f"{name} (d={r['d']})" for r in reports for name in r["failed"]]
    report = _header("frame-selfcheck", cfg) | {"dims": reports, "failed": failed, "passed": not failed}
    _write_json(args.out, "selfcheck.json", report)
    for r in reports:
        print(f"d={r['d']}: " + ("pass" if r["passed"] else "FAIL " + ", ".join(r["failed"])))
    if failed:
        print("check failed: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


def cmd_atlas_build(cfg: dict, args) -> int:
    exp = _experiment(cfg, with_target="target" in cfg)
    with stage("radii"):
        radii = radii_check(exp)
    if not radii["passed"]:
        _write_json(args.out, "atlas_report.json", _header("atlas-build", cfg) | {"radii": radii})
        print(f"radii preflight failed for delta={cfg['delta']}: {radii['guidance']}", file=sys.stderr)
        return 1
    checks = {"radii": radii, "partition_of_unity": pou_check(exp, cfg["check_samples"], cfg["seed"] + 1)}
    if exp.target is not None:
        checks["reconstruction"] = reconstruction_check(exp, cfg["check_samples"], cfg["seed"] + 2)
    atlas = exp.atlas
    report = _header("atlas-build", cfg) | checks | {
        "charts": atlas.size,
        "covering_bound": atlas.c_gamma_bound,
        "r1": atlas.r1,
        "r2": atlas.r2,
        "passed": all(c["passed"] for c in checks.values()),
    }
    _write(args.out, "atlas.json", atlas.to_json())
    _write_json(args.out, "atlas_report.json", report)
    print(f"charts={atlas.size} bound={atlas.c_gamma_bound} "
          + " ".join(f"{k}={'pass' if v['passed'] else 'FAIL'}" for k, v in checks.items()))
    return 0 if report["passed"] or not args.check else 1


def cmd_approximate(cfg: dict, args) -> int:
    exp = _experiment(cfg)
    metric = cfg.get("metric", "l2")
    if metric not in ("l2", "sup"):
        raise ConfigError("approximate reports l2 or sup errors")
    rows, saved = [], {}
    for budget in _budgets(cfg):
        exps = _fit_budget(exp, cfg, budget)
        errors = manifold_errors(exp, exps, cfg["eval_samples"], cfg["seed"] + 2)
        rows.append({"budget": budget, "terms": sum(len(e) for e in exps),
                     "chart_terms": [len(e) for e in exps], "errors": errors})
        saved[str(budget)] = {str(e.chart_id): e.to_list() for e in exps}
        print(f"budget={budget} terms={rows[-1]['terms']} {metric}={errors[metric]:.6g}")
    errs = [r["errors"][metric] for r in rows]
    decreasing = all(b < a for a, b in zip(errs, errs[1:]))
    report = _header("approximate", cfg) | {
        "budget_kind": "N" if cfg["method"] == "oga" else "K",
        "metric": metric,
        "runs": rows,
        "strictly_decreasing": decreasing,
    }
    _write_json(args.out, "expansions.json", saved)
    _write_json(args.out, "approximate.json", report)
    want = cfg.get("thresholds", {}).get("strictly_decreasing", True)
    if args.check and want and not decreasing:
        print(f"assertion failed: {metric} errors not strictly decreasing", file=sys.stderr)
        return 1
    return 0


def _equivalence_points(exp, cfg: dict, lo: float, hi: float) -> np.ndarray:
    """Half near the manifold (within about r2 in the normal directions), half uniform in the box."""
    n = cfg["equivalence_points"]
    rng = np.random.default_rng(cfg["seed"] + 3)
    m = exp.model.m
    near = exp.model.sample(n - n // 2, seed=cfg["seed"] + 4)
    near = near + rng.normal(scale=exp.atlas.r2 / math.sqrt(m), size=near.shape)
    box = rng.uniform(lo, hi, size=(n // 2, m))
    return np.clip(np.vstack([near, box]), lo, hi)


def _relative_gap(a, b) -> float:
    return float(np.max(np.abs(a - b) / (1.0 + np.abs(b)))) if len(b) else 0.0


def cmd_compile_eval(cfg: dict, args) -> int:
    exp = _experiment(cfg)
    budget = _budgets(cfg)[0]
    exps = _fit_budget(exp, cfg, budget)
    atlas, p, m, d = exp.atlas, exp.params, exp.model.m, exp.model.d
    with stage("compile"):
        net, manifest = compile_network(atlas, exps, p)
    if "box" in cfg:
        lo, hi = cfg["box"]["lo"], cfg["box"]["hi"]
    else:
        lo = float(atlas.anchors.min()) - atlas.delta
        hi = float(atlas.anchors.max()) + atlas.delta
    if not hi > lo:
        raise ConfigError("box needs hi > lo")

    checks = {}
    widths_ok = (manifest.widths == expected_widths(m, d, manifest.chart_terms)
                 and manifest.c1 == atlas.size * (m + 4 * (m - d)) + 1
                 and manifest.c2 == (8 * d + 2) * atlas.size
                 and count_units(net, exps).to_dict() == manifest.to_dict())
    checks["widths"] = {"widths": manifest.widths,
                        "expected": expected_widths(m, d, manifest.chart_terms), "passed": widths_ok}

    with stage("evaluate"):
        x = _equivalence_points(exp, cfg, lo, hi)
        ref = analytic_evaluate(atlas, exps, p, x)
        gap = _relative_gap(evaluate_network(net, x), ref)
    checks["equivalence"] = {"points": len(x), "nonzero": int(np.count_nonzero(ref)),
                             "max_relative_gap": gap, "passed": gap <= 1e-9}

    with stage("simulate"):
        bound = preactivation_bound(net, lo, hi)
        shift = 2.0 * bound + 1.0
        sim = relu_simulate_linear(net, shift, lo, hi)
        sim_gap = _relative_gap(evaluate_network(sim, x), ref)
    checks["relu_simulation"] = {"box": [lo, hi], "shift": shift, "bound": bound,
                                 "max_relative_gap": sim_gap, "passed": sim_gap <= 1e-9}

    with stage("masking"):
        checks["masking"] = masking_check(exp, net, cfg["check_samples"], cfg["seed"] + 5)

    if atlas.size == 1 and exp.model.kind == "flat_patch":
        checks["single_chart"] = _single_chart_check(exp, net, exps[0], cfg, budget)

    passed = all(c["passed"] for c in checks.values())
    report = _header("compile-eval", cfg) | {"budget": budget, "manifest": manifest.to_dict(),
                                             "checks": checks, "passed": passed}
    _write(args.out, "network.json", net.to_json())
    _write_json(args.out, "compile_eval.json", report)
    print(f"widths={manifest.widths} " + " ".join(
        f"{k}={'pass' if v['passed'] else 'FAIL'}" for k, v in checks.items()))
    if not passed:
        bad = [k for k, v in checks.items() if not v["passed"]]
        print("check failed: " + ", ".join(bad), file=sys.stderr)
        return 1
    return 0


def _single_chart_check(exp, net, expansion, cfg, budget) -> dict:
    """On a one-chart flat patch the network error equals the chart-local error."""
    chart = exp.atlas.charts[0]
    lo, hi = chart_box(exp, 0)
    K = budget if cfg["method"] == "truncate" else cfg["k_max"]
    u = Grid.with_spacing(lo, hi, fit_spacing(K, exp.model.d)).vertices()
    x = chart.anchor + u @ chart.tangent_basis.T
    end_to_end = float(np.abs(evaluate_network(net, x) - exp.target(x)).max())
    local = chart_errors(exp, expansion, K)["sup"]
    return {"end_to_end_sup": end_to_end, "chart_local_sup": local,
            "passed": abs(end_to_end - local) <= 1e-9}


def _default_max_slope(metric: str, d: int) -> float | None:
    if metric == "sup":
        return -1.5 / d
    if metric == "l2_squared":
        return -0.9
    return None


def cmd_rates(cfg: dict, args) -> int:
    exp = _experiment(cfg)
    metric = cfg.get("metric", "l2_squared" if cfg["method"] == "oga" else "sup")
    budgets = _budgets(cfg)
    rows = []
    if cfg["method"] == "oga":
        if metric == "sup":
            raise ConfigError("OGA rates use the l2 or l2_squared metric")
        if not 0 <= cfg["chart"] < exp.atlas.size:
            raise ConfigError(f"chart {cfg['chart']} not in the atlas")
        res, _ = oga_chart(exp, cfg["chart"], max(budgets), cfg["k_min"], cfg["k_max"])
        norms = res.residual_norms
        for n in budgets:
            r = norms[min(n, len(norms) - 1)]
            rows.append((n, r * r if metric == "l2_squared" else r))
        scale = norms[0] ** 2 if metric == "l2_squared" else norms[0]
    else:
        for K in budgets:
            exps = _fit_budget(exp, cfg, K)
            if exp.atlas.size == 1 and cfg["fit"] == "tangent":
                errs = chart_errors(exp, exps[0], K)
            else:
                errs = manifold_errors(exp, exps, cfg["eval_samples"], cfg["seed"] + 2)
            err = errs["l2"] ** 2 if metric == "l2_squared" else errs[metric]
            rows.append((2 ** (K + 1), err))
            print(f"K={K} N={2 ** (K + 1)} {metric}={err:.6g}")
        scale = None

    digest = config_hash(cfg)
    errs = [e for _, e in rows]
    slope = intercept = None
    if len(rows) >= 3 and all(e > 0 for e in errs):
        fit = rate_fit([n for n, _ in rows], errs, metric)
        slope, intercept = fit.slope, fit.intercept
    thresholds = cfg.get("thresholds", {})
    max_slope = thresholds.get("max_slope", _default_max_slope(metric, exp.model.d))
    failures = []

    planted = _planted_count(cfg, exp.model.d)
    recovery = None
    if planted is not None and cfg["method"] == "oga":
        tol = thresholds.get("recovery_tol", 1e-10)
        after = [e for n, e in rows if n >= planted]
        recovery = {"planted_terms": planted, "tolerance": tol,
                    "max_relative_error": max(after) / scale if after else None,
                    "passed": bool(after) and max(after) <= tol * scale}
        if not recovery["passed"]:
            failures.append("planted terms not recovered")
    elif max_slope is not None:
        if slope is None or slope > max_slope:
            failures.append(f"slope {slope} above threshold {max_slope}")
    if thresholds.get("strictly_decreasing") and not all(b < a for a, b in zip(errs, errs[1:])):
        failures.append("errors not strictly decreasing")

    summary = _header("rates", cfg) | {
        "metric": metric,
        "budget_kind": "N" if cfg["method"] == "oga" else "K",
        "rows": [{"N": n, "error": e} for n, e in rows],
        "slope": slope,
        "intercept": intercept,
        "max_slope": max_slope,
        "recovery": recovery,
        "failures": failures,
    }
    _write(args.out, "rates.csv", _rates_csv(rows, metric, digest))
    _write_json(args.out, "rates.json", summary)
    print(f"slope={slope if slope is None else f'{slope:.4f}'} threshold={max_slope}"
          + (" " + "; ".join(failures) if failures else ""))
    if args.check and failures:
        print("assertion failed: " + "; ".join(failures), file=sys.stderr)
        return 1
    return 0


HANDLERS = {
    "frame-selfcheck": cmd_frame_selfcheck,
    "atlas-build": cmd_atlas_build,
    "approximate": cmd_approximate,
    "compile-eval": cmd_compile_eval,
    "rates": cmd_rates,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reluwave", description="ReLU wavelet approximation experiments")
    parser.add_argument("--version", action="version", version=f"reluwave {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=name != "frame-selfcheck",
                       help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--assert", dest="check", action="store_true",
                       help="turn threshold misses into exit code 1")
        p.add_argument("--out", type=Path, help=f"output directory (default: config 'out' or {DEFAULT_OUT})")
        if name == "frame-selfcheck":
            p.add_argument("--dim", type=int, action="append", choices=(1, 2, 3),
                           help="dimension to check (repeatable)")
            p.add_argument("--fixture", help="normalization-constant fixture to use instead of the packaged one")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config is None:
            cfg = validate({} if args.seed is None else {"seed": args.seed}, args.command)
        else:
            cfg = load(args.config, args.command, seed=args.seed)
        out = cfg.pop("out", None)
        args.out = args.out or Path(out or DEFAULT_OUT)
        return HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
