"""Command-line front end.

Every subcommand takes its inputs from a JSON config (``--config``) and/or
inline flags, which win over the config.  Reports go to ``--out`` (stdout when
absent) through a temporary file and an atomic rename.

Exit codes: 0 success, 2 configuration error, 3 numerical or solver error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from typing import Optional

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import geometry as geo
from . import mc
from .config import DEFAULT
from .errors import ConfigError, UnbiasGeoError
from .estimate import map_estimate, mle
from .geodesic import distance
from .manifold import make_builtin, read_dataset
from .prior import (
    Estimand,
    LogPrior,
    alpha_parallel_prior,
    build_prior_1d,
    build_prior_along_estimand,
    build_prior_geodesic,
    condition_residual,
    constant_prior,
    jeffreys_prior,
    make_estimand,
    make_prior,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SUBCOMMANDS = ("geometry", "prior", "estimate", "geodesic", "bias", "moment")


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", "--config") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}", path) from None
    if not isinstance(obj, dict):
        raise ConfigError("top level must be an object", path)
    return obj


def _section(cfg: dict, key: str) -> dict:
    val = cfg.get(key, {})
    if not isinstance(val, dict):
        raise ConfigError("must be an object", key)
    return val


def _typed(value, kind, field):
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", field)
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", field)
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", field)
        return value
    return value


def parse_point(text, field) -> np.ndarray:
    if isinstance(text, (list, tuple)):
        vals = text
    else:
        vals = [v for v in str(text).split(",") if v.strip()]
    try:
        return np.array([float(v) for v in vals], dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"expected comma-separated numbers, got {text!r}", field) from None


def _points(value, field) -> list:
    if value is None:
        return []
    if isinstance(value, str):
        return [parse_point(p, field) for p in value.split(";") if p.strip()]
    if not isinstance(value, list):
        raise ConfigError("expected a list of points", field)
    return [parse_point(p, f"{field}[{i}]") for i, p in enumerate(value)]


def _json_arg(text, field):
    if text is None:
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg}", field) from None


def resolve(args, cfg) -> dict:
    """Merge inline flags over the config file."""
    model = dict(_section(cfg, "model"))
    estimand = dict(_section(cfg, "estimand"))
    prior = dict(_section(cfg, "prior"))
    run = dict(_section(cfg, "run"))
    output = dict(_section(cfg, "output"))
    if args.model is not None:
        model["name"] = args.model
    if args.params is not None:
        model["params"] = _json_arg(args.params, "--params")
    if args.chart is not None:
        model["chart"] = args.chart
    if getattr(args, "estimand", None) is not None:
        estimand["name"] = args.estimand
    if getattr(args, "estimand_params", None) is not None:
        estimand["params"] = _json_arg(args.estimand_params, "--estimand-params")
    if getattr(args, "prior", None) is not None:
        prior["method"] = args.prior
    if getattr(args, "prior_params", None) is not None:
        prior["params"] = _json_arg(args.prior_params, "--prior-params")
    if getattr(args, "prior_file", None) is not None:
        prior["file"] = args.prior_file
    if args.seed is not None:
        run["seed"] = args.seed
    if args.out is not None:
        output["path"] = args.out
    if args.format is not None:
        output["format"] = args.format
    output.setdefault("format", "json")
    if output["format"] not in ("csv", "json"):
        raise ConfigError("format must be csv or json", "output.format")
    return {"model": model, "estimand": estimand, "prior": prior, "run": run, "output": output, "raw": cfg}


def build_model(section: dict):
    name = section.get("name")
    if name is None:
        raise ConfigError("model name is required", "model.name")
    params = section.get("params") or {}
    if not isinstance(params, dict):
        raise ConfigError("must be an object", "model.params")
    return make_builtin(_typed(name, str, "model.name"), params, section.get("chart"))


def build_estimand(model, section: dict):
    name = section.get("name")
    if name is None:
        raise ConfigError("estimand name is required", "estimand.name")
    return make_estimand(model, name, section.get("params") or {})


# ---------------------------------------------------------------------------
# prior files
# ---------------------------------------------------------------------------


def prior_to_json(prior: LogPrior, spec: dict, knots) -> dict:
    out = {
        "method": spec.get("method"),
        "label": prior.label,
        "model": spec.get("model"),
        "estimand": spec.get("estimand"),
        "params": spec.get("params", {}),
        "anchor": prior.meta.get("anchor", prior.meta.get("base")),
        "form": prior.meta.get("form"),
    }
    if knots:
        out["knots"] = {"variable": "t", "t": [k[0] for k in knots], "log_prior": [k[1] for k in knots],
                        "interpolation": "pchip"}
    return out


def prior_from_json(obj: dict, model, use_knots: bool = False) -> LogPrior:
    """Rebuild a prior from a prior.json object.

    The stored recipe (method, estimand, anchor, params) is rebuilt exactly.
    With ``use_knots`` the tabulated (t, l~) knots are interpolated instead;
    evaluation outside the knot range is then a configuration error.
    """
    method = obj.get("method")
    if method is None:
        raise ConfigError("prior file lacks a method", "prior.file.method")
    knots = obj.get("knots")
    if use_knots and method in ("one-d", "condg") and knots:
        t = np.asarray(knots["t"], dtype=float)
        lv = np.asarray(knots["log_prior"], dtype=float)
        if t.size < 2:
            raise ConfigError("need at least two knots", "prior.file.knots")
        order = np.argsort(t)
        interp = PchipInterpolator(t[order], lv[order], extrapolate=False)
        deriv = interp.derivative()
        est_spec = obj.get("estimand") or {}
        f = make_estimand(model, est_spec.get("name"), est_spec.get("params") or {})

        def ev(x):
            val = float(interp(f.eval(x)))
            if not math.isfinite(val):
                raise ConfigError("estimand value outside the tabulated knots", "prior.file.knots")
            return val

        return LogPrior(ev, lambda x: float(deriv(f.eval(x))) * f.grad(x), method, {"method": method})
    return make_prior_spec(model, {"method": method, "params": obj.get("params") or {},
                                   "anchor": obj.get("anchor")}, obj.get("estimand"))


def _one_d(model, f, anchor):
    """One-dimensional prior; a decreasing estimand is negated first (the condition is linear in f)."""
    base = model.reference if anchor is None else anchor
    if f.grad(model.check(base))[0] < 0:
        g = f
        f = Estimand(lambda x: -g.eval(x), lambda x: -g.grad(x), lambda x: -g.hessian(x), f"-{g.label}")
    return build_prior_1d(model, f, anchor=anchor)


def make_prior_spec(model, section: dict, estimand_section=None) -> LogPrior:
    if "file" in section:
        path = section["file"]
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read prior file: {exc.strerror}", "prior.file") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON at line {exc.lineno}: {exc.msg}", "prior.file") from None
        return prior_from_json(obj, model, bool(section.get("use_knots", False)))
    method = section.get("method", "uniform")
    params = section.get("params") or {}
    anchor = section.get("anchor")
    anchor = None if anchor is None else parse_point(anchor, "prior.anchor")
    if method in ("one-d", "condg", "geodesic"):
        if not estimand_section and method != "geodesic":
            raise ConfigError("this method needs an estimand", "estimand.name")
        if method == "one-d":
            return _one_d(model, build_estimand(model, estimand_section), anchor)
        if method == "condg":
            return build_prior_along_estimand(model, build_estimand(model, estimand_section), anchor=anchor)
        base = anchor if anchor is not None else model.reference
        power = float(params.get("fprime_power", 0.0))
        # f(r^2) with f' = (r^2)^power; power 0 is f = r^2
        return build_prior_geodesic(model, base, lambda t: t**power)
    if method == "alpha-parallel":
        return alpha_parallel_prior(model, float(params.get("alpha", 0.0)), float(params.get("alpha0", 1.0)))
    if method == "jeffreys":
        return jeffreys_prior(model)
    if method in ("uniform", "constant"):
        return constant_prior()
    return make_prior(model, method, params)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def atomic_write(path: Optional[str], text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def read_report(path: str):
    """Read a JSON report written by the CLI; bias reports come back as `mc.BiasReport`."""
    with open(path) as fh:
        obj = json.load(fh)
    if isinstance(obj, dict) and obj.get("kind") == "bias":
        return mc.BiasReport.from_dict(obj["report"])
    return obj


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_geometry(args, conf):
    model = build_model(conf["model"])
    raw = conf["raw"]
    action = args.action or raw.get("action", "frame")
    if action == "check":
        pts = _points(args.points or raw.get("points"), "points") or [model.reference]
        res = geo.check_identities(model, pts, curvature=not args.no_curvature)
        report = {"kind": "geometry-check", "model": model.name, "points": [p.tolist() for p in pts], "max_residual": res}
        rows = [["identity", "max_residual"]] + [[k, repr(float(v))] for k, v in sorted(res.items())]
        return report, rows
    if action != "frame":
        raise ConfigError(f"unknown geometry action {action!r}", "action")
    point = parse_point(args.point if args.point is not None else raw.get("point", model.reference.tolist()), "point")
    alpha = float(args.alpha if args.alpha is not None else raw.get("alpha", 0.0))
    frame = geo.frame_at(model, point)
    report = {
        "kind": "geometry",
        "model": model.name,
        "chart": model.chart_name,
        "point": frame.point,
        "alpha": alpha,
        "metric": frame.metric,
        "skewness": frame.skewness,
        "contracted_skewness": frame.contracted_skewness,
        "connection": frame.connection(alpha),
        "source": frame.source,
    }
    if args.curvature:
        curv = geo.riemann_curvature(model, point, alpha)
        report["riemann"] = curv.riemann
        report["ricci"] = curv.ricci
    d = model.dim
    rows = [["i", "j", "metric"]] + [[i, j, repr(float(frame.metric[i, j]))] for i in range(d) for j in range(d)]
    return report, rows


def cmd_prior(args, conf):
    model = build_model(conf["model"])
    raw = conf["raw"]
    action = args.action or raw.get("action", "build")
    if action not in ("build", "residual"):
        raise ConfigError(f"unknown prior action {action!r}", "action")
    psec = dict(conf["prior"])
    if args.anchor is not None:
        psec["anchor"] = args.anchor
    prior = make_prior_spec(model, psec, conf["estimand"])
    pts = _points(args.points or raw.get("points"), "points")
    estimand = build_estimand(model, conf["estimand"]) if conf["estimand"].get("name") else None
    evaluations = []
    for p in pts:
        entry = {"point": p.tolist(), "log_prior": prior.eval(p)}
        if estimand is not None:
            entry["residual"] = condition_residual(model, p, estimand, prior)
        evaluations.append(entry)
    knots = []
    t_grid = raw.get("t_grid")
    if args.t_grid is not None:
        t_grid = parse_point(args.t_grid, "--t-grid").tolist()
    if estimand is not None and psec.get("method") in ("one-d", "condg") and (t_grid or pts):
        if not t_grid:
            ts = [estimand.eval(p) for p in pts]
            anchor_t = estimand.eval(model.reference if psec.get("anchor") is None else parse_point(psec["anchor"], "prior.anchor"))
            lo, hi = min(ts + [anchor_t]), max(ts + [anchor_t])
            t_grid = np.linspace(lo, hi, 33).tolist() if hi > lo else [lo]
        knots = _tabulate(model, prior, estimand, psec, t_grid)
    spec = {"method": psec.get("method"), "model": conf["model"], "estimand": conf["estimand"] or None,
            "params": psec.get("params") or {}}
    report = prior_to_json(prior, spec, knots)
    report["kind"] = "prior"
    report["evaluations"] = evaluations
    rows = [["t", "log_prior"]] + [[repr(t), repr(v)] for t, v in knots]
    if action == "residual" or not knots:
        rows = [["point", "log_prior", "residual"]] + [
            [" ".join(map(repr, e["point"])), repr(e["log_prior"]), repr(e.get("residual", float("nan")))] for e in evaluations
        ]
    return report, rows


def _tabulate(model, prior, estimand, psec, t_grid):
    if psec.get("method") == "condg":
        path = getattr(prior, "path")
        return [(float(t), -0.5 * path.integral(float(t))) for t in t_grid]
    # one-d: invert the monotone estimand on the line with brentq
    from scipy.optimize import brentq

    lo, hi = model.lower[0], model.upper[0]
    ref = float(model.reference[0])
    out = []
    for t in t_grid:
        def g(x):
            return estimand.eval([x]) - t

        a, b = ref, ref
        step = max(1.0, abs(ref)) * 0.5
        for _ in range(200):
            if g(a) <= 0 <= g(b) or g(a) >= 0 >= g(b):
                break
            a = max(a - step, lo + 1e-12 * max(1.0, abs(lo)) if np.isfinite(lo) else a - step)
            b = min(b + step, hi - 1e-12 * max(1.0, abs(hi)) if np.isfinite(hi) else b + step)
            step *= 2.0
        else:
            raise ConfigError(f"level {t} not reached by the estimand", "t_grid")
        x = brentq(g, a, b, xtol=1e-14, rtol=1e-14) if a != b else a
        out.append((float(t), prior.eval([x])))
    return out


def cmd_estimate(args, conf):
    model = build_model(conf["model"])
    raw = conf["raw"]
    data_path = args.data or raw.get("data")
    if data_path is None:
        raise ConfigError("a data file is required", "data")
    try:
        data = read_dataset(model, data_path)
    except OSError as exc:
        raise ConfigError(f"cannot read data: {exc.strerror}", "data") from None
    psec = conf["prior"]
    if not psec or psec.get("method", "uniform") in ("uniform", "constant") and "file" not in psec:
        res = mle(model, data)
    else:
        res = map_estimate(model, make_prior_spec(model, psec, conf["estimand"]), data)
    report = {"kind": "estimate", "model": model.name} | res.to_dict()
    rows = [["coordinate", "estimate"]] + [
        [model.coordinate_names[i] if model.coordinate_names else str(i), repr(float(v))] for i, v in enumerate(res.estimate)
    ]
    return report, rows


def cmd_geodesic(args, conf):
    model = build_model(conf["model"])
    raw = conf["raw"]
    action = args.action or raw.get("action", "distance")
    if action != "distance":
        raise ConfigError(f"unknown geodesic action {action!r}", "action")
    a = args.from_ if args.from_ is not None else raw.get("from")
    b = args.to if args.to is not None else raw.get("to")
    if a is None or b is None:
        raise ConfigError("both endpoints are required", "from" if a is None else "to")
    res = distance(model, parse_point(a, "from"), parse_point(b, "to"))
    knots, path = res.path.r, res.path.points
    report = {"kind": "geodesic", "model": model.name, "from": parse_point(a, "from"), "to": parse_point(b, "to"),
              "r": res.r, "zeta": res.zeta, "path": {"s": knots, "points": path}}
    rows = [["s"] + [f"x{i + 1}" for i in range(model.dim)]] + [
        [repr(float(s))] + [repr(float(v)) for v in p] for s, p in zip(knots, path)
    ]
    return report, rows


def _require_seed(conf):
    seed = conf["run"].get("seed")
    if seed is None:
        raise ConfigError("a seed is required for stochastic commands", "run.seed")
    return _typed(seed, int, "run.seed")


def cmd_bias(args, conf):
    run = conf["run"]
    seed = _require_seed(conf)
    psec = conf["prior"]
    exp = mc.BiasExperiment(
        model=_typed(conf["model"].get("name"), str, "model.name"),
        model_params=conf["model"].get("params") or {},
        chart=conf["model"].get("chart"),
        estimand=_typed(conf["estimand"].get("name"), str, "estimand.name"),
        estimand_params=conf["estimand"].get("params") or {},
        prior=psec.get("method", "uniform"),
        prior_params=psec.get("params") or {},
        param_grid=tuple(tuple(p) for p in _points(run.get("param_grid"), "run.param_grid")),
        n_grid=tuple(_typed(v, int, "run.n_grid") for v in run.get("n_grid", [])),
        replicates=_typed(run.get("replicates", 1000), int, "run.replicates"),
        seed=seed,
        crn=bool(run.get("crn", True)),
    )
    report = mc.run_bias(exp, threads=args.threads)
    return {"kind": "bias", "report": report.to_dict()}, mc.report_csv_rows(report)


def cmd_moment(args, conf):
    run = conf["run"]
    seed = _require_seed(conf)
    point = run.get("point")
    if point is None:
        pts = _points(run.get("param_grid"), "run.param_grid")
        if not pts:
            raise ConfigError("a parameter point is required", "run.point")
        point = pts[0]
    rec = mc.moment_check(
        _typed(conf["model"].get("name"), str, "model.name"),
        conf["prior"].get("method", "uniform"),
        parse_point(point, "run.point"),
        _typed(run.get("n"), int, "run.n"),
        _typed(run.get("replicates", 1000), int, "run.replicates"),
        seed,
        model_params=conf["model"].get("params") or {},
        prior_params=conf["prior"].get("params") or {},
        chart=conf["model"].get("chart"),
    )
    d = len(rec.mean)
    rows = [["quantity", "index", "mc", "se", "predicted"]]
    rows += [["mean", str(i), repr(rec.mean[i]), repr(rec.mean_se[i]), repr(rec.mean_pred[i])] for i in range(d)]
    rows += [["cov", f"{i} {j}", repr(rec.cov[i][j]), repr(rec.cov_se[i][j]), repr(rec.cov_pred[i][j])]
             for i in range(d) for j in range(d)]
    return {"kind": "moment"} | rec.to_dict(), rows


COMMANDS = {
    "geometry": cmd_geometry,
    "prior": cmd_prior,
    "estimate": cmd_estimate,
    "geodesic": cmd_geodesic,
    "bias": cmd_bias,
    "moment": cmd_moment,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output path (stdout when omitted)")
    common.add_argument("--format", choices=("csv", "json"))
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, help="worker threads (default: UNBIASGEO_THREADS or CPU count)")
    common.add_argument("--model")
    common.add_argument("--params", help="model parameters as JSON")
    common.add_argument("--chart")

    parser = argparse.ArgumentParser(prog="unbiasgeo", description="Bias-reducing priors on statistical manifolds.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("geometry", parents=[common], help="metric, skewness, connection and identity checks")
    p.add_argument("action", nargs="?", choices=("frame", "check"))
    p.add_argument("--point")
    p.add_argument("--points", help="semicolon-separated points for check")
    p.add_argument("--alpha", type=float)
    p.add_argument("--curvature", action="store_true")
    p.add_argument("--no-curvature", action="store_true")

    p = sub.add_parser("prior", parents=[common], help="build or evaluate a prior")
    p.add_argument("action", nargs="?", choices=("build", "residual"))
    p.add_argument("--estimand")
    p.add_argument("--estimand-params")
    p.add_argument("--method", dest="prior")
    p.add_argument("--prior-params")
    p.add_argument("--anchor")
    p.add_argument("--points")
    p.add_argument("--t-grid")

    p = sub.add_parser("estimate", parents=[common], help="MLE or MAP estimate from a CSV dataset")
    p.add_argument("--data")
    p.add_argument("--prior")
    p.add_argument("--prior-params")
    p.add_argument("--prior-file")
    p.add_argument("--estimand")
    p.add_argument("--estimand-params")

    p = sub.add_parser("geodesic", parents=[common], help="geodesic distance by shooting")
    p.add_argument("action", nargs="?", choices=("distance",))
    p.add_argument("--from", dest="from_")
    p.add_argument("--to")

    p = sub.add_parser("bias", parents=[common], help="Monte Carlo bias experiment")
    p.add_argument("--estimand")
    p.add_argument("--estimand-params")
    p.add_argument("--prior")
    p.add_argument("--prior-params")

    p = sub.add_parser("moment", parents=[common], help="Monte Carlo check of the moment expansions")
    p.add_argument("--prior")
    p.add_argument("--prior-params")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        conf = resolve(args, load_config(args.config))
        report, rows = COMMANDS[args.command](args, conf)
        fmt = conf["output"]["format"]
        text = dump_json(report) if fmt == "json" else _csv_text(rows)
        atomic_write(conf["output"].get("path"), text)
    except ConfigError as exc:
        print(f"unbiasgeo {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UnbiasGeoError as exc:
        print(f"unbiasgeo {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
