"""Command-line driver: JSON run configs in, CSV curves plus JSON sidecars out.

Every run writes ``<name>.csv`` (when the command produces a curve) and
``<name>.json`` holding the fully resolved configuration under ``"config"``.
A sidecar is itself a valid ``--config`` input and re-runs bit-identically.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .asymptotics import compute_constants, lifshitz_1d_constant
from .errors import ConfigError, DomainError, LabError, NumericalError, ResourceError
from .fit import fit_log_corrected, fit_power
from .fk import growth, survival
from .ids import (IdsCurve, LaplaceCurve, classical_ids, empirical_ids, laplace_from_ids,
                  n1_mc, n1_quadrature_curve, negative_ids)
from .operator import GridSpec
from .randfield import ModelParams, PotentialSpec, sample_configuration

COMMANDS = ("sample", "ids", "negative", "classical", "laplace", "constants", "fk", "fit", "lifshitz1d")

PARAM_DEFAULTS = {"d": 1, "theta": 1.0, "h": 1.0, "seed": 0, "workers": 1}
SPEC_DEFAULTS = {"c0": 1.0, "alpha": 4.0, "r0": 0.1, "sign": 1, "compact_r": None,
                 "u_cap": "inf", "obstacle_rho": 0.0}
GRID_DEFAULTS = {"box_r": 100.0, "dx": 0.1, "n_per_side": None, "bc": "dirichlet"}

# command-specific blocks
COMMAND_DEFAULTS: dict[str, dict] = {
    "sample": {"box_r": 20.0, "replicate": 0, "tail_tol": 1e-6},
    "ids": {"grid": GRID_DEFAULTS, "lambda_grid": None, "replicates": 20, "tail_tol": 1e-6},
    "negative": {"grid": GRID_DEFAULTS, "lambda_grid": None, "replicates": 20, "tail_tol": 1e-6},
    "classical": {"lambda_grid": None, "replicates": 20, "box_r": 8.0, "points_per_unit": 16,
                  "tail_tol": 1e-6},
    "laplace": {"method": "quadrature", "t_grid": None, "replicates": 2000, "n_x": None,
                "tol": 1e-9, "grid": GRID_DEFAULTS, "lambda_grid": None, "tail_tol": 1e-6},
    "constants": {"u0": 1.0},
    "fk": {"x": [0.5], "t_grid": None, "n_paths": 4096, "n_configs": 8, "dt": 0.01,
           "table_dx": 0.01, "box_r": None, "tail_tol": 1e-6},
    "fit": {"input": None, "model": "power_lambda", "window": None},
    "lifshitz1d": {"box_rs": [400.0], "dx": 0.05, "lambda_grid": None, "replicates": 200,
                   "window": [0.05, 0.5], "exponent_tol": 0.2, "coefficient_tol": 0.3,
                   "tail_tol": 1e-6},
}

REQUIRED = {"ids": ("lambda_grid",), "negative": ("lambda_grid",), "classical": ("lambda_grid",),
            "laplace": ("t_grid",), "fk": ("t_grid",), "fit": ("input",), "lifshitz1d": ("lambda_grid",)}
OUT_DEFAULTS = {"dir": ".", "name": None}


# -- config handling ----------------------------------------------------------

def _merge(defaults: dict, given: dict, path: str) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown key {path + key!r}", field=path + key)
    out = {}
    for key, dval in defaults.items():
        if key in given:
            gval = given[key]
            if isinstance(dval, dict) and dval and not isinstance(gval, dict):
                raise ConfigError(f"{path + key} must be an object", field=path + key)
            out[key] = _merge(dval, gval, f"{path}{key}.") if isinstance(dval, dict) and dval else gval
        else:
            out[key] = copy.deepcopy(dval)
    return out


def resolve_config(raw: dict) -> dict:
    """Validate keys and fill every default that can influence the run."""
    if "config" in raw and "command" not in raw:
        raw = raw["config"]
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", field="")
    command = raw.get("command")
    if command not in COMMANDS:
        raise ConfigError(f"command must be one of {COMMANDS}, got {command!r}", field="command")
    defaults = {"command": command, "params": PARAM_DEFAULTS, "spec": SPEC_DEFAULTS,
                "out": OUT_DEFAULTS, **COMMAND_DEFAULTS[command]}
    cfg = _merge(defaults, raw, "")
    if cfg["out"]["name"] is None:
        cfg["out"]["name"] = command
    for key in REQUIRED.get(command, ()):
        if cfg[key] is None:
            raise ConfigError(f"missing required key {key!r}", field=key)
    return cfg


def _parse_scalar(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value", field=assignment)
    path, text = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into {k!r}", field=path)
    node[keys[-1]] = _parse_scalar(text)


def _float(value, field: str) -> float:
    if isinstance(value, str) and value.lower() in ("inf", "infinity"):
        return math.inf
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{field} must be a number", field=field) from None


def _int(value, field: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(f"{field} must be an integer", field=field)
    return int(value)


def build_params(cfg: dict) -> ModelParams:
    p = cfg["params"]
    return ModelParams(d=_int(p["d"], "params.d"), theta=_float(p["theta"], "params.theta"),
                       h=_float(p["h"], "params.h"), seed=_int(p["seed"], "params.seed"),
                       workers=_int(p["workers"], "params.workers"))


def build_spec(cfg: dict) -> PotentialSpec:
    s = cfg["spec"]
    cr = s["compact_r"]
    return PotentialSpec(c0=_float(s["c0"], "spec.c0"), alpha=_float(s["alpha"], "spec.alpha"),
                         r0=_float(s["r0"], "spec.r0"), sign=_int(s["sign"], "spec.sign"),
                         compact_r=None if cr is None else _float(cr, "spec.compact_r"),
                         u_cap=_float(s["u_cap"], "spec.u_cap"),
                         obstacle_rho=_float(s["obstacle_rho"], "spec.obstacle_rho"))


def build_grid(block: dict, d: int, prefix: str = "grid") -> GridSpec:
    box_r = _float(block["box_r"], f"{prefix}.box_r")
    if block["n_per_side"] is not None:
        return GridSpec(d=d, box_r=box_r, n_per_side=_int(block["n_per_side"], f"{prefix}.n_per_side"),
                        bc=block["bc"])
    if block["dx"] is None:
        raise ConfigError("grid needs dx or n_per_side", field=f"{prefix}.dx")
    return GridSpec.from_spacing(d, box_r, _float(block["dx"], f"{prefix}.dx"), bc=block["bc"])


def expand_grid(value, field: str) -> np.ndarray:
    """A list of values or {start, stop, num, spacing in {linear, log}}."""
    if isinstance(value, list):
        arr = np.array([_float(v, field) for v in value])
    elif isinstance(value, dict):
        unknown = set(value) - {"start", "stop", "num", "spacing"}
        if unknown:
            raise ConfigError(f"unknown key {field}.{sorted(unknown)[0]}", field=field)
        try:
            start, stop = float(value["start"]), float(value["stop"])
            num = _int(value["num"], f"{field}.num")
        except KeyError as exc:
            raise ConfigError(f"{field} needs {exc.args[0]}", field=f"{field}.{exc.args[0]}") from None
        spacing = value.get("spacing", "linear")
        if spacing == "linear":
            arr = np.linspace(start, stop, num)
        elif spacing == "log":
            if start <= 0 or stop <= 0:
                raise ConfigError(f"{field}: log spacing needs positive bounds", field=field)
            arr = np.geomspace(start, stop, num)
        else:
            raise ConfigError(f"{field}.spacing must be linear or log", field=f"{field}.spacing")
    else:
        raise ConfigError(f"{field} must be a list or a range object", field=field)
    if arr.size == 0 or np.any(np.diff(arr) <= 0) or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{field} must be finite and strictly increasing", field=field)
    return arr


# -- artifacts ------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def csv_text(header: list[str], columns: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in zip(*columns):
        writer.writerow([v if isinstance(v, str) else _fmt(v) for v in row])
    return buf.getvalue()


def ids_csv(curve: IdsCurve) -> str:
    return csv_text(["lambda", "n_hat", "stderr"], [curve.lambda_grid, curve.n_hat, curve.stderr])


def laplace_csv(curve: LaplaceCurve) -> str:
    kinds = [curve.kind] * len(curve.t_grid)
    return csv_text(["t", "log_value", "kind"], [curve.t_grid, curve.log_values, kinds])


def read_curve_csv(path) -> tuple[str, tuple]:
    """Parse an ids, laplace or fk CSV into (kind, (x, log value, stderr of log value))."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}", field="input") from None
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ConfigError(f"{path} is empty", field="input")
    header, body = rows[0], rows[1:]
    cols = list(zip(*body)) if body else [()] * len(header)
    if header == ["lambda", "n_hat", "stderr"]:
        lam, n, se = (np.array(c, dtype=float) for c in cols)
        with np.errstate(divide="ignore", invalid="ignore"):
            return "ids", (lam, np.log(n), np.where(n > 0, se / n, np.inf))
    if header == ["t", "log_value", "kind"]:
        return "laplace", (np.array(cols[0], dtype=float), np.array(cols[1], dtype=float),
                           np.zeros(len(body)))
    if header == ["t", "log_s", "stderr"]:
        return "fk", tuple(np.array(c, dtype=float) for c in cols)
    raise ConfigError(f"unrecognised CSV header {header}", field="input")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def write_artifacts(cfg: dict, csv_body: Optional[str], results: dict) -> dict:
    out_dir = Path(cfg["out"]["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    name = cfg["out"]["name"]
    paths = {}
    if csv_body is not None:
        paths["csv"] = str(out_dir / f"{name}.csv")
        Path(paths["csv"]).write_text(csv_body)
    paths["json"] = str(out_dir / f"{name}.json")
    sidecar = {"version": __version__, "config": cfg, "results": results}
    Path(paths["json"]).write_text(json.dumps(_jsonable(sidecar), indent=2, sort_keys=True) + "\n")
    return paths


# -- commands ---------------------------------------------------------------------

def _ids_results(curve: IdsCurve) -> dict:
    lam1 = curve.lambda1
    return {"replicates": curve.replicates, "total_density": curve.total_density,
            "lambda1_min": float(np.min(lam1)) if lam1 is not None else None, "meta": curve.meta}


def cmd_sample(cfg, params, spec):
    config = sample_configuration(params, spec, _float(cfg["box_r"], "box_r"),
                                  _int(cfg["replicate"], "replicate"),
                                  tail_tol=_float(cfg["tail_tol"], "tail_tol"))
    out_dir = Path(cfg["out"]["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_path = out_dir / f"{cfg['out']['name']}_configuration.json"
    cfg_path.write_text(config.to_json() + "\n")
    return None, {"configuration": str(cfg_path), "n_sites": int(config.sites.shape[0]),
                  "margin": config.margin, "tail_bound": config.tail_bound}


def cmd_ids(cfg, params, spec, negative=False):
    grid = build_grid(cfg["grid"], params.d)
    lam = expand_grid(cfg["lambda_grid"], "lambda_grid")
    fn = negative_ids if negative else empirical_ids
    curve = fn(params, spec, grid, lam, _int(cfg["replicates"], "replicates"),
               tail_tol=_float(cfg["tail_tol"], "tail_tol"))
    return ids_csv(curve), _ids_results(curve)


def cmd_classical(cfg, params, spec):
    lam = expand_grid(cfg["lambda_grid"], "lambda_grid")
    curve = classical_ids(params, spec, lam, _int(cfg["replicates"], "replicates"),
                          box_r=_float(cfg["box_r"], "box_r"),
                          points_per_unit=_int(cfg["points_per_unit"], "points_per_unit"),
                          tail_tol=_float(cfg["tail_tol"], "tail_tol"))
    return ids_csv(curve), {"replicates": curve.replicates, "meta": curve.meta}


def cmd_laplace(cfg, params, spec):
    t = expand_grid(cfg["t_grid"], "t_grid")
    method = cfg["method"]
    if method == "quadrature":
        if spec.sign != 1 and params.d != 1:
            raise ConfigError("quadrature is the d = 1 path", field="params.d")
        curve = n1_quadrature_curve(params, spec, t, n_x=None if cfg["n_x"] is None else _int(cfg["n_x"], "n_x"),
                                    tol=_float(cfg["tol"], "tol"))
    elif method == "mc":
        curve = n1_mc(params, spec, t, _int(cfg["replicates"], "replicates"),
                      n_x=None if cfg["n_x"] is None else _int(cfg["n_x"], "n_x"))
    elif method == "from_ids":
        if cfg["lambda_grid"] is None:
            raise ConfigError("from_ids needs lambda_grid", field="lambda_grid")
        grid = build_grid(cfg["grid"], params.d)
        lam = expand_grid(cfg["lambda_grid"], "lambda_grid")
        fn = empirical_ids if spec.sign == 1 else negative_ids
        ids = fn(params, spec, grid, lam, _int(cfg["replicates"], "replicates"),
                 tail_tol=_float(cfg["tail_tol"], "tail_tol"))
        curve = laplace_from_ids(ids, t)
    else:
        raise ConfigError("method must be quadrature, mc or from_ids", field="method")
    results = {"kind": curve.kind, "stderr": curve.stderr, "log_upper": curve.log_upper,
               "flagged": curve.flagged, "meta": curve.meta}
    return laplace_csv(curve), results


def cmd_constants(cfg, params, spec):
    consts = compute_constants(params.d, params.theta, spec.alpha, spec.c0, params.h,
                               _float(cfg["u0"], "u0"))
    out = consts.to_dict()
    out["provenance"] = {"pastur_inner": "128-point log scan + golden section",
                         "pastur_outer": "adaptive Gauss-Legendre 7/15, relative tolerance 1e-10",
                         "pastur_tail": "analytic beyond the adaptive cutoff"}
    return None, out


def cmd_fk(cfg, params, spec):
    t = expand_grid(cfg["t_grid"], "t_grid")
    x = np.asarray([_float(v, "x") for v in np.atleast_1d(cfg["x"])])
    if x.size != params.d:
        raise ConfigError(f"x must have {params.d} coordinates", field="x")
    kw = {"table_dx": _float(cfg["table_dx"], "table_dx"), "tail_tol": _float(cfg["tail_tol"], "tail_tol")}
    if cfg["box_r"] is not None:
        kw["box_r"] = _float(cfg["box_r"], "box_r")
    fn = survival if spec.sign == 1 else growth
    est = fn(params, spec, x, t, _int(cfg["n_paths"], "n_paths"), _int(cfg["n_configs"], "n_configs"),
             _float(cfg["dt"], "dt"), **kw)
    body = csv_text(["t", "log_s", "stderr"], [est.t_grid, est.log_s, est.stderr])
    return body, {"dt": est.dt, "n_paths": est.n_paths, "n_configs": est.n_configs, "x": est.x,
                  "kind": est.kind, "flagged": est.flagged, "meta": est.meta}


def cmd_fit(cfg, params, spec):
    kind, arrays = read_curve_csv(cfg["input"])
    window = cfg["window"]
    window = None if window is None else (_float(window[0], "window"), _float(window[1], "window"))
    model = cfg["model"]
    if model == "log_corrected_2d":
        res = fit_log_corrected(arrays, params.theta, window=window)
    elif model in ("power_lambda", "power_t"):
        res = fit_power(arrays, model, window=window)
    else:
        raise ConfigError("model must be power_lambda, power_t or log_corrected_2d", field="model")
    out = res.to_dict()
    out["input_kind"] = kind
    return None, out


def pipeline_lifshitz_1d(cfg: dict, params: ModelParams, spec: PotentialSpec) -> dict:
    """Empirical IDS at each box size, power fit, comparison with the 1-D predictions."""
    if params.d != 1:
        raise ConfigError("lifshitz1d needs d = 1", field="params.d")
    if not (spec.compact or spec.alpha > 3):
        raise ConfigError("lifshitz1d needs alpha > 3", field="spec.alpha")
    lam = expand_grid(cfg["lambda_grid"], "lambda_grid")
    window = (_float(cfg["window"][0], "window"), _float(cfg["window"][1], "window"))
    target_exp = (1.0 + params.theta) / 2.0
    target_coef = lifshitz_1d_constant(params.theta, params.h)
    rows, curves = [], []
    for box_r in cfg["box_rs"]:
        grid = GridSpec.from_spacing(1, _float(box_r, "box_rs"), _float(cfg["dx"], "dx"))
        curve = empirical_ids(params, spec, grid, lam, _int(cfg["replicates"], "replicates"),
                              tail_tol=_float(cfg["tail_tol"], "tail_tol"))
        curves.append(curve)
        row = {"box_r": grid.box_r, "dx": grid.dx, "lambda1_min": float(np.min(curve.lambda1)),
               "exponent": None, "stderr_exponent": None, "coefficient": None, "r_squared": None,
               "n_points": 0, "exponent_ok": None, "coefficient_ok": None, "verdict": "INCONCLUSIVE"}
        try:
            if spec.u_max == 0 and spec.obstacle_rho == 0:
                raise DomainError("no random potential: the free spectrum has no tail to fit")
            fit = fit_power(curve, "power_lambda", window=window)
        except DomainError as exc:
            row["reason"] = str(exc)
        else:
            e_ok = abs(fit.exponent - target_exp) <= cfg["exponent_tol"]
            c_ok = abs(fit.coefficient / target_coef - 1.0) <= cfg["coefficient_tol"]
            row.update(exponent=fit.exponent, stderr_exponent=fit.stderr_exponent,
                       coefficient=fit.coefficient, r_squared=fit.r_squared, n_points=fit.n_points,
                       exponent_ok=bool(e_ok), coefficient_ok=bool(c_ok),
                       verdict="PASS" if e_ok and c_ok else "FAIL")
        rows.append(row)
    return {"target_exponent": target_exp, "target_coefficient": target_coef, "window": list(window),
            "rows": rows, "curves": curves}


def cmd_lifshitz1d(cfg, params, spec):
    report = pipeline_lifshitz_1d(cfg, params, spec)
    curves = report.pop("curves")
    header = ["box_r", "lambda", "n_hat", "stderr"]
    cols: list = [[], [], [], []]
    for row, curve in zip(report["rows"], curves):
        cols[0].extend([row["box_r"]] * len(curve.lambda_grid))
        cols[1].extend(curve.lambda_grid)
        cols[2].extend(curve.n_hat)
        cols[3].extend(curve.stderr)
    return csv_text(header, cols), report


HANDLERS = {"sample": cmd_sample, "ids": cmd_ids,
            "negative": lambda c, p, s: cmd_ids(c, p, s, negative=True),
            "classical": cmd_classical, "laplace": cmd_laplace, "constants": cmd_constants,
            "fk": cmd_fk, "fit": cmd_fit, "lifshitz1d": cmd_lifshitz1d}


def run(cfg_raw: dict, overrides: tuple = ()) -> tuple[dict, dict, dict]:
    """Resolve, execute and write artifacts; returns (config, results, paths)."""
    raw = copy.deepcopy(cfg_raw)
    if "config" in raw and "command" not in raw:
        raw = raw["config"]
    for ov in overrides:
        apply_override(raw, ov)
    cfg = resolve_config(raw)
    params = build_params(cfg)
    spec = build_spec(cfg)
    body, results = HANDLERS[cfg["command"]](cfg, params, spec)
    paths = write_artifacts(cfg, body, results)
    return cfg, results, paths


def _emit_error(exc: BaseException, code: int) -> int:
    payload = {"error": type(exc).__name__, "exit_code": code, "message": str(exc)}
    field = getattr(exc, "field", None)
    if field:
        payload["field"] = field
    trace = getattr(exc, "trace", None)
    if trace:
        payload["trace"] = _jsonable(trace)
    sys.stderr.write(json.dumps(payload, default=str) + "\n")
    return code


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="perturbed-lattice",
                                 description="Spectral statistics of randomly perturbed lattice potentials.")
    ap.add_argument("command", nargs="?", choices=COMMANDS,
                    help="subcommand; overrides the command in --config")
    ap.add_argument("--config", help="JSON run config or a previously written sidecar")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="dotted-path override, value parsed as JSON when possible")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--seed", type=int, help="shortcut for --set params.seed=N")
    ap.add_argument("--workers", type=int, help="shortcut for --set params.workers=N")
    ap.add_argument("--version", action="version", version=__version__)
    return ap


def main(argv: Optional[list] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        raw: dict = {}
        if args.config:
            try:
                raw = json.loads(Path(args.config).read_text())
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc.strerror}", field="--config") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON in config: {exc}", field="--config") from None
            if "config" in raw and "command" not in raw:
                raw = raw["config"]
        if args.command:
            raw["command"] = args.command
        overrides = list(args.overrides)
        if args.out is not None:
            overrides.append(f"out.dir={json.dumps(args.out)}")
        if args.seed is not None:
            overrides.append(f"params.seed={args.seed}")
        if args.workers is not None:
            overrides.append(f"params.workers={args.workers}")
        _, results, paths = run(raw, tuple(overrides))
    except ResourceError as exc:
        return _emit_error(exc, 4)
    except NumericalError as exc:
        return _emit_error(exc, 3)
    except ConfigError as exc:
        return _emit_error(exc, 2)
    except LabError as exc:
        return _emit_error(exc, 1)
    except MemoryError as exc:
        return _emit_error(exc, 4)
    sys.stdout.write(json.dumps(_jsonable({"artifacts": paths}), sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
