"""Command-line entry point: ``convexsde <command> --config FILE``.

Commands: constants, simulate, compare, propagate, converge, counterexample.
Exit status is 0 when every verdict passes, 2 when at least one fails and 1
on configuration or runtime errors.  Reports are written either way.
"""
from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
import subprocess
import sys
import time
import warnings
from pathlib import Path

import jsonschema
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from . import coefficients as co
from . import convergence as cv
from . import kernel_oracle as ko
from . import ordering_lab as ol
from .euler import NoisePanel, simulate_batch
from .functionals import make_functional

COMMANDS = ("constants", "simulate", "compare", "propagate", "converge", "counterexample")
EXIT_PASS, EXIT_ERROR, EXIT_FAIL = 0, 1, 2

_FIELD = {
    "type": "object",
    "properties": {"family": {"type": "string"}, "params": {"type": "array", "items": {"type": "number"}}},
    "required": ["family"],
    "additionalProperties": False,
}
_INITIAL = {
    "type": "object",
    "properties": {
        "law": {"enum": ["dirac", "two_point", "table"]},
        "x0": {"type": "number"}, "x": {"type": "number"}, "y": {"type": "number"},
        "alpha": {"type": "number"}, "values": {"type": "array", "items": {"type": "number"}},
    },
    "additionalProperties": False,
}
_SDE = {
    "type": "object",
    "properties": {
        "family": {"type": "string"},
        "params": {"type": "array", "items": {"type": "number"}},
        "drift": _FIELD,
        "initial": {"oneOf": [_INITIAL, {"type": "number"}]},
    },
    "required": ["family"],
    "additionalProperties": False,
}
_NUM_OR_WORD = {"oneOf": [{"type": "number"}, {"enum": ["auto", "inf", "log"]}]}

SCHEMA = {
    "type": "object",
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "mode": {"enum": list(ol.MODES)},
        "sde_x": _SDE,
        "sde_y": _SDE,
        "scheme": {
            "type": "object",
            "properties": {
                "m": {"type": "integer", "minimum": 1},
                "variant": {"enum": ["time_integrated", "point_frozen"]},
                "threshold": _NUM_OR_WORD,
                "T": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "suite": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {"id": {"type": "string"}, "params": {"type": "object"}},
                "required": ["id"],
                "additionalProperties": False,
            },
        },
        "run": {
            "type": "object",
            "properties": {
                "N": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "confidence": {"type": "number", "exclusiveMinimum": 0.5, "exclusiveMaximum": 1},
                "override_hypotheses": {"type": "boolean"},
                "couple_initial": {"type": "boolean"},
                "independent_noise": {"type": "boolean"},
                "domain": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
            },
            "additionalProperties": False,
        },
        "output": {
            "type": "object",
            "properties": {
                "directory": {"type": "string"},
                "formats": {"type": "array", "items": {"enum": ["json", "csv"]}},
                "write_paths": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "propagate": {
            "type": "object",
            "properties": {
                "grid_n": {"type": "integer", "minimum": 3},
                "width": {"type": "number", "exclusiveMinimum": 0},
                "tolerance": {"type": "number", "minimum": 0},
                "mc_points": {"type": "array", "items": {"type": "number"}},
            },
            "additionalProperties": False,
        },
        "converge": {
            "type": "object",
            "properties": {
                "theta": {"type": "number", "minimum": 0},
                "x0": {"type": "number"},
                "m_list": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 4},
                "slope_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "tail_m": {"type": "integer", "minimum": 1},
                "tail_s": {"type": "number", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "counterexample": {
            "type": "object",
            "properties": {
                "h": {"type": "number", "exclusiveMinimum": 0},
                "s": {"type": "number", "minimum": 0},
                "sigma": _FIELD,
                "points": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

DEFAULTS = {
    "scheme": {"m": 256, "variant": "time_integrated", "threshold": "auto", "T": 1.0},
    "run": {"N": 100_000, "seed": 0, "confidence": 0.99, "override_hypotheses": False,
            "couple_initial": True, "independent_noise": False},
    "output": {"directory": "convexsde-out", "formats": ["json", "csv"], "write_paths": False},
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling


def _line_of(text: str, key: str) -> int | None:
    for i, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if stripped.startswith((key, f'"{key}"', f"[{key}", f"[[{key}")):
            return i
    return None


def load_config(path) -> dict:
    text = Path(path).read_text()
    try:
        if str(path).endswith(".json"):
            doc = json.loads(text)
        else:
            doc = tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    validate_config(doc, text, str(path))
    return doc


def validate_config(doc: dict, text: str = "", source: str = "<config>") -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if not errors:
        return
    msgs = []
    for e in errors:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        key = next((str(p) for p in reversed(e.absolute_path) if isinstance(p, str)), None)
        if e.validator == "additionalProperties":
            extra = [k for k in e.instance if k not in e.schema.get("properties", {})]
            key = extra[0] if extra else key
        line = _line_of(text, key) if key and text else None
        loc = f"{source}:{line}" if line else source
        msgs.append(f"{loc}: field {where}: {e.message}")
    raise ConfigError("\n".join(msgs))


def _merge_defaults(doc: dict) -> dict:
    out = copy.deepcopy(doc)
    for sec, vals in DEFAULTS.items():
        out[sec] = {**vals, **out.get(sec, {})}
    return out


def _threshold(v):
    if v in ("auto", "log"):
        return v
    if v == "inf":
        return math.inf
    return float(v)


def _sde(sec: dict, T: float) -> co.SdeSpec:
    diffusion = co.make_field(sec["family"], sec.get("params", []))
    d = sec.get("drift", {"family": "constant", "params": [0.0]})
    drift = co.make_field(d["family"], d.get("params", []))
    initial = co.make_initial(sec.get("initial", {"law": "dirac", "x0": 0.0}))
    return co.SdeSpec(drift, diffusion, T, initial)


def _suite(doc):
    return [make_functional(item["id"], **_tuplify(item.get("params", {}))) for item in doc.get("suite", [])]


def _tuplify(params):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in params.items()}


def _apply_overrides(doc: dict, args) -> dict:
    doc = copy.deepcopy(doc)
    run = doc.setdefault("run", {})
    scheme = doc.setdefault("scheme", {})
    if args.seed is not None:
        run["seed"] = args.seed
    if args.paths is not None:
        run["N"] = args.paths
    if args.steps is not None:
        scheme["m"] = args.steps
    if args.threshold is not None:
        scheme["threshold"] = args.threshold if args.threshold in ("auto", "inf", "log") else float(args.threshold)
    if args.override_hypotheses:
        run["override_hypotheses"] = True
    out = doc.setdefault("output", {})
    if args.out is not None:
        out["directory"] = args.out
    if args.format is not None:
        out["formats"] = [f.strip() for f in args.format.split(",") if f.strip()]
    return doc


# ---------------------------------------------------------------------------
# reports


def jsonable(obj):
    """Replace non-finite floats and numpy scalars so the output is strict JSON."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def _git_describe() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "unknown"


def stability_hash(report: dict) -> str:
    body = {k: v for k, v in report.items() if k not in ("timestamp", "stability_hash")}
    return hashlib.sha256(dumps(body).encode()).hexdigest()


def dumps(obj) -> str:
    return json.dumps(jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def build_report(command: str, config: dict, results, passed: bool, runtime: float,
                 csv_table=None, notes=()) -> dict:
    # where the files go is not part of the experiment, so it stays out of the echo
    echo = {k: v for k, v in config.items() if k != "output"}
    rep = {
        "command": command,
        "config": echo,
        "notes": sorted(set(notes)),
        "results": results,
        "status": "pass" if passed else "fail",
        "version": __version__,
        "build": _git_describe(),
        "timestamp": {"utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
                      "runtime_s": runtime},
    }
    rep = jsonable(rep)
    rep["stability_hash"] = stability_hash(rep)
    if csv_table is not None:
        rep["_csv"] = csv_table
    return rep


def csv_text(cols, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _csv_cell(r.get(k)) for k in cols})
    return buf.getvalue()


def _csv_cell(v):
    v = jsonable(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (dict, list)):
        return json.dumps(v, sort_keys=True)
    return v


def write_report(report: dict, directory, formats) -> list:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    table = report.pop("_csv", None)
    name = report["command"]
    written = []
    if "json" in formats:
        p = d / f"{name}.json"
        p.write_text(dumps(report))
        written.append(p)
    if "csv" in formats:
        cols, rows = table if table is not None else (["key", "value"], _flat_rows(report["results"]))
        p = d / f"{name}.csv"
        p.write_text(csv_text(cols, rows))
        written.append(p)
    return written


def _flat_rows(obj, prefix=""):
    rows = []
    if isinstance(obj, dict):
        for k in sorted(obj):
            rows += _flat_rows(obj[k], f"{prefix}{k}.")
    elif isinstance(obj, list) and obj and isinstance(obj[0], (dict, list)):
        for i, v in enumerate(obj):
            rows += _flat_rows(v, f"{prefix}{i}.")
    else:
        rows.append({"key": prefix[:-1], "value": obj})
    return rows


# ---------------------------------------------------------------------------
# commands


def cmd_constants(doc, threads):
    T = doc["scheme"]["T"]
    out = {}
    for name in ("sde_x", "sde_y"):
        if name not in doc:
            continue
        sp = _sde(doc[name], T)
        c = co.derive_constants(sp.drift, sp.diffusion, T)
        entry = {"constants": c.as_dict()}
        if math.isfinite(c.c_sigma) and math.isfinite(c.c_b):
            b = co.derive_scheme_bounds(c, T, doc["scheme"]["m"])
            entry["scheme_bounds"] = {"m": doc["scheme"]["m"], "m_min": b.m_min, "h_bar": b.h_bar,
                                      "s_default": b.s_default}
        out[name] = entry
    return out, True, None


def cmd_simulate(doc, threads):
    T = doc["scheme"]["T"]
    sp = _sde(doc["sde_x"], T)
    config, info = ol.resolve_scheme(sp, sp, doc["scheme"]["m"], doc["scheme"]["variant"],
                                     _threshold(doc["scheme"]["threshold"]))
    run = doc["run"]
    noise = NoisePanel(run["N"], config.m, run["seed"])
    paths = simulate_batch(sp, config, noise, threads=threads)
    rows = []
    for f in _suite(doc):
        est = ol.estimate_functional(paths, f)
        rows.append({"id": f.id, "params": f.params, "mean": est["mean"], "stderr": est["stderr"],
                     "n": est["n"], "flagged": len(est["flagged"])})
    term = paths.terminal
    res = {"N": paths.N, "m": config.m, "s": config.s, "seed": run["seed"], "generator": noise.generator_id,
           "terminal_mean": float(term.mean()), "terminal_std": float(term.std(ddof=1)) if term.size > 1 else 0.0,
           "estimates": rows, "scheme": info}
    if doc["output"].get("write_paths"):
        d = Path(doc["output"]["directory"])
        d.mkdir(parents=True, exist_ok=True)
        paths.write_binary(d / "paths.bin")
        res["paths_file"] = "paths.bin"
    ok = all(r["flagged"] == 0 for r in rows)
    cols = ["id", "params", "mean", "stderr", "n", "flagged"]
    return res, ok, (cols, rows)


def _experiment(doc):
    T = doc["scheme"]["T"]
    run = doc["run"]
    kw = {}
    if "domain" in run:
        kw["domain"] = tuple(run["domain"])
    return ol.ExperimentSpec(
        specX=_sde(doc["sde_x"], T), specY=_sde(doc.get("sde_y", doc["sde_x"]), T),
        mode=doc.get("mode", "cvx"), suite=_suite(doc), N=run["N"], seed=run["seed"],
        m=doc["scheme"]["m"], variant=doc["scheme"]["variant"],
        threshold=_threshold(doc["scheme"]["threshold"]), confidence=run["confidence"],
        override=run["override_hypotheses"], couple_initial=run["couple_initial"],
        independent_noise=run["independent_noise"], **kw)


def cmd_compare(doc, threads):
    rep = ol.compare_ordered(_experiment(doc), threads=threads)
    return rep.as_dict(), not rep.any_violated, rep.csv_rows()


def cmd_propagate(doc, threads):
    """Kernel backward induction of each terminal suite functional, plus the ordering gap."""
    T = doc["scheme"]["T"]
    opts = doc.get("propagate", {})
    tol = opts.get("tolerance", 1e-8)
    spX = _sde(doc["sde_x"], T)
    spY = _sde(doc["sde_y"], T) if "sde_y" in doc else None
    config, info = ol.resolve_scheme(spX, spY or spX, doc["scheme"]["m"], doc["scheme"]["variant"],
                                     _threshold(doc["scheme"]["threshold"]))
    if not info.get("admissible") and not doc["run"]["override_hypotheses"]:
        raise ol.HypothesisViolation(["scheme is not admissible for convexity propagation"])
    grid = ko.oracle_grid(spX, opts.get("grid_n", 2001), opts.get("width"))
    measure = ko.build_measure(config.s)
    rows = []
    ok = True
    for f in _suite(doc):
        if f.kind != "terminal":
            rows.append({"id": f.id, "skipped": "kernel propagation handles terminal functionals"})
            continue
        g = ko.GridFunction.from_function(grid, lambda x, f=f: f([x], T), d=1)
        v = ko.backward_induct_terminal(g, spX, config, measure)
        defect = ko.grid_convexity_defect(v)
        passed = defect["min_second_difference"] >= -tol and \
            (not f.is_nondecreasing or defect["min_first_difference"] >= -tol)
        row = {"id": f.id, "params": f.params, **defect, "pass": passed}
        if spY is not None:
            gap = ko.kernel_ordering_gap(g, spX, spY, config, measure,
                                         override=doc["run"]["override_hypotheses"])
            row["min_ordering_gap"] = float(gap.values.min())
            row["max_ordering_gap"] = float(gap.values.max())
            passed = passed and row["min_ordering_gap"] >= -1e-9
            row["pass"] = passed
        ok = ok and passed
        rows.append(row)
    res = {"grid": grid.describe(), "m": config.m, "s": config.s, "scheme": info, "functionals": rows}
    cols = ["id", "params", "min_second_difference", "min_first_difference", "min_ordering_gap", "pass"]
    return res, ok, (cols, rows)


def cmd_converge(doc, threads):
    opts = doc.get("converge", {})
    run = doc["run"]
    T = doc["scheme"]["T"]
    lo, hi = opts.get("slope_range", [-0.62, -0.38])
    rate = cv.strong_error_rate(opts.get("theta", 0.2), opts.get("x0", 1.0), T,
                                opts.get("m_list", [16, 32, 64, 128, 256, 512, 1024]), run["N"], run["seed"],
                                _threshold(doc["scheme"]["threshold"]), doc["scheme"]["variant"], threads)
    tail_m = opts.get("tail_m", 100)
    tail = cv.truncation_event_rate(NoisePanel(run["N"], tail_m, run["seed"]), opts.get("tail_s", 5.0),
                                    threads=threads)
    slope_ok = rate.slope == 0.0 and all(e == 0 for e in rate.errors) or lo <= rate.slope <= hi
    ok = slope_ok and tail["within_bound"] and tail["bitwise_identical_elsewhere"]
    res = {"strong_rate": rate.as_dict(), "slope_range": [lo, hi], "slope_ok": slope_ok, "truncation": tail}
    return res, ok, rate.csv_rows()


def cmd_counterexample(doc, threads):
    opts = doc.get("counterexample", {})
    sig = opts.get("sigma", {"family": "tent", "params": []})
    res = ol.counterexample_demo(h=opts.get("h", 0.01), s=opts.get("s", 5.0),
                                 sigma=co.make_field(sig["family"], sig.get("params", [])),
                                 points=tuple(opts.get("points", (-1.0, 0.0, 1.0))),
                                 N=doc["run"]["N"], seed=doc["run"]["seed"],
                                 confidence=doc["run"]["confidence"], threads=threads)
    # a reproduced counterexample is a failed ordering
    violated = res["oracle_violation"] > 1e-12 or res.get("compare_verdict") == "violated"
    keys = ["closed_form_violation", "oracle_violation", "quadrature_violation", "mc_violation", "mc_stderr",
            "compare_verdict"]
    rows = [{"metric": k, "value": res.get(k)} for k in keys if k in res]
    return res, not violated, (["metric", "value"], rows)


HANDLERS = {
    "constants": cmd_constants, "simulate": cmd_simulate, "compare": cmd_compare,
    "propagate": cmd_propagate, "converge": cmd_converge, "counterexample": cmd_counterexample,
}


def run(command: str, doc: dict, threads: int | None = None, write: bool = True):
    """Execute one command on a validated config document; returns (exit code, report)."""
    validate_config(doc)
    full = _merge_defaults(doc)
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        results, ok, table = HANDLERS[command](full, threads)
    notes = [str(w.message) for w in caught]
    report = build_report(command, doc, results, ok, time.perf_counter() - t0, table, notes)
    if write:
        write_report(report, full["output"]["directory"], full["output"]["formats"])
    else:
        report.pop("_csv", None)
    return (EXIT_PASS if ok else EXIT_FAIL), report


def _parser():
    p = argparse.ArgumentParser(prog="convexsde", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="TOML or JSON experiment file")
    p.add_argument("--seed", type=int)
    p.add_argument("--paths", type=int, help="number of Monte Carlo paths")
    p.add_argument("--steps", type=int, help="number of time steps m")
    p.add_argument("--threshold", help="auto, inf, log or a number")
    p.add_argument("--override-hypotheses", action="store_true")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", help="comma-separated list of json,csv")
    p.add_argument("--threads", type=int, help="worker threads (default: $CONVEXSDE_THREADS)")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.config:
            doc = load_config(args.config)
        elif args.command == "counterexample":
            doc = {"run": {"N": 1_000_000}}
        else:
            raise ConfigError(f"{args.command} needs --config")
        doc = _apply_overrides(doc, args)
        doc.pop("command", None)
        threads = args.threads
        if threads is None and os.environ.get("CONVEXSDE_THREADS"):
            threads = int(os.environ["CONVEXSDE_THREADS"])
        code, report = run(args.command, doc, threads)
    except (ConfigError, ol.HypothesisViolation, ValueError, OSError, KeyError) as exc:
        print(f"convexsde: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"{args.command}: {report['status']} (stability hash {report['stability_hash'][:16]})")
    return code


if __name__ == "__main__":
    sys.exit(main())
