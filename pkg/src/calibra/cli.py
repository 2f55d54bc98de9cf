"""Command-line interface: ``estimate``, ``simulate`` and ``match``.

Settings come from an optional flat ``key=value`` file (``#`` starts a
comment) and from flags; flags win. Exit codes: 0 success, 2 invalid input or
configuration, 3 empirical-likelihood infeasibility, 4 I/O or file format.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import warnings
from pathlib import Path
from typing import Optional

import numpy as np

from .data import (AuxDataset, DataFormatError, LearnerKind, LearnerSpec, StudyConfig,
                   ValidationError, WorkingFunction, load_aux_csv, load_main_csv,
                   validate_study)
from .el import ELError
from .learners import LearnerError

SCHEMA_VERSION = 1

EXIT_OK, EXIT_VALIDATION, EXIT_EL, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _int(v):
    if isinstance(v, bool):
        raise ValueError
    if isinstance(v, int):
        return v
    f = float(v)
    if not f.is_integer():
        raise ValueError
    return int(f)


def _opt_int(v):
    return None if v in (None, "", "none", "None") else _int(v)


def _list(v):
    if isinstance(v, (list, tuple)):
        return [str(s) for s in v]
    return [s.strip() for s in str(v).split(",") if s.strip()]


def _kinds(v):
    return [LearnerKind(s).value for s in _list(v)]


def _form(v):
    s = str(v).strip()
    s = {"FormI": "I", "FormII": "II", "1": "I", "2": "II"}.get(s, s)
    return WorkingFunction(s).value


def _fmt_choice(v):
    s = str(v).lower()
    if s not in ("json", "csv", "text"):
        raise ValueError
    return s


# key -> (parser, default); the key set is the full configuration surface
KEYS = {
    "main": (str, None),
    "aux": (str, None),
    "outcome": (str, None),
    "exposure": (str, None),
    "match_ratio": (_opt_int, None),
    "match_cols": (_list, []),
    "caliper": (lambda v: None if v in (None, "", "none") else float(v), None),
    "out": (str, None),
    "format": (_fmt_choice, "json"),
    "seed": (_int, 0),
    "threads": (_int, 0),
    "working_function": (_form, "I"),
    "bootstrap_reps": (_int, None),
    "ps_clip": (float, 1e-3),
    "el_tolerance": (float, 1e-10),
    "el_max_iter": (_int, 200),
    "exposure_levels": (_opt_int, None),
    "ps_candidates": (_kinds, ["RidgeMultinomial", "RandomForest", "GradientBoosting"]),
    "cm_candidates": (_kinds, ["RidgeRegression", "RandomForest", "GradientBoosting"]),
    "rf_trees": (_int, 1000),
    "case": (_int, 1),
    "p": (_int, 10),
    "n": (_int, 1000),
    "aux_mult": (float, 2.0),
    "runs": (_int, 100),
    "levels": (_int, 2),
    "hetero_shift": (float, 0.0),
}

# keys that do not affect numeric results and stay out of the config hash
NON_SEMANTIC = {"threads", "out", "format"}


def read_config_file(path) -> dict:
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        k = k.replace("-", "_")
        if k not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {k!r}")
        out[k] = v
    return out


def resolve_config(file_values: dict, flag_values: dict) -> dict:
    """Merge defaults, file values and flags (in increasing priority) and type-check."""
    merged = {}
    for k, (parse, default) in KEYS.items():
        raw = flag_values.get(k, file_values.get(k))
        if raw is None:
            merged[k] = default
            continue
        try:
            merged[k] = parse(raw)
        except (ValueError, TypeError):
            raise ConfigError(f"invalid value {raw!r} for {k}") from None
    if merged["bootstrap_reps"] is not None and merged["bootstrap_reps"] < 0:
        raise ConfigError("bootstrap_reps must be ≥ 0")
    if merged["match_ratio"] is not None and merged["match_ratio"] < 1:
        raise ConfigError("match_ratio must be ≥ 1")
    if merged["rf_trees"] < 1:
        raise ConfigError("rf_trees must be ≥ 1")
    if merged["threads"] < 0:
        raise ConfigError("threads must be ≥ 0")
    if not 0 <= merged["seed"] < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return merged


def study_config(cfg: dict, default_reps: int) -> StudyConfig:
    def specs(kinds):
        out = []
        for k in kinds:
            hp = {"n_trees": cfg["rf_trees"]} if k == LearnerKind.RANDOM_FOREST.value and \
                cfg["rf_trees"] != 1000 else {}
            out.append(LearnerSpec(LearnerKind(k), hp))
        return out

    reps = cfg["bootstrap_reps"] if cfg["bootstrap_reps"] is not None else default_reps
    try:
        return StudyConfig(exposure_levels=cfg["exposure_levels"],
                           ps_candidates=specs(cfg["ps_candidates"]),
                           cm_candidates=specs(cfg["cm_candidates"]),
                           working_function=cfg["working_function"], bootstrap_reps=reps,
                           seed=cfg["seed"], match_ratio=cfg["match_ratio"],
                           ps_clip=cfg["ps_clip"], el_tolerance=cfg["el_tolerance"],
                           el_max_iter=cfg["el_max_iter"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def config_hash(cfg: dict) -> str:
    canon = "\n".join(f"{k}={_canon(cfg[k])}" for k in sorted(cfg) if k not in NON_SEMANTIC)
    return hashlib.sha256(canon.encode()).hexdigest()


def _canon(v):
    if isinstance(v, list):
        return ",".join(str(s) for s in v)
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def g17(v) -> str:
    return f"{float(v):.17g}"


def to_json(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with every float written to 17 significant digits (NaN -> null)."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return g17(obj) if math.isfinite(obj) else "null"
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {to_json(v, indent, _level + 1)}"
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        items = [f"{pad}{to_json(v, indent, _level + 1)}" for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return g17(v) if math.isfinite(v) else ""
    return str(v)


def records_to_csv(records, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in records:
        w.writerow([_csv_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def _t3(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{v:.3f}"
    return str(v)


def records_to_text(records, columns, title="", notes=()) -> str:
    cells = [[_t3(r.get(c)) for c in columns] for r in records]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    lines = [title] if title else []
    lines.append("  ".join(c.rjust(w) for c, w in zip(columns, widths)))
    lines.extend("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells)
    lines.extend(f"note: {n}" for n in notes)
    return "\n".join(lines) + "\n"


def emit(text: str, out: Optional[str]):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def render(payload: dict, columns, fmt: str, title: str) -> str:
    if fmt == "json":
        return to_json(payload) + "\n"
    if fmt == "csv":
        return records_to_csv(payload["records"], columns)
    return records_to_text(payload["records"], columns, title, payload.get("notes", ()))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

ESTIMATE_COLUMNS = ["level", "method", "tau_hat", "bsd", "ci_low", "ci_high", "p_value",
                    "n", "N", "rho_hat", "n_eff"]


def _chosen_records(chosen, config: StudyConfig):
    out = []
    for half in sorted(chosen):
        for (role, j, lvl), hp in sorted(chosen[half].items(), key=lambda kv: str(kv[0])):
            spec = (config.ps_candidates if role == "ps" else config.cm_candidates)[j]
            out.append({"half": half, "role": role, "candidate": j, "kind": spec.kind.value,
                        "level": lvl, "chosen": {k: v for k, v in sorted(hp.items())}})
    return out


def run_estimate(cfg: dict) -> int:
    from .estimators import bootstrap_inference, cross_fit_estimate
    from .matching import match_aux

    for k in ("main", "outcome", "exposure"):
        if not cfg[k]:
            raise ConfigError(f"estimate requires --{k}")
    config = study_config(cfg, default_reps=100)
    if config.bootstrap_reps == 1:
        raise ConfigError("bootstrap_reps must be 0 (no inference) or at least 2")
    notes = []
    main = load_main_csv(cfg["main"], cfg["outcome"], cfg["exposure"])
    keep = cfg["match_cols"] if config.match_ratio is not None else []
    if config.match_ratio is not None and not keep:
        raise ConfigError("--match-ratio requires --match-cols")
    aux = None
    if cfg["aux"]:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            aux = load_aux_csv(cfg["aux"], cfg["outcome"], cfg["exposure"],
                               main.level_values, keep)
        notes.extend(str(w.message) for w in caught)
    report = validate_study(main, aux, config)
    if aux is None:
        notes.append("no auxiliary data supplied: CMLIB rows omitted")
    match_info = None
    if config.match_ratio is not None and aux is not None:
        missing = [c for c in keep if c not in main.column_names]
        if missing:
            raise ValidationError(f"match columns {missing} not found in main data")
        cols = [main.column_names.index(c) for c in keep]
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            m = match_aux(main.z[:, cols], aux.shared, config.match_ratio, seed=config.seed,
                          caliper=cfg["caliper"], column_names=keep)
        notes.extend(str(w.message) for w in caught)
        aux = aux.subset(m.kept_aux_indices)
        match_info = {"ratio": m.ratio, "kept": int(m.kept_aux_indices.size),
                      "smd_before": dict(zip(keep, m.smd_before.tolist())),
                      "smd_after": dict(zip(keep, m.smd_after.tolist()))}
        notes.append(f"matched {m.kept_aux_indices.size} auxiliary units at ratio "
                     f"1:{m.ratio}")
    res = cross_fit_estimate(main, aux, config)
    estimates = res.estimates
    boot = None
    if config.bootstrap_reps >= 2:
        estimates, boot = bootstrap_inference(main, aux, config, res,
                                              threads=cfg["threads"])
        if boot.unreliable:
            notes.append("more than 10% of bootstrap replicates failed: inference unreliable")
    records = []
    for e in estimates:
        if aux is None and e.method == "CMLIB":
            continue
        records.append({"level": main.level_values[e.level], "method": e.method,
                        "tau_hat": e.tau_hat, "bsd": e.bsd, "ci_low": e.ci_low,
                        "ci_high": e.ci_high, "p_value": e.p_value, "n": res.n, "N": res.N,
                        "rho_hat": res.rho_hat, "n_eff": e.n_eff})
    integ = res.integration
    payload = {
        "schema_version": SCHEMA_VERSION,
        "command": "estimate",
        "records": records,
        "diagnostics": {
            "level_counts": dict(zip(map(str, main.level_values), report.level_counts)),
            "integration_iterations": integ.iterations,
            "integration_violation": integ.violation,
            "theta_hat": list(integ.theta_hat),
            "bootstrap_failures": None if boot is None else int(boot.n_failed.max()),
            "matching": match_info,
        },
        "notes": notes + report.notes,
        "provenance": {"seed": cfg["seed"], "config_hash": config_hash(cfg),
                       "config": {k: v for k, v in cfg.items() if k not in NON_SEMANTIC},
                       "chosen_hyperparameters": _chosen_records(res.chosen, config)},
    }
    emit(render(payload, ESTIMATE_COLUMNS, cfg["format"], "Mean potential outcome estimates"),
         cfg["out"])
    return EXIT_OK


SIM_COLUMNS = ["method", "level", "truth", "bias", "mcsd", "bsd", "cp", "failures", "n_ok"]


def run_simulate(cfg: dict) -> int:
    from .simgen import Scenario, run_monte_carlo

    config = study_config(cfg, default_reps=0)
    try:
        sc = Scenario(case=cfg["case"], p=cfg["p"], n=cfg["n"], aux_multiplier=cfg["aux_mult"],
                      levels=cfg["levels"], heterogeneity_shift=cfg["hetero_shift"],
                      runs=cfg["runs"], seed=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if config.bootstrap_reps == 1:
        raise ConfigError("bootstrap_reps must be 0 or at least 2")
    tab = run_monte_carlo(sc, config, bootstrap_reps=config.bootstrap_reps,
                          threads=cfg["threads"])
    if cfg["format"] == "csv":
        emit(tab.to_csv(), cfg["out"])
        return EXIT_OK
    records = [{"method": r.method, "level": r.level, "truth": tab.truth[r.level],
                "bias": r.bias, "mcsd": r.mcsd, "bsd": r.bsd, "cp": r.cp,
                "failures": r.failures, "n_ok": r.n_ok} for r in tab.rows]
    if cfg["format"] == "text":
        emit(tab.to_text(), cfg["out"])
        return EXIT_OK
    payload = {"schema_version": SCHEMA_VERSION, "command": "simulate", "records": records,
               "provenance": {"seed": cfg["seed"], "config_hash": config_hash(cfg),
                              "config": {k: v for k, v in cfg.items()
                                         if k not in NON_SEMANTIC},
                              "truth": list(tab.truth), "truth_se": list(tab.truth_se)}}
    emit(render(payload, SIM_COLUMNS, "json", ""), cfg["out"])
    return EXIT_OK


MATCH_COLUMNS = ["column", "smd_before", "smd_after"]


def run_match(cfg: dict) -> int:
    from .matching import match_aux

    for k in ("main", "aux", "outcome", "exposure"):
        if not cfg[k]:
            raise ConfigError(f"match requires --{k}")
    if not cfg["match_cols"]:
        raise ConfigError("match requires --match-cols")
    k = cfg["match_ratio"] or 1
    main = load_main_csv(cfg["main"], cfg["outcome"], cfg["exposure"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        aux = load_aux_csv(cfg["aux"], cfg["outcome"], cfg["exposure"], main.level_values,
                           cfg["match_cols"])
    missing = [c for c in cfg["match_cols"] if c not in main.column_names]
    if missing:
        raise ValidationError(f"match columns {missing} not found in main data")
    cols = [main.column_names.index(c) for c in cfg["match_cols"]]
    with warnings.catch_warnings(record=True) as caught2:
        warnings.simplefilter("always")
        m = match_aux(main.z[:, cols], aux.shared, k, seed=cfg["seed"], caliper=cfg["caliper"],
                      column_names=cfg["match_cols"])
    records = [{"column": c, "smd_before": float(b), "smd_after": float(a)}
               for c, b, a in zip(m.column_names, m.smd_before, m.smd_after)]
    notes = [str(w.message) for w in (*caught, *caught2)]
    notes.append(f"kept {m.kept_aux_indices.size} of {aux.size} auxiliary units "
                 f"at ratio 1:{k}")
    payload = {"schema_version": SCHEMA_VERSION, "command": "match", "records": records,
               "kept_aux_indices": m.kept_aux_indices.tolist(), "notes": notes,
               "provenance": {"seed": cfg["seed"], "config_hash": config_hash(cfg)}}
    emit(render(payload, MATCH_COLUMNS, cfg["format"], "Balance (standardized mean difference)"),
         cfg["out"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calibra",
        description="Calibrated ensemble estimation of mean potential outcomes.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--out", help="output path (default: stdout)")
        p.add_argument("--format", choices=["json", "csv", "text"])
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int,
                       help="worker processes (0 = all cores; env CALIBRA_THREADS)")
        p.add_argument("--bootstrap-reps", type=int, dest="bootstrap_reps")
        p.add_argument("--working-function", dest="working_function", choices=["I", "II"])
        p.add_argument("--rf-trees", type=int, dest="rf_trees")

    est = sub.add_parser("estimate", help="estimate mean potential outcomes from CSV data")
    est.add_argument("--main")
    est.add_argument("--aux")
    est.add_argument("--outcome")
    est.add_argument("--exposure")
    est.add_argument("--match-ratio", type=int, dest="match_ratio")
    est.add_argument("--match-cols", dest="match_cols")
    common(est)

    sim = sub.add_parser("simulate", help="run the Monte Carlo study")
    sim.add_argument("--case", type=int, choices=[1, 2, 3])
    sim.add_argument("--p", type=int)
    sim.add_argument("--n", type=int)
    sim.add_argument("--aux-mult", type=float, dest="aux_mult")
    sim.add_argument("--runs", type=int)
    sim.add_argument("--levels", type=int, choices=[2, 3])
    sim.add_argument("--hetero-shift", type=float, dest="hetero_shift")
    sim.add_argument("--match-ratio", type=int, dest="match_ratio")
    common(sim)

    mt = sub.add_parser("match", help="membership-score matching balance diagnostics")
    mt.add_argument("--main")
    mt.add_argument("--aux")
    mt.add_argument("--outcome", default=None)
    mt.add_argument("--exposure", default=None)
    mt.add_argument("--match-cols", dest="match_cols")
    mt.add_argument("--ratio", type=int, dest="match_ratio")
    common(mt)
    return parser


def parse_config(argv=None) -> tuple:
    """Parse flags (and the optional config file) into ``(command, resolved config)``."""
    import os

    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items()
             if v is not None and k not in ("command", "config")}
    file_values = read_config_file(args.config) if args.config else {}
    if "threads" not in flags and "threads" not in file_values:
        env = os.environ.get("CALIBRA_THREADS", "").strip()
        if env:
            flags["threads"] = env
    return args.command, resolve_config(file_values, flags)


def main(argv=None) -> int:
    try:
        command, cfg = parse_config(argv)
        runner = {"estimate": run_estimate, "simulate": run_simulate, "match": run_match}
        return runner[command](cfg)
    except (DataFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ELError as exc:
        print(f"error: empirical-likelihood step infeasible: {exc}", file=sys.stderr)
        return EXIT_EL
    except (ValidationError, ConfigError, LearnerError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
