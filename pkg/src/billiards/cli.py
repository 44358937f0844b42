"""Experiment harness: subcommand dispatch, deterministic runs, provenance.

Data files (CSV or JSON) are byte-identical across reruns with the same
(config, seed) and across worker counts: work is split into fixed index
chunks merged in order, floats are serialized with 17 significant digits,
and JSON keys are sorted.  Wall-clock timing and file checksums live in
manifest.json, which is the only non-reproducible output.

Exit codes: 0 success, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_echo, parse_config
from .dynamics import PhasePoint, orbit_points
from .errors import (BilliardError, NoUsableWindow, ParseError,
                     ValidationError, WindowTooSmall)
from .geometry import build_table
from .induced import default_rule
from .observables import make_observable
from . import diagnostics, stats

CSV_SCHEMAS = {
    "orbit": ("step", "component", "r", "phi", "tau", "singularity_distance"),
    "cells": ("m", "n", "j", "count", "measure", "stderr",
              "u_diam", "s_diam", "u_diam_img", "s_diam_img"),
    "corr": ("lag", "cov", "stderr", "eff_k"),
    "diag_sums": ("delta", "curve", "sum"),
    "diag_radius": ("sample", "radius"),
}

_INT_COLUMNS = {"step", "component", "lag", "m", "n", "j", "count", "curve",
                "sample", "eff_k"}


def fmt_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_rows(path: str, schema_name: str, rows, fmt: str) -> str:
    """Write rows under a fixed schema; returns the path actually written."""
    cols = CSV_SCHEMAS[schema_name]
    if fmt == "json":
        path = path[:-4] + ".json" if path.endswith(".csv") else path
        payload = [{c: (None if v is None else
                        (int(v) if c in _INT_COLUMNS else float(v)))
                    for c, v in zip(cols, row)} for row in rows]
        with open(path, "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=0)
            fh.write("\n")
        return path
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([fmt_value(v) for v in row])
    return path


def parse_rows(path: str, schema_name: str):
    """Read back a data file written by write_rows (round-trip)."""
    cols = CSV_SCHEMAS[schema_name]
    rows = []
    if path.endswith(".json"):
        with open(path) as fh:
            for obj in json.load(fh):
                rows.append(tuple(
                    None if obj[c] is None else
                    (int(obj[c]) if c in _INT_COLUMNS else float(obj[c]))
                    for c in cols))
        return rows
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header) != cols:
            raise ParseError(f"{path}: unexpected header {header}")
        for rec in rd:
            rows.append(tuple(
                None if s == "" else (int(s) if c in _INT_COLUMNS else float(s))
                for c, s in zip(cols, rec)))
    return rows


def write_json(path: str, obj) -> str:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, default=_json_default)
        fh.write("\n")
    return path


def _json_default(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serializable: {type(v)}")


def sha256_of(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _powerfit_dict(fit):
    if fit is None:
        return None
    return {"exponent": fit.exponent, "ci": list(fit.ci), "r2": fit.r2,
            "window": [fit.n_lo, fit.n_hi], "n_points": fit.n_points,
            "prefactor": fit.prefactor,
            "hill": getattr(fit, "hill", None)}


def _ratefit_dict(fit):
    if fit is None:
        return None
    return {"theta": fit.theta, "ci": list(fit.ci),
            "window": list(fit.window), "r2": fit.r2, "n_lags": fit.n_lags,
            "prefactor": fit.prefactor}


# ---------------------------------------------------------------------------
# subcommand implementations

def _cmd_table_validate(cfg, workers, out_dir, fmt):
    table = build_table(cfg.table)
    desc = table.describe()
    print(json.dumps(desc, sort_keys=True, indent=2))
    files = {}
    if out_dir:
        files["table.json"] = write_json(os.path.join(out_dir, "table.json"),
                                         desc)
    return desc, files


def _cmd_orbit(cfg, workers, out_dir, fmt):
    table = build_table(cfg.table)
    rng = stats.chunk_rng(cfg.seed, 0)
    x0 = stats.sample_full_phase(table, rng)
    rows_raw, cause = orbit_points(table, x0, cfg.orbit_steps)
    rows = [(i, x.component, x.r, x.phi, tau, sd)
            for i, (x, tau, sd) in enumerate(rows_raw)]
    summary = {"command": "orbit", "config": config_echo(cfg),
               "start": {"component": x0.component, "r": x0.r, "phi": x0.phi},
               "steps_done": len(rows), "terminated_by": cause}
    files = {}
    files["orbit.csv"] = write_rows(os.path.join(out_dir, "orbit.csv"),
                                    "orbit", rows, fmt)
    files["summary.json"] = write_json(os.path.join(out_dir, "summary.json"),
                                       summary)
    return summary, files


def _cells_summary(cfg, cs):
    summary = {"command": "cells", "config": config_echo(cfg),
               "accepted": cs.K, "draws": cs.draws,
               "acceptance": cs.acceptance, "n0": cs.n0,
               "discards": cs.discards, "mean_R": cs.mean_R,
               "se_R": cs.se_R,
               "moment_checkpoints": cs.moment_checkpoints}
    try:
        summary["tail_fit"] = _powerfit_dict(stats.fit_tail_exponent(cs))
    except WindowTooSmall as e:
        summary["tail_fit"] = None
        summary["tail_fit_error"] = f"{type(e).__name__}: {e}"
    try:
        summary["level_fit"] = _powerfit_dict(stats.fit_level_exponent(cs))
    except WindowTooSmall as e:
        summary["level_fit"] = None
        summary["level_fit_error"] = f"{type(e).__name__}: {e}"
    try:
        report = diagnostics.h6_exponent_check(cs)
        summary["h6"] = {
            "s_hat": report.s_hat, "b_hat": report.b_hat, "d_hat": report.d_hat,
            "inequality_1": list(report.inequality_1),
            "inequality_2": (list(report.inequality_2)
                             if report.inequality_2 else None),
            "passed": report.passed,
            "measure_fit": _powerfit_dict(report.measure_fit),
            "u_diam_fit": _powerfit_dict(report.u_diam_fit),
            "u_diam_img_fit": _powerfit_dict(report.u_diam_img_fit)}
    except WindowTooSmall as e:
        summary["h6"] = None
        summary["h6_error"] = f"{type(e).__name__}: {e}"
    return summary


def _cmd_cells(cfg, workers, out_dir, fmt):
    if cfg.k < 1:
        raise ValidationError([("sampling.k", "cells needs k >= 1")])
    table = build_table(cfg.table)
    rule = cfg.rule
    cs = stats.estimate_cell_measures(table, rule, cfg.k, cfg.seed,
                                      cap=cfg.cap, workers=workers)
    stats.attach_cell_diameters(cs, table)
    rows = [(c.m, c.n, c.j, c.count, c.measure, c.stderr, c.u_diam, c.s_diam,
             c.u_diam_img, c.s_diam_img) for c in cs.cells]
    summary = _cells_summary(cfg, cs)
    files = {}
    files["cells.csv"] = write_rows(os.path.join(out_dir, "cells.csv"),
                                    "cells", rows, fmt)
    files["summary.json"] = write_json(os.path.join(out_dir, "summary.json"),
                                       summary)
    return summary, files


def _cmd_corr(cfg, workers, out_dir, fmt):
    if cfg.k < 1:
        raise ValidationError([("sampling.k", "corr needs k >= 1")])
    table = build_table(cfg.table)
    rule = cfg.rule
    f = make_observable(table, cfg.f_name, cap_T=cfg.cap_t, fhat=cfg.fhat,
                        endpoint_mode=cfg.endpoint_mode)
    g = make_observable(table, cfg.g_name, cap_T=cfg.cap_t, fhat=cfg.fhat,
                        endpoint_mode=cfg.endpoint_mode)
    est = stats.estimate_correlation(table, rule, f, g, cfg.n_max, cfg.k,
                                     cfg.seed, cap=cfg.cap, method=cfg.method,
                                     orbit_len=cfg.orbit_len,
                                     burn_in=cfg.burn_in)
    rows = [(int(n), est.cov[i], est.stderr[i], int(est.eff_count[i]))
            for i, n in enumerate(est.lags)]
    summary = {"command": "corr", "config": config_echo(cfg),
               "f": est.f_name, "g": est.g_name, "method": est.method,
               "noise_floor": est.noise_floor, "discards": est.discards,
               "fit": _ratefit_dict(est.fit), "fit_error": est.fit_error}
    files = {}
    files["corr.csv"] = write_rows(os.path.join(out_dir, "corr.csv"),
                                   "corr", rows, fmt)
    files["summary.json"] = write_json(os.path.join(out_dir, "summary.json"),
                                       summary)
    return summary, files


def _cmd_diag(cfg, workers, out_dir, fmt):
    table = build_table(cfg.table)
    rule = cfg.rule
    lam_stats = diagnostics.estimate_lambda_hat(table, rule,
                                                cfg.lambda_samples, cfg.seed)
    sweep = diagnostics.one_step_expansion_sweep(
        table, rule, cfg.deltas, cfg.curves, cfg.seed, npts=cfg.npts,
        cap=cfg.cap, lambda_stats=lam_stats)
    sum_rows = []
    for d in sweep:
        for i, s in enumerate(d.sums):
            sum_rows.append((d.delta, i, s))
    rng = stats.sample_rng(cfg.seed, 11)
    radii = []
    attempts = 0
    while len(radii) < cfg.curves and attempts < 20 * cfg.curves:
        attempts += 1
        x = stats.sample_reduced(table, rule, rng)
        try:
            radii.append(diagnostics.unstable_radius_proxy(
                table, rule, x, cfg.radius_n, lam_stats[0], cap=cfg.cap))
        except BilliardError:
            continue
    radius_rows = [(i, r) for i, r in enumerate(radii)]
    z_values = {}
    ones = [1.0] * len(radii)
    for r in cfg.r_values:
        try:
            z = diagnostics.z_function_proxy(radii, ones, r)
            z_values[str(r)] = {"value": z.value, "n_used": z.n_used,
                                "n_excluded": z.n_excluded}
        except BilliardError as e:
            z_values[str(r)] = {"error": f"{type(e).__name__}: {e}"}
    summary = {"command": "diag", "config": config_echo(cfg),
               "lambda_hat": lam_stats[0],
               "expanding_fraction": lam_stats[1],
               "note": "all quantities are chart proxies, not verified bounds",
               "sweep": [{"delta": d.delta, "sup_sum": d.sup_sum,
                          "median_sum": d.median_sum, "n_curves": d.n_curves,
                          "n_failed": d.n_failed} for d in sweep],
               "z_proxy": z_values}
    files = {}
    files["diag_sums.csv"] = write_rows(
        os.path.join(out_dir, "diag_sums.csv"), "diag_sums", sum_rows, fmt)
    files["diag_radius.csv"] = write_rows(
        os.path.join(out_dir, "diag_radius.csv"), "diag_radius", radius_rows,
        fmt)
    files["summary.json"] = write_json(os.path.join(out_dir, "summary.json"),
                                       summary)
    return summary, files


def _cmd_fit(cfg, workers, out_dir, fmt):
    if not cfg.fit_input or not cfg.fit_kind:
        raise ValidationError([("fit.input", "fit needs input and kind")])
    if cfg.fit_kind == "cells":
        rows = parse_rows(cfg.fit_input, "cells")
        counts = {}
        for m, n, j, count, *_ in rows:
            counts[n] = counts.get(n, 0) + count
        K = sum(counts.values())
        cs = stats.cell_stats_from_counts(counts, K)
        out = {"command": "fit", "kind": "cells", "input": cfg.fit_input,
               "samples": K}
        try:
            out["tail_fit"] = _powerfit_dict(
                stats.fit_tail_exponent(cs, window=cfg.fit_window))
        except WindowTooSmall as e:
            out["tail_fit"] = None
            out["tail_fit_error"] = str(e)
        try:
            out["level_fit"] = _powerfit_dict(
                stats.fit_level_exponent(cs, window=cfg.fit_window))
        except WindowTooSmall as e:
            out["level_fit"] = None
            out["level_fit_error"] = str(e)
    else:
        rows = parse_rows(cfg.fit_input, "corr")
        lags = np.array([r[0] for r in rows])
        cov = np.array([r[1] for r in rows])
        se = np.array([r[2] for r in rows])
        eff = np.array([r[3] for r in rows])
        est = stats.CorrelationEstimate(
            lags=lags, cov=cov, stderr=se, eff_count=eff,
            noise_floor=2.0 * float(np.median(se[1:])) if len(se) > 1 else 0.0,
            method="file", f_name="f", g_name="g", seed=cfg.seed, K=0)
        out = {"command": "fit", "kind": "corr", "input": cfg.fit_input}
        try:
            win = None
            if cfg.fit_window:
                win = (int(cfg.fit_window[0]), int(cfg.fit_window[1]))
            out["fit"] = _ratefit_dict(stats.fit_exponential_rate(est, window=win))
        except NoUsableWindow as e:
            out["fit"] = None
            out["fit_error"] = str(e)
    print(json.dumps(out, sort_keys=True, indent=2, default=_json_default))
    files = {"fit.json": write_json(os.path.join(out_dir, "fit.json"), out)}
    return out, files


_COMMANDS = {
    "table-validate": _cmd_table_validate,
    "orbit": _cmd_orbit,
    "cells": _cmd_cells,
    "corr": _cmd_corr,
    "diag": _cmd_diag,
    "fit": _cmd_fit,
}


def run(cfg: ExperimentConfig, command: str, workers: int = 1,
        out_dir: str = None, fmt: str = None):
    """Execute one subcommand pipeline; returns (manifest, file map)."""
    out_dir = out_dir or cfg.out_dir
    fmt = fmt or cfg.out_format
    os.makedirs(out_dir, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()
    summary, files = _COMMANDS[command](cfg, workers, out_dir, fmt)
    finished = datetime.now(timezone.utc).isoformat()
    manifest = {
        "version": __version__,
        "command": command,
        "seed": cfg.seed,
        "workers": workers,
        "started": started,
        "finished": finished,
        "config_text": cfg.raw_text,
        "discards": summary.get("discards", {}),
        "files": {name: sha256_of(path) for name, path in files.items()},
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    write_json(manifest_path, manifest)
    files["manifest.json"] = manifest_path
    return manifest, files


def _build_parser():
    p = argparse.ArgumentParser(
        prog="billiard",
        description="hyperbolic-billiard laboratory: induced return maps, "
                    "return-time statistics, correlation decay, diagnostics")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, need_config=True):
        sp.add_argument("--config", required=need_config,
                        help="path to the experiment config file")
        sp.add_argument("--seed", type=int, default=None,
                        help="override [sampling] seed")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--format", choices=("csv", "json"), default=None)

    table_p = sub.add_parser("table", help="table inspection")
    table_sub = table_p.add_subparsers(dest="table_command", required=True)
    add_common(table_sub.add_parser("validate",
                                    help="validate geometry, print JSON"))
    add_common(sub.add_parser("orbit", help="emit one billiard-map orbit"))
    add_common(sub.add_parser("cells", help="cell measures and diameters"))
    add_common(sub.add_parser("corr", help="correlation decay estimate"))
    add_common(sub.add_parser("diag", help="expansion and radius diagnostics"))
    fit_p = sub.add_parser("fit", help="refit exponents/rates from a data file")
    add_common(fit_p, need_config=False)
    fit_p.add_argument("--input", default=None, help="data file to refit")
    fit_p.add_argument("--kind", choices=("cells", "corr"), default=None)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    command = args.command
    if command == "table":
        command = "table-validate"
    try:
        if args.config:
            with open(args.config) as fh:
                cfg = parse_config(fh.read())
        elif command == "fit":
            cfg = parse_config("")
        else:
            raise ParseError("--config is required")
        if args.seed is not None:
            cfg.seed = args.seed
        if command == "fit":
            if getattr(args, "input", None):
                cfg.fit_input = args.input
            if getattr(args, "kind", None):
                cfg.fit_kind = args.kind
        run(cfg, command, workers=args.workers, out_dir=args.out,
            fmt=args.format)
        return 0
    except (ParseError, ValidationError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except BilliardError as e:
        print(f"numerical failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
