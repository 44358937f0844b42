"""Experiment configuration: strict sectioned key-value parsing.

The format is INI-style (configparser).  Unknown sections or keys are
rejected with a nearest-match suggestion; validation collects every
out-of-range value before failing.  Environment variables with the
``BILLIARD_`` prefix override file values: BILLIARD_SAMPLING_SEED=7
overrides key ``seed`` in section ``[sampling]``.
"""

from __future__ import annotations

import configparser
import difflib
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .errors import ParseError, ValidationError
from .geometry import FAMILIES, TableSpec
from .induced import ReducedSpaceRule

ENV_PREFIX = "BILLIARD_"

_SCHEMA: Dict[str, Tuple[str, ...]] = {
    "table": ("family", "a", "rho", "radius", "length", "radii", "beta",
              "halfwidth", "gap", "arc_offset"),
    "reduced": ("rule", "delta_cusp", "delta_flat"),
    "sampling": ("seed", "k", "n_max", "cap", "burn_in", "orbit_steps",
                 "method", "orbit_len"),
    "observables": ("f", "g", "cap_t", "fhat", "endpoint_mode"),
    "diagnostics": ("deltas", "curves", "radius_n", "r_values",
                    "lambda_samples", "npts"),
    "output": ("dir", "format"),
    "fit": ("input", "kind", "window"),
}

_RULES = ("obstacle-collisions", "arc-first-collisions", "cusp-exterior",
          "flat-exterior")
_OBS_NAMES = ("R", "R_trunc", "free_path", "induced_sum")


@dataclass
class ExperimentConfig:
    table: TableSpec
    rule: ReducedSpaceRule
    seed: int = 0
    k: int = 10_000
    n_max: int = 30
    cap: int = 1_000_000
    burn_in: int = 1000
    orbit_steps: int = 1000
    method: str = "ensemble"
    orbit_len: Optional[int] = None
    f_name: str = "R"
    g_name: str = "R"
    cap_t: int = 100
    fhat: str = "cos_phi"
    endpoint_mode: str = "inclusive"
    deltas: Tuple[float, ...] = (1e-2, 1e-3, 1e-4)
    curves: int = 100
    radius_n: int = 5
    r_values: Tuple[float, ...] = (0.5, 1.0)
    lambda_samples: int = 1000
    npts: int = 33
    out_dir: str = "out"
    out_format: str = "csv"
    fit_input: Optional[str] = None
    fit_kind: Optional[str] = None
    fit_window: Optional[Tuple[float, float]] = None
    raw_text: str = ""


def _suggest(name, options):
    close = difflib.get_close_matches(name, options, n=1)
    return f"; did you mean {close[0]!r}?" if close else ""


def _apply_env(parser: configparser.ConfigParser):
    for key, val in sorted(os.environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX):].lower()
        parts = rest.split("_", 1)
        if len(parts) != 2:
            continue
        section, opt = parts
        if section in _SCHEMA:
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, opt, val)


def parse_config(text: str, apply_env: bool = True) -> ExperimentConfig:
    """Parse and validate config text; raises ParseError or ValidationError.

    ValidationError carries the complete list of (key path, message) pairs.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ParseError(f"malformed config: {e}") from e
    if apply_env:
        _apply_env(parser)

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ParseError(
                f"unknown section [{section}]{_suggest(section, list(_SCHEMA))}")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ParseError(
                    f"unknown key {key!r} in [{section}]"
                    f"{_suggest(key, _SCHEMA[section])}")

    problems: List[Tuple[str, str]] = []

    def get(section, key, conv, default, check=None, msg=""):
        if not parser.has_option(section, key):
            return default
        raw = parser.get(section, key)
        try:
            val = conv(raw)
        except (TypeError, ValueError):
            problems.append((f"{section}.{key}", f"cannot parse {raw!r}"))
            return default
        if check is not None and not check(val):
            problems.append((f"{section}.{key}", msg or f"invalid value {val!r}"))
            return default
        return val

    def floats(raw):
        return tuple(float(v) for v in raw.replace(",", " ").split())

    family = get("table", "family", str, "semi-dispersing-square",
                 lambda v: v in FAMILIES, f"must be one of {FAMILIES}")
    a = get("table", "a", float, 1.0, lambda v: v > 0, "must be positive")
    rho = get("table", "rho", float, 0.25, lambda v: 0 < v,
              "must be positive")
    if family == "semi-dispersing-square" and rho is not None and a is not None \
            and rho > 0 and not rho < a / 2:
        problems.append(("table.rho", f"must satisfy rho < a/2 = {a / 2}"))
    radius = get("table", "radius", float, 1.0, lambda v: v > 0,
                 "must be positive")
    length = get("table", "length", float, 2.0, lambda v: v > 0,
                 "must be positive")
    radii = get("table", "radii", floats, (1.0, 1.0, 1.0),
                lambda v: len(v) == 3 and min(v) > 0,
                "needs three positive radii")
    beta = get("table", "beta", float, 4.0, lambda v: v > 2,
               "flatness exponent must exceed 2")
    halfwidth = get("table", "halfwidth", float, 0.5, lambda v: v > 0,
                    "must be positive")
    gap = get("table", "gap", float, 1.0, lambda v: v > 0, "must be positive")
    arc_offset = get("table", "arc_offset", float, 3.0, lambda v: v > 0,
                     "must be positive")

    default_rules = {"semi-dispersing-square": "obstacle-collisions",
                     "stadium": "arc-first-collisions",
                     "cusp": "cusp-exterior",
                     "flat-point": "flat-exterior"}
    rule_kind = get("reduced", "rule", str, default_rules.get(family),
                    lambda v: v in _RULES, f"must be one of {_RULES}")
    delta_cusp = get("reduced", "delta_cusp", float, 0.05,
                     lambda v: 0 < v < 0.5, "must lie in (0, 0.5)")
    delta_flat = get("reduced", "delta_flat", float, None,
                     lambda v: v > 0, "must be positive")

    seed = get("sampling", "seed", int, 0, lambda v: 0 <= v < 2 ** 64,
               "must be an unsigned 64-bit integer")
    k = get("sampling", "k", int, 10_000, lambda v: v >= 0,
            "must be nonnegative")
    n_max = get("sampling", "n_max", int, 30, lambda v: v >= 0,
                "must be nonnegative")
    cap = get("sampling", "cap", int, 1_000_000, lambda v: v >= 1,
              "must be >= 1")
    burn_in = get("sampling", "burn_in", int, 1000, lambda v: v >= 0,
                  "must be nonnegative")
    orbit_steps = get("sampling", "orbit_steps", int, 1000, lambda v: v >= 1,
                      "must be >= 1")
    method = get("sampling", "method", str, "ensemble",
                 lambda v: v in ("ensemble", "single-orbit"),
                 "must be ensemble or single-orbit")
    orbit_len = get("sampling", "orbit_len", int, None, lambda v: v >= 1,
                    "must be >= 1")

    f_name = get("observables", "f", str, "R", lambda v: v in _OBS_NAMES,
                 f"must be one of {_OBS_NAMES}")
    g_name = get("observables", "g", str, "R", lambda v: v in _OBS_NAMES,
                 f"must be one of {_OBS_NAMES}")
    cap_t = get("observables", "cap_t", int, 100, lambda v: v >= 1,
                "must be >= 1")
    fhat = get("observables", "fhat", str, "cos_phi",
               lambda v: v in ("cos_phi", "cos_r", "const"),
               "must be cos_phi, cos_r or const")
    endpoint_mode = get("observables", "endpoint_mode", str, "inclusive",
                        lambda v: v in ("inclusive", "half-open"),
                        "must be inclusive or half-open")

    deltas = get("diagnostics", "deltas", floats, (1e-2, 1e-3, 1e-4),
                 lambda v: len(v) > 0 and min(v) > 0, "need positive deltas")
    curves = get("diagnostics", "curves", int, 100, lambda v: v >= 1,
                 "must be >= 1")
    radius_n = get("diagnostics", "radius_n", int, 5, lambda v: v >= 0,
                   "must be nonnegative")
    r_values = get("diagnostics", "r_values", floats, (0.5, 1.0),
                   lambda v: all(0 < r <= 1 for r in v),
                   "r values must lie in (0, 1]")
    lambda_samples = get("diagnostics", "lambda_samples", int, 1000,
                         lambda v: v >= 10, "must be >= 10")
    npts = get("diagnostics", "npts", int, 33, lambda v: v >= 3,
               "must be >= 3")

    out_dir = get("output", "dir", str, "out")
    out_format = get("output", "format", str, "csv",
                     lambda v: v in ("csv", "json"), "must be csv or json")

    fit_input = get("fit", "input", str, None)
    fit_kind = get("fit", "kind", str, None,
                   lambda v: v in ("cells", "corr"), "must be cells or corr")
    fit_window = get("fit", "window", floats, None,
                     lambda v: len(v) == 2 and 0 < v[0] < v[1],
                     "needs two increasing positive bounds")

    if problems:
        raise ValidationError(problems)

    spec = TableSpec(family=family, a=a, rho=rho, radius=radius, length=length,
                     radii=tuple(radii), beta=beta, halfwidth=halfwidth,
                     gap=gap, arc_offset=arc_offset)
    rule = ReducedSpaceRule(kind=rule_kind, delta_cusp=delta_cusp,
                            delta_flat=delta_flat)
    return ExperimentConfig(
        table=spec, rule=rule, seed=seed, k=k, n_max=n_max, cap=cap,
        burn_in=burn_in, orbit_steps=orbit_steps, method=method,
        orbit_len=orbit_len, f_name=f_name, g_name=g_name, cap_t=cap_t,
        fhat=fhat, endpoint_mode=endpoint_mode, deltas=tuple(deltas),
        curves=curves, radius_n=radius_n, r_values=tuple(r_values),
        lambda_samples=lambda_samples, npts=npts, out_dir=out_dir,
        out_format=out_format, fit_input=fit_input, fit_kind=fit_kind,
        fit_window=(tuple(fit_window) if fit_window else None), raw_text=text)


def config_echo(cfg: ExperimentConfig) -> dict:
    """JSON-friendly echo of the effective configuration."""
    return {
        "table": {"family": cfg.table.family, "a": cfg.table.a,
                  "rho": cfg.table.rho, "radius": cfg.table.radius,
                  "length": cfg.table.length, "radii": list(cfg.table.radii),
                  "beta": cfg.table.beta, "halfwidth": cfg.table.halfwidth,
                  "gap": cfg.table.gap, "arc_offset": cfg.table.arc_offset},
        "reduced": {"rule": cfg.rule.kind, "delta_cusp": cfg.rule.delta_cusp,
                    "delta_flat": cfg.rule.delta_flat},
        "sampling": {"seed": cfg.seed, "k": cfg.k, "n_max": cfg.n_max,
                     "cap": cfg.cap, "burn_in": cfg.burn_in,
                     "orbit_steps": cfg.orbit_steps, "method": cfg.method,
                     "orbit_len": cfg.orbit_len},
        "observables": {"f": cfg.f_name, "g": cfg.g_name, "cap_t": cfg.cap_t,
                        "fhat": cfg.fhat, "endpoint_mode": cfg.endpoint_mode},
        "diagnostics": {"deltas": list(cfg.deltas), "curves": cfg.curves,
                        "radius_n": cfg.radius_n,
                        "r_values": list(cfg.r_values),
                        "lambda_samples": cfg.lambda_samples,
                        "npts": cfg.npts},
        "output": {"dir": cfg.out_dir, "format": cfg.out_format},
    }
