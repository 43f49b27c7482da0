"""Command-line entry point.

Subcommands: ``solve-q``, ``minimize``, ``sweep``, ``probe-nonexistence`` and
``report``.  Every command reads a JSON run configuration (``--config`` or a
built-in ``--preset``), validates it before computing anything and writes its
outputs into ``--out``.  Exit codes: 0 pass, 1 assertion failure, 2 config
error.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import warnings
from dataclasses import asdict, fields
from pathlib import Path

import jsonschema
import numpy as np
import scipy.fft as sfft

from . import asymptotics, model, solver
from .model import ModelParams, PotentialSpec
from .scalar_ground import GroundStateOptions, check_tail_resolution, load_or_solve, q_moment
from .spectral import Grid, _atomic_write, save_field

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

_TERM = {
    "type": "object",
    "properties": {
        "center": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "exponent": {"type": "number", "exclusiveMinimum": 0},
        "factor": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["center", "exponent"],
    "additionalProperties": False,
}

_SOLVER_FIELDS = {f.name for f in fields(solver.SolverConfig)}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "grid": {
            "type": "object",
            "properties": {
                "n": {"type": "integer", "minimum": 16},
                "box_length": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["n", "box_length"],
            "additionalProperties": False,
        },
        "ground": {
            "type": "object",
            "properties": {
                "n": {"type": "integer", "minimum": 16},
                "box_length": {"type": "number", "exclusiveMinimum": 0},
                "tol": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["n", "box_length"],
            "additionalProperties": False,
        },
        "params": {
            "type": "object",
            "properties": {
                "a1_frac": {"type": "number", "minimum": 0},
                "a2_frac": {"type": "number", "minimum": 0},
                "beta_frac": {"type": "number", "minimum": 0},
                "a1": {"type": "number", "minimum": 0},
                "a2": {"type": "number", "minimum": 0},
                "beta": {"type": "number", "minimum": 0},
                "m": {"type": "number", "minimum": 0},
            },
            "allOf": [
                {"oneOf": [{"required": ["a1_frac"]}, {"required": ["a1"]}]},
                {"oneOf": [{"required": ["a2_frac"]}, {"required": ["a2"]}]},
                {"oneOf": [{"required": ["beta_frac"]}, {"required": ["beta"]}]},
            ],
            "additionalProperties": False,
        },
        "potentials": {
            "type": "array",
            "items": {"type": "array", "items": _TERM, "minItems": 1},
            "minItems": 2,
            "maxItems": 2,
        },
        "solver": {
            "type": "object",
            "propertyNames": {"enum": sorted(_SOLVER_FIELDS)},
        },
        "sweep": {
            "type": "object",
            "properties": {
                "beta0_frac": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "levels": {"type": "integer", "minimum": 1},
                "box_factor": {"type": "number", "exclusiveMinimum": 0},
                "fixed_box": {"type": "boolean"},
                "cold_start": {"type": "boolean"},
                "min_records": {"type": "integer", "minimum": 1},
                "checks": {"type": "array", "items": {"type": "string"}},
            },
            "additionalProperties": False,
        },
        "probe": {
            "type": "object",
            "properties": {
                "sigmas": {"type": "array", "items": {"type": "number", "minimum": 1}, "minItems": 2},
                "threshold": {"type": "number"},
            },
            "additionalProperties": False,
        },
        "start_width": {"type": "number", "exclusiveMinimum": 0},
        "dump_fields": {"type": "boolean"},
        "output_dir": {"type": "string"},
        "cache_dir": {"type": "string"},
    },
    "required": ["grid", "params", "potentials"],
    "additionalProperties": False,
}

_HARMONIC = [{"center": [0.0, 0.0, 0.0], "exponent": 2.0, "factor": 1.0}]

_TWO_ORDER = [
    {"center": [-1.0, 0.0, 0.0], "exponent": 2.0, "factor": 0.03},
    {"center": [1.0, 0.0, 0.0], "exponent": 1.0},
]
_TWO_FLAT = [
    {"center": [-1.0, 0.0, 0.0], "exponent": 2.0, "factor": 0.0075},
    {"center": [1.0, 0.0, 0.0], "exponent": 2.0},
    {"center": [3.0, 0.0, 0.0], "exponent": 1.0},
]

PRESETS = {
    "existence": {
        "grid": {"n": 96, "box_length": 16.0},
        "params": {"a1_frac": 0.5, "a2_frac": 0.5, "beta_frac": 0.5, "m": 0.0},
        "potentials": [_HARMONIC, _HARMONIC],
    },
    "harmonic-symmetric": {
        "grid": {"n": 96, "box_length": 16.0},
        "params": {"a1_frac": 0.5, "a2_frac": 0.5, "beta_frac": 0.5, "m": 0.0},
        "potentials": [_HARMONIC, _HARMONIC],
        "sweep": {"beta0_frac": 0.5, "levels": 8, "box_factor": 22.0},
    },
    "linear-massive": {
        "grid": {"n": 96, "box_length": 16.0},
        "params": {"a1_frac": 0.5, "a2_frac": 0.5, "beta_frac": 0.5, "m": 0.5},
        "potentials": [
            [{"center": [0.0, 0.0, 0.0], "exponent": 1.0, "factor": 400.0}],
            [{"center": [0.0, 0.0, 0.0], "exponent": 1.0, "factor": 400.0}],
        ],
        "sweep": {"beta0_frac": 0.5, "levels": 8, "box_factor": 22.0},
    },
    # V = c |x-a|^2 |x-b|: a has the larger vanishing order
    "two-center-order": {
        "grid": {"n": 96, "box_length": 8.0},
        "params": {"a1_frac": 0.5, "a2_frac": 0.5, "beta_frac": 0.5, "m": 0.0},
        "potentials": [_TWO_ORDER, _TWO_ORDER],
        "sweep": {"beta0_frac": 0.5, "levels": 5, "fixed_box": True, "checks": ["concentration"]},
    },
    # V = c |x-a|^2 |x-b|^2 |x-d|: a and b share q = 2, b has the smaller lambda
    "two-center-flatness": {
        "grid": {"n": 96, "box_length": 8.0},
        "params": {"a1_frac": 0.5, "a2_frac": 0.5, "beta_frac": 0.5, "m": 0.0},
        "potentials": [_TWO_FLAT, _TWO_FLAT],
        "sweep": {"beta0_frac": 0.5, "levels": 5, "fixed_box": True, "checks": ["concentration"]},
    },
    "nonexistence-beta": {
        "grid": {"n": 64, "box_length": 16.0},
        "params": {"a1_frac": 0.5, "a2_frac": 0.5, "beta_frac": 1.1, "m": 0.0},
        "potentials": [_HARMONIC, _HARMONIC],
    },
}

SWEEP_CHECKS = ("energy", "masses", "profiles", "d_ratios", "mu_eps", "max_gap", "blowup", "energy_rate")


class ConfigError(ValueError):
    pass


# -- configuration --------------------------------------------------------------


def load_config(path=None, preset=None) -> dict:
    if (path is None) == (preset is None):
        raise ConfigError("give exactly one of --config or --preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(sorted(PRESETS))}")
        cfg = copy.deepcopy(PRESETS[preset])
    else:
        try:
            cfg = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {loc}: {exc.message}") from exc
    try:
        Grid(cfg["grid"]["n"], float(cfg["grid"]["box_length"]))
        if "ground" in cfg:
            Grid(cfg["ground"]["n"], float(cfg["ground"]["box_length"]))
        potentials_from(cfg)
        solver_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def ground_grid(cfg: dict) -> Grid:
    g = cfg.get("ground", {"n": 128, "box_length": 40.0})
    return Grid(g["n"], float(g["box_length"]))


def ground_options(cfg: dict) -> GroundStateOptions:
    return GroundStateOptions(tol=float(cfg.get("ground", {}).get("tol", 1e-7)))


def potentials_from(cfg: dict) -> tuple[PotentialSpec, PotentialSpec]:
    p1, p2 = cfg["potentials"]
    return PotentialSpec.from_dicts(p1), PotentialSpec.from_dicts(p2)


def solver_config(cfg: dict, seed: int | None = None) -> solver.SolverConfig:
    kw = dict(cfg.get("solver", {}))
    if seed is not None:
        kw["seed"] = seed
    return solver.SolverConfig(**kw)


def resolve_params(cfg: dict, a_star: float) -> ModelParams:
    """Turn fractions of a* and beta* into absolute strengths."""
    p = cfg["params"]
    a1 = p["a1_frac"] * a_star if "a1_frac" in p else p["a1"]
    a2 = p["a2_frac"] * a_star if "a2_frac" in p else p["a2"]
    if "beta_frac" in p:
        if a1 > a_star or a2 > a_star:
            # beta* is undefined; only the a_i cases can be probed
            beta = p["beta_frac"] * a_star
        else:
            beta = p["beta_frac"] * model.beta_star(a1, a2, a_star)
    else:
        beta = p["beta"]
    return ModelParams(float(a1), float(a2), float(beta), float(p.get("m", 0.0)))


# -- output helpers -------------------------------------------------------------


def _check(value, limit, kind="max") -> dict:
    """A numeric claim with its tolerance; ``kind`` is max, min or range."""
    if kind == "max":
        ok = value < limit
    elif kind == "min":
        ok = value > limit
    else:
        ok = limit[0] <= value <= limit[1]
    return {"value": value, "tolerance": limit, "kind": kind, "pass": bool(ok)}


def _failed(exc: Exception) -> dict:
    return {"value": str(exc), "tolerance": None, "kind": "error", "pass": False}


def _write_json(path: Path, body: dict) -> None:
    _atomic_write(path, (json.dumps(body, indent=2, sort_keys=True, default=_jsonable) + "\n").encode())


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _all_pass(checks: dict) -> bool:
    return all(c["pass"] for c in checks.values())


def _ground(cfg: dict):
    grid = ground_grid(cfg)
    check_tail_resolution(grid)
    return load_or_solve(grid, cfg.get("cache_dir"), ground_options(cfg))


def _theory(params, pots, ground):
    return model.theory_quantities(params, pots[0], pots[1], ground.a_star, lambda q: q_moment(ground, q))


# -- commands -------------------------------------------------------------------


def cmd_solve_q(cfg: dict, out: Path) -> int:
    ground = _ground(cfg)
    checks = {
        "identity_defect": _check(max(ground.identity_defects), 1e-3),
        "pohozaev_defect": _check(ground.pohozaev_defect, 5e-3),
        "decay_exponent": _check(ground.decay_exponent, [-4.5, -3.5], "range"),
        "gn_sharpness": _check(abs(ground.quotient / (0.5 * ground.a_star) - 1.0), 1e-3),
    }
    body = {
        "a_star": ground.a_star,
        "identity_defects": ground.identity_defects,
        "el_residual": ground.el_residual,
        "grid": {"n": ground.grid.n, "box_length": ground.grid.box_length},
        "checks": checks,
    }
    _write_json(out / "solve_q.json", body)
    for name, c in checks.items():
        if not c["pass"]:
            print(f"solve-q: {name} = {c['value']!r} violates {c['kind']} {c['tolerance']!r}", file=sys.stderr)
    return EXIT_PASS if _all_pass(checks) else EXIT_FAIL


def cmd_probe(cfg: dict, out: Path, params=None, ground=None) -> int:
    ground = ground or _ground(cfg)
    params = params or resolve_params(cfg, ground.a_star)
    probe = cfg.get("probe", {})
    res = solver.probe_nonexistence(
        params, potentials_from(cfg), ground, probe.get("sigmas"), probe.get("threshold", -10.0)
    )
    _write_json(out / "probe.json", {"params": asdict(params), **res.to_dict()})
    print(f"verdict: {res.verdict}")
    return EXIT_PASS if res.verdict == solver.UNBOUNDED_VERDICT else EXIT_FAIL


def cmd_minimize(cfg: dict, out: Path, seed: int | None = None) -> int:
    ground = _ground(cfg)
    params = resolve_params(cfg, ground.a_star)
    if solver.regime(params, ground.a_star) != "existence":
        return cmd_probe(cfg, out, params, ground)
    grid = Grid(cfg["grid"]["n"], float(cfg["grid"]["box_length"]))
    pots = potentials_from(cfg)
    conf = solver_config(cfg, seed)
    V1 = model.potential_field(pots[0], grid)
    V2 = model.potential_field(pots[1], grid)
    gam = model.gamma(params.a1, params.a2, ground.a_star)
    width = float(cfg.get("start_width", 0.125 * grid.box_length))
    center = solver._zero_of(pots[0], pots[1])
    start = solver.random_start(grid, width, gam, conf.seed, center)
    rep = solver.minimize(grid, start, params, V1, V2, conf, a_star=ground.a_star, csv_path=out / "iterations.csv")
    body = {
        "params": asdict(params),
        "energy": rep.energy,
        "mu": rep.mu,
        "masses": rep.masses,
        "d_values": rep.d_values,
        "eps_beta": rep.eps_beta,
        "maxima": [list(map(float, z)) for z in rep.maxima],
        "residual": rep.residual,
        "iterations": rep.iterations,
        "converged": rep.converged,
        "regime": rep.regime,
        "checks": {
            "residual": _check(rep.residual, conf.tol_residual),
            "energy_nonnegative": _check(rep.energy, -1e-6, "min"),
        },
    }
    _write_json(out / "minimize.json", body)
    if cfg.get("dump_fields"):
        save_field(out / "u1.f64", rep.state.u1, grid, name="u1")
        save_field(out / "u2.f64", rep.state.u2, grid, name="u2")
    return EXIT_PASS if rep.converged else EXIT_FAIL


def sweep_checks(result: asymptotics.SweepResult, enabled, min_records: int = 5) -> dict:
    """Tolerance-tagged claims about a finished sweep."""
    rec = result.records
    th = result.theory
    last = rec[-1]
    diag = asymptotics.sweep_diagnostics(result)
    checks = {}
    if "energy" in enabled:
        checks["energy_last_over_first"] = _check(diag["energy_last_over_first"], 0.05)
        checks["energy_monotone"] = _check(float(diag["energy_monotone"]), 0.5, "min")
    if "masses" in enabled:
        checks["mass_error"] = _check(max(diag["mass_errors"]), 0.02)
    if "profiles" in enabled:
        checks["profile_distance"] = _check(max(last.profile_err1, last.profile_err2), 0.05)
    if "d_ratios" in enabled:
        checks["d_ratio_error"] = _check(max(diag["d_ratio_errors"]), 0.10)
    if "mu_eps" in enabled:
        checks["mu_eps_error"] = _check(diag["mu_eps_error"], 0.10)
    if "max_gap" in enabled:
        checks["max_gap"] = _check(last.max_gap, 0.1)
    if "blowup" in enabled:
        try:
            fit = asymptotics.fit_blowup(rec, th, min_records)
            checks["blowup_slope_error"] = _check(fit.slope_error, 0.10)
            checks["eps_ratio"] = _check(fit.amplitude_ratio, [0.85, 1.15], "range")
        except ValueError as exc:
            checks["blowup_slope_error"] = _failed(exc)
    if "energy_rate" in enabled:
        try:
            fit = asymptotics.energy_rate(rec, th, min_records)
            checks["energy_rate_ratio"] = _check(fit.amplitude_ratio, [0.85, 1.15], "range")
        except ValueError as exc:
            checks["energy_rate_ratio"] = _failed(exc)
    if "concentration" in enabled:
        conc = asymptotics.concentration_check(rec, th)
        checks["concentration"] = {
            "value": conc.verdict,
            "tolerance": "Z0 selected",
            "kind": "equal",
            "pass": conc.verdict == "Z0 selected",
        }
    return checks


def cmd_sweep(cfg: dict, out: Path, seed: int | None = None) -> int:
    ground = _ground(cfg)
    params = resolve_params(cfg, ground.a_star)
    if solver.regime(params, ground.a_star) != "existence":
        raise ConfigError("sweeps need a1, a2 < a*")
    pots = potentials_from(cfg)
    sw = cfg.get("sweep", {})
    th = _theory(params, pots, ground)
    schedule = asymptotics.geometric_schedule(
        th.beta_star, sw.get("beta0_frac", 0.5) * th.beta_star, sw.get("levels", 8)
    )
    fixed = sw.get("fixed_box", False)
    sconf = asymptotics.SweepConfig(
        n=cfg["grid"]["n"],
        box_factor=sw.get("box_factor", 20.0),
        box_length=float(cfg["grid"]["box_length"]) if fixed else None,
        solver=solver_config(cfg, seed),
        cold_start=sw.get("cold_start", True),
    )
    min_records = sw.get("min_records", 5)

    def progress(k, r):
        print(f"level {k}: beta={r.beta:.6g} e={r.energy:.6g} eps={r.eps_beta:.4g} its={r.iterations}", flush=True)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", asymptotics.ResolutionWarning)
        result = asymptotics.sweep(params, pots, schedule, ground, sconf, th, progress=progress)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if len(result.records) < min_records:
        print(f"sweep: only {len(result.records)} records remain after the resolution guard", file=sys.stderr)
        asymptotics.write_records(out / "sweep.csv", result.records)
        return EXIT_FAIL
    enabled = sw.get("checks", list(SWEEP_CHECKS))
    checks = sweep_checks(result, enabled, min_records)
    fits = {}
    for name, fit in (("blowup", asymptotics.fit_blowup), ("energy_rate", asymptotics.energy_rate)):
        try:
            fits[name] = fit(result.records, th, min_records)
        except ValueError as exc:
            fits[name] = {"error": str(exc)}
    if "concentration" in enabled:
        fits["concentration"] = asymptotics.concentration_check(result.records, th).to_dict()
    asymptotics.write_records(out / "sweep.csv", result.records)
    summary = json.loads(asymptotics.summary_json(result, fits))
    summary["checks"] = checks
    summary["params"] = asdict(params)
    _write_json(out / "sweep.json", summary)
    for name, c in checks.items():
        if not c["pass"]:
            print(f"sweep: {name} = {c['value']!r} fails {c['kind']} {c['tolerance']!r}", file=sys.stderr)
    return EXIT_PASS if _all_pass(checks) else EXIT_FAIL


def cmd_report(out: Path) -> int:
    """Print the checks of every summary JSON in ``out``."""
    found = sorted(out.glob("*.json"))
    if not found:
        print(f"no summaries in {out}", file=sys.stderr)
        return EXIT_CONFIG
    ok = True
    for path in found:
        body = json.loads(path.read_text())
        print(path.name)
        if "verdict" in body:
            print(f"  verdict: {body['verdict']}")
            ok &= body["verdict"] == solver.UNBOUNDED_VERDICT
        for name, c in sorted(body.get("checks", {}).items()):
            mark = "PASS" if c["pass"] else "FAIL"
            print(f"  {mark} {name}: {c['value']} ({c['kind']} {c['tolerance']})")
            ok &= bool(c["pass"])
    return EXIT_PASS if ok else EXIT_FAIL


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prhartree", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("solve-q", "minimize", "sweep", "probe-nonexistence", "report"):
        p = sub.add_parser(name)
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--threads", type=int, default=1, help="FFT worker threads")
        if name == "report":
            continue
        p.add_argument("--config", type=Path, default=None, help="JSON run configuration")
        p.add_argument("--preset", default=None, help=f"built-in configuration: {', '.join(sorted(PRESETS))}")
        p.add_argument("--seed", type=int, default=None, help="seed for perturbed starts")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("--threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "report":
        return cmd_report(args.out or Path("."))
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("--seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.preset)
        out = Path(args.out or cfg.get("output_dir", "out"))
        out.mkdir(parents=True, exist_ok=True)
        with sfft.set_workers(args.threads):
            if args.command == "solve-q":
                return cmd_solve_q(cfg, out)
            if args.command == "minimize":
                return cmd_minimize(cfg, out, args.seed)
            if args.command == "sweep":
                return cmd_sweep(cfg, out, args.seed)
            return cmd_probe(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # failed preconditions such as the tail-resolution guard
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
