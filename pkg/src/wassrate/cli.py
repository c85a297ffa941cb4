"""Command-line front end: ``wassrate {dist,rates,tails,mkv,bounds}``.

Experiments are described by a TOML file; command-line flags override it.
Exit codes: 0 success, 2 configuration or input error, 3 budget or oracle
cap exceeded, 4 numerical abort in the particle simulation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import tomli

from . import __version__
from .analysis import (
    ORACLE_MODES,
    BudgetExceeded,
    EnvelopeParams,
    binomial_bounds,
    envelope,
    f_fn,
    g_fn,
    mc_mean_distance,
    mc_mkv,
    mc_tail,
    poisson_bounds,
    task_rng,
    _table_csv,
    _table_json,
)
from .dyadic import DyadicError, build_coupling, dp_noncompact, kappa
from .measures import MeasureError, ReferenceMeasure, read_point_cloud
from .ot_oracle import OracleCapExceeded, OracleError, w1d_exact, wexact_discrete
from .samplers import MkvInstability, ProcessSpec, SamplerError, simulate_mkv, write_trajectories

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_NUMERIC = 0, 2, 3, 4
# settings that never change the numbers
_PRESENTATION_KEYS = ("workers", "out", "format")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with path.open("rb") as fh:
            return tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _merge_flags(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = dict(cfg)
    cfg["command"] = args.command
    for key in ("seed", "out", "format", "workers", "p", "depth", "reps"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg.setdefault("format", "csv")
    cfg.setdefault("workers", 1)
    if cfg["format"] not in ("csv", "json"):
        raise ConfigError("format must be 'csv' or 'json'")
    return cfg


def _require(cfg: dict, key: str, kind=None):
    if key not in cfg:
        raise ConfigError(f"missing required setting '{key}'")
    val = cfg[key]
    if kind is not None and not isinstance(val, kind):
        raise ConfigError(f"setting '{key}' has the wrong type")
    return val


def _seed(cfg: dict) -> int:
    seed = _require(cfg, "seed")
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be an integer in [0, 2^64)")
    return seed


def build_reference(tbl: dict) -> ReferenceMeasure:
    """Reference law from a ``[reference]`` table."""
    kind = _require(tbl, "kind", str)
    dim = int(tbl.get("dim", 1))
    try:
        if kind == "uniform_cube":
            return ReferenceMeasure.uniform_cube(dim, float(tbl.get("radius", 1.0)))
        if kind == "gaussian":
            return ReferenceMeasure.gaussian(dim, tbl.get("mean"), tbl.get("var"))
        if kind == "pareto_radial":
            return ReferenceMeasure.pareto_radial(dim, float(_require(tbl, "q")))
        if kind == "two_point":
            return ReferenceMeasure.two_point(_require(tbl, "a"), _require(tbl, "b"), float(tbl.get("w", 0.5)))
        if kind == "split_support":
            return ReferenceMeasure.split_support(dim, float(tbl.get("half_width", 0.25)),
                                                  float(tbl.get("offset", 0.75)), float(tbl.get("w", 0.5)))
        if kind == "file":
            path = Path(_require(tbl, "path", str))
            if not path.is_file():
                raise ConfigError(f"reference file not found: {path}")
            return ReferenceMeasure.from_discrete(read_point_cloud(path))
    except MeasureError as exc:
        raise ConfigError(f"reference: {exc}") from None
    raise ConfigError(f"unknown reference kind {kind!r}")


_PROCESS_KEYS = ("dim", "a", "init_mean", "init_var", "r", "potential", "beta", "alpha", "dt", "T", "x0",
                 "proxy_particles")


def build_process(cfg: dict, default_kind: str = "iid") -> ProcessSpec:
    tbl = dict(cfg.get("process", {}))
    kind = tbl.pop("kind", default_kind)
    unknown = set(tbl) - set(_PROCESS_KEYS)
    if unknown:
        raise ConfigError(f"unknown process settings: {sorted(unknown)}")
    ref = build_reference(cfg["reference"]) if "reference" in cfg else None
    if ref is not None and "dim" not in tbl:
        tbl["dim"] = ref.dim
    try:
        return ProcessSpec(kind, reference=ref, **tbl)
    except (SamplerError, TypeError) as exc:
        raise ConfigError(f"process: {exc}") from None


def _grid(cfg: dict, key: str, cast) -> list:
    vals = _require(cfg, key, list)
    try:
        return [cast(v) for v in vals]
    except (TypeError, ValueError):
        raise ConfigError(f"'{key}' must be a list of numbers") from None


def effective_config(cfg: dict) -> dict:
    """The settings that determine the numbers (presentation keys removed)."""
    return {k: v for k, v in sorted(cfg.items()) if k not in _PRESENTATION_KEYS}


def config_hash(cfg: dict) -> str:
    blob = json.dumps(effective_config(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _run_metadata(cfg: dict) -> dict:
    return {"config": effective_config(cfg), "config_hash": config_hash(cfg), "seed": cfg.get("seed"),
            "version": __version__}


def _emit(text: str, cfg: dict) -> None:
    out = cfg.get("out")
    if out:
        Path(out).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# commands


def run_dist(cfg: dict) -> int:
    paths = _require(cfg, "inputs", list)
    if len(paths) != 2:
        raise ConfigError("dist needs exactly two point-cloud files")
    for path in paths:
        if not Path(path).is_file():
            raise ConfigError(f"input file not found: {path}")
    mu, nu = (read_point_cloud(path) for path in paths)
    if mu.dim != nu.dim:
        raise ConfigError("the two point clouds have different dimensions")
    p = float(cfg.get("p", 1.0))
    depth = cfg.get("depth")
    dp = dp_noncompact(mu, nu, p, depth)
    k = kappa(p, mu.dim)
    tp = math.nan
    note = None
    try:
        if mu.dim == 1 and p >= 1:
            tp = w1d_exact(mu, nu, p)
        else:
            tp = wexact_discrete(mu, nu, p, max_entries=int(cfg.get("max_entries", 10**6)))[0]
    except OracleCapExceeded as exc:
        if not cfg.get("dp_only", False):
            raise
        note = f"exact cost unavailable: {exc}"
    bound = k * (dp.value + dp.truncation_bound)
    ratio = 0.0 if tp == 0 else (tp / (k * dp.value) if dp.value > 0 else math.inf)
    result = {"d": mu.dim, "p": p, "D_p": dp.value, "truncation_bound": dp.truncation_bound, "T_p": tp,
              "kappa": k, "dominance_ratio": ratio, "dominance_holds": bool(math.isnan(tp) or tp <= bound * (1 + 1e-12))}
    if note:
        result["note"] = note
    if cfg.get("plan_out"):
        build_coupling(mu, nu, p, depth).to_csv(cfg["plan_out"])
    meta = _run_metadata(cfg)
    if cfg["format"] == "json":
        text = _table_json(meta, [result])
    else:
        cols = tuple(result)
        text = _table_csv(cols, [result], meta)
    _emit(text, cfg)
    return EXIT_OK


def _oracle_mode(cfg: dict) -> str:
    mode = cfg.get("oracle_mode", "exact_1d")
    if mode not in ORACLE_MODES:
        raise ConfigError(f"oracle_mode must be one of {ORACLE_MODES}")
    return mode


def run_rates(cfg: dict) -> int:
    seed = _seed(cfg)
    process = build_process(cfg)
    grid = _grid(cfg, "N_grid", int)
    kw = {"workers": int(cfg["workers"]), "depth": cfg.get("depth"), "with_dp": bool(cfg.get("with_dp", True))}
    if "budget" in cfg:
        kw["budget"] = int(cfg["budget"])
    table = mc_mean_distance(process, float(cfg.get("p", 1.0)), grid, int(cfg.get("reps", 200)),
                             _oracle_mode(cfg), seed,
                             on_row=lambda r: _log(f"N={r.N} mean_Tp={r.mean_Tp:.6g} mean_Dp={r.mean_Dp:.6g}"), **kw)
    table.metadata.update(_run_metadata(cfg))
    _emit(table.to_json() if cfg["format"] == "json" else table.to_csv(), cfg)
    return EXIT_OK


def _envelope_params(cfg: dict) -> EnvelopeParams | None:
    if "envelope" not in cfg:
        return None
    try:
        params = EnvelopeParams(**cfg["envelope"])
        params.validate(float(cfg.get("p", 1.0)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"envelope: {exc}") from None
    return params


def run_tails(cfg: dict) -> int:
    seed = _seed(cfg)
    process = build_process(cfg)
    kw = {"workers": int(cfg["workers"]), "depth": cfg.get("depth"),
          "poissonized": bool(cfg.get("poissonized", False)), "envelope_params": _envelope_params(cfg)}
    if "budget" in cfg:
        kw["budget"] = int(cfg["budget"])
    table = mc_tail(process, float(cfg.get("p", 1.0)), int(_require(cfg, "N")), _grid(cfg, "x_grid", float),
                    int(cfg.get("reps", 1000)), _oracle_mode(cfg), seed, **kw)
    for r in table.rows:
        _log(f"x={r.x:.6g} prob={r.empirical_prob:.6g}")
    table.metadata.update(_run_metadata(cfg))
    _emit(table.to_json() if cfg["format"] == "json" else table.to_csv(), cfg)
    return EXIT_OK


def run_mkv(cfg: dict) -> int:
    seed = _seed(cfg)
    process = build_process(cfg, default_kind="mkv")
    if process.kind != "mkv":
        raise ConfigError("mkv needs process.kind = 'mkv'")
    table = mc_mkv(process, _grid(cfg, "N_grid", int), int(cfg.get("reps", 100)), seed,
                   on_row=lambda r: _log(f"N={r.N} discrepancy={r.mean_discrepancy:.6g}"))
    if cfg.get("trajectory_out"):
        res = simulate_mkv(process, max(table.column("N").astype(int)), task_rng(seed, 2**31 - 2),
                           record_every=int(cfg.get("record_every", 100)))
        write_trajectories(res.trajectories, cfg["trajectory_out"])
    table.metadata.update(_run_metadata(cfg))
    _emit(table.to_json() if cfg["format"] == "json" else table.to_csv(), cfg)
    return EXIT_OK


def _fmt_inputs(**kw) -> str:
    return ";".join(f"{k}={v!r}" for k, v in kw.items())


def run_bounds(cfg: dict) -> int:
    """Tabulate the analytic calculators over the requested grids."""
    rows = []

    def add(quantity, value, **inputs):
        rows.append({"quantity": quantity, "inputs": _fmt_inputs(**inputs), "value": float(value)})

    tbl = cfg.get("bounds", {})
    for x in tbl.get("x_grid", [0.25, 0.5, 1.0, 2.0]):
        add("f", f_fn(float(x)), x=float(x))
        add("g", g_fn(float(x)), x=float(x))
    for lam in tbl.get("lambda_grid", [5.0, 10.0, 50.0]):
        for x in tbl.get("x_grid", [0.25, 0.5, 1.0, 2.0]):
            b = poisson_bounds(float(lam), x=float(x))
            add("poisson_upper_tail", b.upper_tail, lam=float(lam), x=float(x))
            add("poisson_two_sided", b.two_sided, lam=float(lam), x=float(x))
        for th in tbl.get("theta_grid", [0.5, 1.0]):
            b = poisson_bounds(float(lam), theta=float(th))
            add("poisson_mgf", b.mgf, lam=float(lam), theta=float(th))
            add("poisson_abs_mgf_bound", b.abs_mgf_bound, lam=float(lam), theta=float(th))
    for n in tbl.get("n_grid", [100]):
        for prob in tbl.get("prob_grid", [0.1, 0.5]):
            for z in tbl.get("z_grid", [0.25, 0.5, 1.0, 2.0]):
                add("binomial_two_sided", binomial_bounds(int(n), float(prob), z=float(z)).two_sided,
                    n=int(n), prob=float(prob), z=float(z))
            for th in tbl.get("theta_grid", [0.5, 1.0]):
                b = binomial_bounds(int(n), float(prob), theta=float(th))
                add("binomial_mgf", b.mgf, n=int(n), prob=float(prob), theta=float(th))
                add("binomial_mgf_bound", b.mgf_bound, n=int(n), prob=float(prob), theta=float(th))
    params = _envelope_params(cfg)
    if params is not None:
        p = float(cfg.get("p", 1.0))
        d = int(cfg.get("d", 1))
        for n in tbl.get("N_grid", [100]):
            for x in tbl.get("envelope_x_grid", [0.05, 0.1, 0.5, 1.0, 2.0]):
                try:
                    a_val, b_val = envelope(params, p, d, int(n), float(x))
                except ValueError as exc:
                    raise ConfigError(f"envelope: {exc}") from None
                add("envelope_a", a_val, N=int(n), x=float(x))
                add("envelope_b", b_val, N=int(n), x=float(x))
    meta = _run_metadata(cfg)
    text = _table_json(meta, rows) if cfg["format"] == "json" else _table_csv(("quantity", "inputs", "value"), rows, meta)
    _emit(text, cfg)
    return EXIT_OK


COMMANDS = {"dist": run_dist, "rates": run_rates, "tails": run_tails, "mkv": run_mkv, "bounds": run_bounds}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wassrate", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"wassrate {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=str, help="TOML experiment file")
        sp.add_argument("--seed", type=int, help="64-bit seed (mandatory for Monte Carlo commands)")
        sp.add_argument("--out", type=str, help="output file (default stdout)")
        sp.add_argument("--format", choices=("csv", "json"))
        sp.add_argument("--workers", type=int, help="process count; never changes the output")
        sp.add_argument("--p", type=float, help="cost exponent")
        sp.add_argument("--depth", type=int, help="finest dyadic level")
        sp.add_argument("--reps", type=int, help="Monte Carlo repetitions per grid point")
        if name == "dist":
            sp.add_argument("inputs", nargs="*", help="two point-cloud CSV files")
            sp.add_argument("--plan-out", dest="plan_out", help="write the dyadic coupling as CSV")
            sp.add_argument("--dp-only", dest="dp_only", action="store_true",
                            help="report D_p alone when the exact solver exceeds its cap")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else {}
        cfg = _merge_flags(cfg, args)
        if args.command == "dist":
            if args.inputs:
                cfg["inputs"] = list(args.inputs)
            if args.plan_out:
                cfg["plan_out"] = args.plan_out
            if args.dp_only:
                cfg["dp_only"] = True
        return COMMANDS[args.command](cfg)
    except (ConfigError, MeasureError, DyadicError, SamplerError) as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG
    except (BudgetExceeded, OracleCapExceeded) as exc:
        _log(f"budget: {exc}")
        return EXIT_BUDGET
    except MkvInstability as exc:
        _log(f"numerical abort: {exc}")
        return EXIT_NUMERIC
    except OracleError as exc:
        _log(f"oracle: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
