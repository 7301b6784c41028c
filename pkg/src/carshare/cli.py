"""Command-line experiment runner.

Each subcommand reads an optional JSON config, lets flags override it, fills
defaults, and writes its results into ``<out>/<kind>-<hash>/`` where the hash
is taken over the resolved config. Exit codes: 0 success, 2 invalid config,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import importlib.metadata
import itertools
import json
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import birthdeath as bd
from .core import DEFAULT_TOL, INFINITE, Model, ModelParams, Tolerances, TruncationGrid, dist_distance, model1_grid
from .equilibrium import delta_bar, pi_model1, solve
from .meanfield import initial_dist, integrate
from .particles import SimConfig, mean_measure, run, write_csv
from .volterra import default_step, estimate_rate, solve_delta_system, theoretical_rate

SCHEMA_VERSION = 1

KINDS = ("simulate", "meanfield", "equilibrium", "delta", "ratefit", "xval", "dominance")
_KIND_ALIASES = {
    "simulate": "simulate",
    "meanfield": "meanfield",
    "equilibrium": "equilibrium",
    "delta": "delta",
    "deltasystem": "delta",
    "ratefit": "ratefit",
    "xval": "xval",
    "crossvalidate": "xval",
    "dominance": "dominance",
    "dominancesuite": "dominance",
}

# key -> (type, default); None as default means "derived at run time"
_COMMON = {
    "kind": (str, None),
    "model": (str, "model1"),
    "lambda": (float, None),
    "mu": (float, None),
    "U": (float, None),
    "K": (int, None),
    "seed": (int, 0),
}
_PER_KIND = {
    "equilibrium": {},
    "meanfield": {
        "horizon": (float, 80.0),
        "n_points": (int, 201),
        "init": (str, "AllReserved"),
        "rtol": (float, DEFAULT_TOL.ode_rel_tol),
        "atol": (float, DEFAULT_TOL.ode_abs_tol),
    },
    "simulate": {
        "n_stations": (int, 1000),
        "replications": (int, 20),
        "horizon": (float, 10.0),
        "sample_times": (list, None),
        "init": (str, "AllCars"),
    },
    "delta": {
        "horizon": (float, None),
        "h": (float, None),
        "richardson": (bool, True),
        "init_cars": (list, None),
    },
    "ratefit": {
        "horizon": (float, None),
        "n_points": (int, 2001),
        "init": (str, "AllReserved"),
        "prefactor": (str, "free"),
    },
    "xval": {
        "n_stations": (int, 1000),
        "replications": (int, 20),
        "horizon": (float, 20.0),
        "init": (str, "Uniform"),
        "h": (float, None),
    },
    "dominance": {
        "n_pairs": (int, 50),
        "serv": (float, 1.0),
        "horizon": (float, 20.0),
        "n_points": (int, 201),
    },
}
SWEEP_KEYS = ("lambda", "mu", "U", "K", "seed")
_REQUIRED = ("lambda", "mu", "U")


class ConfigError(ValueError):
    pass


def _coerce(key: str, typ, value):
    if value is None:
        return None
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if typ is list:
        if not isinstance(value, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in value):
            raise ConfigError(f"{key}: expected a list of numbers, got {value!r}")
        return [float(x) for x in value]
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def _kind(raw: dict, kind: str | None) -> str:
    given = raw.get("kind")
    if given is not None:
        if not isinstance(given, str) or given.lower() not in _KIND_ALIASES:
            raise ConfigError(f"kind: unknown experiment kind {given!r}")
        given = _KIND_ALIASES[given.lower()]
        if kind is not None and given != kind:
            raise ConfigError(f"kind: config says {given!r} but the subcommand is {kind!r}")
    kind = kind or given
    if kind is None:
        raise ConfigError("kind: missing experiment kind")
    return kind


def expand_sweep(raw: dict) -> list[dict]:
    """One dict per point of the Cartesian product of list-valued sweep keys.

    The order is fixed: keys in ``SWEEP_KEYS`` order, values in given order.
    """
    axes = [(k, raw[k]) for k in SWEEP_KEYS if isinstance(raw.get(k), list)]
    if not axes:
        return [dict(raw)]
    for k, values in axes:
        if not values:
            raise ConfigError(f"{k}: empty sweep list")
    out = []
    for combo in itertools.product(*(v for _, v in axes)):
        cfg = dict(raw)
        cfg.update({k: v for (k, _), v in zip(axes, combo)})
        out.append(cfg)
    return out


def parse_config(raw: dict, kind: str | None = None) -> dict:
    """Validate one (non-sweep) config and fill defaults.

    Returns the resolved config; ``_defaults`` lists the keys that were filled.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    kind = _kind(raw, kind)
    schema = {**_COMMON, **_PER_KIND[kind]}
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key for kind {kind!r}")
    cfg, defaults = {}, []
    for key, (typ, default) in schema.items():
        if key in raw and raw[key] is not None:
            cfg[key] = _coerce(key, typ, raw[key])
        else:
            cfg[key] = default
            if key != "kind":
                defaults.append(key)
    cfg["kind"] = kind
    for key in _REQUIRED:
        if cfg[key] is None:
            raise ConfigError(f"{key}: required")
    try:
        model = Model.parse(cfg["model"])
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    cfg["model"] = model.value
    if model is not Model.RESERVATION_INFINITE and cfg["K"] is None:
        raise ConfigError(f"K: capacity is required for {model.value}")
    if model is Model.RESERVATION_INFINITE and cfg["K"] is not None:
        raise ConfigError("K: model1 has unlimited capacity")
    try:
        params_of(cfg)
    except ValueError as exc:
        raise ConfigError(f"parameters: {exc}") from None
    if kind in ("delta", "ratefit", "xval") and model is not Model.RESERVATION_INFINITE:
        raise ConfigError(f"model: {kind} is only defined for model1")
    cfg["_defaults"] = defaults
    return cfg


def params_of(cfg: dict) -> ModelParams:
    K = cfg["K"] if cfg["K"] is not None else INFINITE
    return ModelParams(cfg["lambda"], cfg["mu"], cfg["U"], K, cfg["model"])


def config_hash(cfg: dict) -> str:
    payload = {k: v for k, v in cfg.items() if not k.startswith("_")}
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _integer_load(U: float, what: str) -> int:
    if U != int(U):
        raise ValueError(f"{what} needs an integer fleet density, got {U}")
    return int(U)


# ---------------------------------------------------------------- pipelines


def _run_equilibrium(cfg, params, out: Path, threads: int):
    sol = solve(params)
    _dump_json(sol.as_dict(), out / "equilibrium.json")


def _run_meanfield(cfg, params, out: Path, threads: int):
    init = initial_dist(cfg["init"], params)
    t = np.linspace(0.0, cfg["horizon"], cfg["n_points"])
    tol = Tolerances(ode_rel_tol=cfg["rtol"], ode_abs_tol=cfg["atol"])
    traj = integrate(init, t, params, tol=tol)
    traj.to_csv(out / "trajectory.csv")
    traj.dump_functionals(out / "functionals.json")


def _run_simulate(cfg, params, out: Path, threads: int):
    times = cfg["sample_times"] or [cfg["horizon"]]
    sim = SimConfig.for_density(cfg["n_stations"], params.fleet_density, cfg["horizon"], times, seed=cfg["seed"], replications=cfg["replications"])
    res = run(sim, params, cfg["init"], workers=threads)
    for i, measures in enumerate(res):
        write_csv(measures, out / f"replication_{i:03d}.csv")
    summary = {
        "t": list(sim.sample_times),
        "fleet_size": sim.fleet_size,
        "mean_b": [float(np.mean([r[k].b for r in res])) for k in range(len(times))],
        "mean_cars": [float(np.mean([r[k].mean_cars for r in res])) for k in range(len(times))],
    }
    _dump_json(summary, out / "summary.json")


def _delta_inputs(cfg, params):
    if cfg["init_cars"] is not None:
        init = np.asarray(cfg["init_cars"])
    else:
        init = np.eye(1, _integer_load(params.fleet_density, "the default car law") + 1, k=int(params.fleet_density))[0]
    horizon = cfg["horizon"] or 50.0 / theoretical_rate(params)
    return init, horizon


def _run_delta(cfg, params, out: Path, threads: int):
    init, horizon = _delta_inputs(cfg, params)
    rate, vol = solve_delta_system(params, init, horizon, cfg["h"], richardson=cfg["richardson"])
    with open(out / "delta.csv", "w") as fh:
        fh.write("t,delta,H\n")
        for t, d, H in zip(rate.times, rate.values, vol.H):
            fh.write(f"{t!r},{d!r},{H!r}\n")
    summary = {
        "horizon": float(rate.horizon),
        "h": rate.h,
        "delta_end": float(rate.values[-1]),
        "delta_bar": delta_bar(params),
        "gap_end": float(abs(rate.values[-1] - delta_bar(params))),
        "defect": vol.defect,
    }
    _dump_json(summary, out / "summary.json")


def _run_ratefit(cfg, params, out: Path, threads: int):
    v = theoretical_rate(params)
    horizon = cfg["horizon"] or min(60.0 / v, 600.0)
    t = np.linspace(0.0, horizon, cfg["n_points"])
    init = initial_dist(cfg["init"], params)
    traj = integrate(init, t, params, tol=Tolerances(ode_rel_tol=1e-12, ode_abs_tol=1e-16))
    beta = solve(params).beta
    est = estimate_rate(t, traj.series("b"), beta, params=params, prefactor=cfg["prefactor"])
    report = {
        "v_hat": est.v_hat,
        "v_theory": est.v_theory,
        "relative_error": est.relative_error,
        "r2": est.r2,
        "window": list(est.window),
        "exponent": est.exponent,
        "v_hat_plain": est.v_hat_plain,
        "horizon": horizon,
    }
    _dump_json(report, out / "ratefit.json")
    traj.dump_functionals(out / "functionals.json")


def _run_xval(cfg, params, out: Path, threads: int):
    T = cfg["horizon"]
    sim = SimConfig.for_density(cfg["n_stations"], params.fleet_density, T, (T,), seed=cfg["seed"], replications=cfg["replications"])
    res = run(sim, params, cfg["init"], workers=threads)
    sim_mean = mean_measure([r[-1] for r in res])
    init = initial_dist(cfg["init"], params)
    traj = integrate(init, np.linspace(0.0, T, 201), params)
    ode_end = traj.final
    grid = model1_grid(params)
    common = TruncationGrid(max(grid.j_max, ode_end.grid.j_max, sim_mean.grid.j_max), max(grid.k_max, ode_end.grid.k_max, sim_mean.grid.k_max))
    cars0 = np.eye(1, _integer_load(params.fleet_density, "xval") + 1, k=int(params.fleet_density))[0]
    rate, _ = solve_delta_system(params, cars0, T, cfg["h"])
    report = {
        "l1_sim_vs_ode": dist_distance(sim_mean.regrid(common), ode_end.regrid(common)),
        "l1_ode_vs_pi": dist_distance(ode_end.regrid(common), pi_model1(params, common)),
        "delta_gap": float(abs(rate.values[-1] - delta_bar(params))),
        "horizon": T,
        "n_stations": cfg["n_stations"],
        "replications": cfg["replications"],
    }
    _dump_json(report, out / "report.json")


def random_profile_pair(rng: np.random.Generator, serv: float):
    """Ordered pair ``beta <= gamma`` of smooth random arrival profiles."""
    a = rng.uniform(0.05, 0.8) * serv
    amp = rng.uniform(0.0, 0.5) * a
    w = rng.uniform(0.1, 2.0)
    lift = rng.uniform(0.0, 0.3) * serv
    beta = bd.ArrivalProfile(lambda t: a + amp * math.sin(w * t))
    gamma = bd.ArrivalProfile(lambda t: a + amp * math.sin(w * t) + lift * (1.0 - math.exp(-t)))
    return beta, gamma


def dominance_suite(n_pairs: int, serv: float, horizon: float, n_points: int, seed: int) -> dict:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xD0])))
    t = np.linspace(0.0, horizon, n_points)
    worst, worst_empty, worst_neg, ratios = -math.inf, -math.inf, 0.0, []
    for _ in range(n_pairs):
        beta, gamma = random_profile_pair(rng, serv)
        n0 = int(rng.integers(0, 4))
        rep = bd.dominance_check(beta, gamma, bd.BDState.point(0, n0 + 1), bd.BDState.point(n0), serv, t)
        worst = max(worst, rep.worst_gap)
        worst_empty = max(worst_empty, rep.worst_empty_gap)
        states = bd.evolve(bd.BDState.point(n0), gamma, serv, t)
        worst_neg = min(worst_neg, min(float(s.p.min()) for s in states))
        ratios.append(bd.lipschitz_probe(beta, gamma, bd.BDState.point(n0), serv, t).ratio)
    return {
        "n_pairs": n_pairs,
        "worst_dominance_gap": worst,
        "worst_empty_gap": worst_empty,
        "most_negative_entry": worst_neg,
        "max_lipschitz_ratio": max(ratios) if ratios else None,
    }


def _run_dominance(cfg, params, out: Path, threads: int):
    report = dominance_suite(cfg["n_pairs"], cfg["serv"], cfg["horizon"], cfg["n_points"], cfg["seed"])
    _dump_json(report, out / "dominance.json")


_PIPELINES = {
    "equilibrium": _run_equilibrium,
    "meanfield": _run_meanfield,
    "simulate": _run_simulate,
    "delta": _run_delta,
    "ratefit": _run_ratefit,
    "xval": _run_xval,
    "dominance": _run_dominance,
}


def _version() -> str:
    try:
        return importlib.metadata.version("artifact")
    except importlib.metadata.PackageNotFoundError:
        return "unknown"


def run_experiment(cfg: dict, out_root, threads: int = 1) -> Path:
    """Execute one resolved config; returns the run directory."""
    digest = config_hash(cfg)
    out = Path(out_root) / f"{cfg['kind']}-{digest[:12]}"
    out.mkdir(parents=True, exist_ok=True)
    params = params_of(cfg)
    start = time.perf_counter()
    _PIPELINES[cfg["kind"]](cfg, params, out, threads)
    wall = time.perf_counter() - start
    outputs = {}
    for f in sorted(out.iterdir()):
        if f.name != "manifest.json":
            outputs[f.name] = hashlib.sha256(f.read_bytes()).hexdigest()
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": cfg["kind"],
        "config": {k: v for k, v in cfg.items() if not k.startswith("_")},
        "defaults_used": cfg.get("_defaults", []),
        "config_hash": digest,
        "seed": cfg["seed"],
        "tolerances": {
            "mass_tol": DEFAULT_TOL.mass_tol,
            "fixed_point_tol": DEFAULT_TOL.fixed_point_tol,
            "ode_rel_tol": DEFAULT_TOL.ode_rel_tol,
            "ode_abs_tol": DEFAULT_TOL.ode_abs_tol,
            "prob_tol": DEFAULT_TOL.prob_tol,
        },
        "versions": {
            "package": _version(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "outputs": outputs,
        "payload_hash": hashlib.sha256(json.dumps(outputs, sort_keys=True).encode()).hexdigest(),
        "wall_time_s": wall,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "threads": threads,
    }
    _dump_json(manifest, out / "manifest.json")
    return out


# ---------------------------------------------------------------- argparse


_FLAG_KEYS = {
    "lam": "lambda",
    "mu": "mu",
    "U": "U",
    "K": "K",
    "model": "model",
    "horizon": "horizon",
    "n_points": "n_points",
    "n_stations": "n_stations",
    "replications": "replications",
    "init": "init",
    "h": "h",
    "n_pairs": "n_pairs",
    "serv": "serv",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carshare", description="Car-sharing mean-field experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, default=Path("runs"))
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--model", choices=["model1", "model2", "model3"])
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--mu", type=float)
        p.add_argument("--U", type=float)
        p.add_argument("--K", type=int)
        extra = _PER_KIND[kind]
        if "horizon" in extra:
            p.add_argument("--horizon", type=float)
        if "n_points" in extra:
            p.add_argument("--n-points", dest="n_points", type=int)
        if "n_stations" in extra:
            p.add_argument("--n-stations", dest="n_stations", type=int)
            p.add_argument("--replications", type=int)
        if "init" in extra:
            p.add_argument("--init")
        if "h" in extra:
            p.add_argument("--h", type=float)
        if "n_pairs" in extra:
            p.add_argument("--n-pairs", dest="n_pairs", type=int)
            p.add_argument("--serv", type=float)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    kind = args.command
    try:
        raw = {}
        if args.config is not None:
            try:
                raw = json.loads(args.config.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"config: cannot read {args.config}: {exc}") from None
            if not isinstance(raw, dict):
                raise ConfigError("config must be a JSON object")
        for attr, key in _FLAG_KEYS.items():
            value = getattr(args, attr, None)
            if value is not None:
                raw[key] = value
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.threads < 1:
            raise ConfigError("threads: must be at least 1")
        configs = [parse_config(c, kind) for c in expand_sweep(raw)]
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        for cfg in configs:
            print(run_experiment(cfg, args.out, args.threads))
    except Exception as exc:  # numerical failures of any module
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
