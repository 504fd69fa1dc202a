"""Command line entry point: ``rwtree <command> [--config FILE] [overrides]``.

Configuration is a YAML mapping::

    schema_version: 1
    model: {kind: calibrated, kappa: 1.5, offspring: 2}
    master_seed: 0
    workers: 1
    output_dir: out/verify
    params: {...}          # command specific, see COMMAND_PARAMS

Every run writes its artifacts plus ``manifest.json`` into the output
directory.  Exit status: 0 success, 1 internal error, 2 configuration
error, 3 failed precondition or check, 4 budget exceeded.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .env import (EnvironmentModel, IndeterminateError, InfeasibleError, ModelError,
                  calibrate_two_point, check_hypotheses, kappa as kappa_of)
from .height import height_process, normalization
from .reduce import StructureError, build_FR, build_FX, trace_positions, visited_forest
from .spine import PreconditionError, estimate_eigen, sample_spines
from .stats import identity_suite, scaling_experiment, tail_experiment_nu1, tail_experiment_Winf, write_jsonl
from .walk import (DEFAULT_VERTEX_BUDGET, TreeArena, VertexBudgetExceeded, complete_prefix,
                   edge_local_times, run_walk, write_local_times_csv, write_trace_csv)

SCHEMA_VERSION = 1
OUTPUT_ENV = "RWTREE_OUTPUT_DIR"

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_PRECONDITION, EXIT_BUDGET = 0, 1, 2, 3, 4

COMMAND_PARAMS = {
    "check-env": {},
    "simulate-walk": {"steps": 10_000, "mode": "forest", "vertex_budget": DEFAULT_VERTEX_BUDGET},
    "reduce": {"steps": 10_000, "vertex_budget": DEFAULT_VERTEX_BUDGET},
    "heights": {"steps": 10_000, "vertex_budget": DEFAULT_VERTEX_BUDGET},
    "spine-sample": {"depth": 30, "samples": 1000, "method": "killed_walks", "walk_budget": 10**7},
    "eigen": {"I_max": 50, "replicates": 100_000, "tol": 1e-10},
    "verify": {"samples": 100_000, "I_max": 50, "r": 0.5, "spine_depth": 300},
    "tails": {"samples": 1_000_000, "w_depth": 100, "w_samples": 1_000_000, "k_hill": None},
    "scaling": {"n_grid": [10_000, 40_000, 160_000], "replicates": 2000,
                "ts": [0.25, 0.5, 1.0], "M": [1.0, 2.0, 4.0]},
}
COMMANDS = tuple(COMMAND_PARAMS)
TOP_KEYS = {"schema_version", "model", "master_seed", "workers", "output_dir", "params"}


class ConfigError(ValueError):
    pass


class CheckFailed(RuntimeError):
    pass


# Configuration.

def default_config() -> dict:
    return {"schema_version": SCHEMA_VERSION,
            "model": {"kind": "calibrated", "kappa": 1.5, "offspring": 2},
            "master_seed": 0, "workers": 1, "params": {}}


def load_config(path: str | None) -> dict:
    if path is None:
        return default_config()
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    return raw


def _int(value, name, lo=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer")
    if lo is not None and value < lo:
        raise ConfigError(f"{name} must be >= {lo}")
    return value


def _real(value, name):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number")
    return float(value)


def validate_config(raw: dict, command: str) -> dict:
    """Checked copy of the config with command defaults filled in."""
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    cfg = default_config()
    cfg.update({k: v for k, v in raw.items() if k != "params"})
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    seed = _int(cfg["master_seed"], "master_seed", 0)
    if seed >= 2**64:
        raise ConfigError("master_seed must fit in 64 bits")
    _int(cfg["workers"], "workers", 1)
    if not isinstance(cfg["model"], dict):
        raise ConfigError("model must be a mapping")
    build_model(cfg["model"])
    params = dict(COMMAND_PARAMS[command])
    given = raw.get("params") or {}
    if not isinstance(given, dict):
        raise ConfigError("params must be a mapping")
    bad = set(given) - set(params)
    if bad:
        raise ConfigError(f"unknown params for {command}: {sorted(bad)}")
    params.update(given)
    for key, val in params.items():
        default = COMMAND_PARAMS[command][key]
        if isinstance(default, bool):
            continue
        if isinstance(default, int):
            _int(val, key, 1)
        elif isinstance(default, float):
            if _real(val, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        elif isinstance(default, list):
            if not isinstance(val, list) or not val:
                raise ConfigError(f"{key} must be a nonempty list")
            for x in val:
                _real(x, key)
        elif key == "k_hill" and val is not None:
            _int(val, key, 1)
    if "mode" in params and params["mode"] not in ("forest", "tree_reflected"):
        raise ConfigError("mode must be 'forest' or 'tree_reflected'")
    if "method" in params and params["method"] not in ("killed_walks", "recursion"):
        raise ConfigError("method must be 'killed_walks' or 'recursion'")
    if command == "scaling" and any(b <= a for a, b in zip(params["n_grid"], params["n_grid"][1:])):
        raise ConfigError("n_grid must be increasing")
    cfg["params"] = params
    return cfg


def build_model(fields: dict) -> EnvironmentModel:
    fields = dict(fields)
    kind = fields.pop("kind", None)
    try:
        if kind == "calibrated":
            return calibrate_two_point(_real(fields.pop("kappa"), "kappa"),
                                       _int(fields.pop("offspring", 2), "offspring", 2),
                                       fields.pop("prob_low", None))
        if kind == "lambda_biased":
            return EnvironmentModel.lambda_biased(_int(fields.pop("m"), "m", 1),
                                                  _real(fields.pop("lambda"), "lambda"))
        if kind == "two_point":
            return EnvironmentModel.two_point(_int(fields.pop("offspring"), "offspring", 1),
                                              _real(fields.pop("mark_low"), "mark_low"),
                                              _real(fields.pop("mark_high"), "mark_high"),
                                              _real(fields.pop("prob_low"), "prob_low"))
        if kind == "tabulated":
            atoms = fields.pop("atoms")
            return EnvironmentModel.tabulated([(float(p), list(map(float, v))) for p, v in atoms])
    except KeyError as exc:
        raise ConfigError(f"model field missing: {exc}") from exc
    except (ModelError, InfeasibleError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid model: {exc}") from exc
    finally:
        if kind in ("calibrated", "lambda_biased", "two_point", "tabulated") and fields:
            raise ConfigError(f"unknown model fields: {sorted(fields)}")
    raise ConfigError("model kind must be calibrated, lambda_biased, two_point or tabulated")


def config_hash(cfg: dict) -> str:
    """Hash of the fields that change results (worker count and paths excluded)."""
    key = {k: cfg[k] for k in ("schema_version", "master_seed", "params")}
    key["model"] = build_model(cfg["model"]).to_dict()
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()


# Commands.  Each writes into ``out`` and returns the list of files written.

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def _json_safe(d):
    if isinstance(d, dict):
        return {k: _json_safe(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_json_safe(v) for v in d]
    if isinstance(d, (float, np.floating)):
        x = float(d)
        return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    if isinstance(d, np.integer):
        return int(d)
    if isinstance(d, np.bool_):
        return bool(d)
    return d


def cmd_check_env(model, cfg, out):
    report = check_hypotheses(model)
    (out / "hypotheses.json").write_text(json.dumps(_json_safe(report.to_dict()), indent=1) + "\n")
    return ["hypotheses.json"]


def _arena(model, cfg):
    p = cfg["params"]
    return TreeArena(model, seed=cfg["master_seed"], vertex_budget=p["vertex_budget"])


def cmd_simulate_walk(model, cfg, out):
    p = cfg["params"]
    arena = _arena(model, cfg)
    trace = run_walk(arena, p["steps"], p["mode"], seed=cfg["master_seed"] + 1)
    write_trace_csv(out / "trace.csv", trace, arena)
    write_local_times_csv(out / "local_times.csv", edge_local_times(trace, arena), arena)
    return ["trace.csv", "local_times.csv"]


def _reduced(model, cfg):
    arena = _arena(model, cfg)
    trace = run_walk(arena, cfg["params"]["steps"], "forest", seed=cfg["master_seed"] + 1)
    prefix = complete_prefix(trace, arena)
    if len(prefix) == 0:
        raise PreconditionError("the walk did not finish its first tree; increase steps")
    forest = visited_forest(prefix, arena, complete=True)
    return prefix, forest


def cmd_reduce(model, cfg, out):
    prefix, forest = _reduced(model, cfg)
    build_FR(forest).write_csv(out / "forest_R.csv")
    build_FX(forest, trace_positions(prefix, forest)).write_csv(out / "forest_X.csv")
    return ["forest_R.csv", "forest_X.csv"]


def cmd_heights(model, cfg, out):
    prefix, forest = _reduced(model, cfg)
    fr = build_FR(forest)
    positions = trace_positions(prefix, forest)
    fx = build_FX(forest, positions)
    H_F = height_process(forest).values
    H_R = height_process(fr, "all").values
    H_X = height_process(fx, "all").values
    kap = kappa_of(model)
    n = len(forest)
    with open(out / "heights.csv", "w") as fh:
        if 1 < kap <= 2 and n >= 2:
            fh.write(f"# n={n},kappa={_fmt(kap)},c_n={_fmt(normalization(n, kap))}\n")
        fh.write("index,H_F,H_R\n")
        for i in range(n):
            fh.write(f"{i},{int(H_F[i])},{int(H_R[i])}\n")
    with open(out / "walk_heights.csv", "w") as fh:
        fh.write("step,X_height,H_X\n")
        for t in range(len(positions)):
            fh.write(f"{t},{int(forest.depth[positions[t]])},{int(H_X[t])}\n")
    return ["heights.csv", "walk_heights.csv"]


def cmd_spine_sample(model, cfg, out):
    p = cfg["params"]
    batch = sample_spines(model, p["depth"], p["samples"], cfg["master_seed"], p["method"],
                          walk_budget=p["walk_budget"], workers=cfg["workers"])
    if batch.discarded == p["samples"]:
        raise VertexBudgetExceeded("every spine sample exceeded the walk budget")
    with open(out / "spines.csv", "w") as fh:
        fh.write("sample,k,phi,V,n_brothers\n")
        for s in range(len(batch)):
            if batch.tau[s] == -2:
                continue
            for k in range(p["depth"] + 1):
                nb = int(batch.nbro[s, k]) if k < p["depth"] else 0
                fh.write(f"{s},{k},{int(batch.phi[s, k])},{_fmt(batch.V[s, k])},{nb}\n")
    with open(out / "spine_summary.csv", "w") as fh:
        fh.write("sample,tau,L1,steps\n")
        for s in range(len(batch)):
            fh.write(f"{s},{int(batch.tau[s])},{int(batch.L1[s])},{int(batch.steps[s])}\n")
    return ["spines.csv", "spine_summary.csv"]


def cmd_eigen(model, cfg, out):
    p = cfg["params"]
    eig = estimate_eigen(model, p["I_max"], p["replicates"], cfg["master_seed"], p["tol"],
                         workers=cfg["workers"])
    eig.write_csv(out / "eigen.csv")
    summary = {"mu": eig.mu, "stop_level": eig.stop_level, "mean_steps": eig.mean_steps,
               "truncation_bound": eig.truncation_bound, "replicates": eig.replicates}
    (out / "eigen_summary.json").write_text(json.dumps(_json_safe(summary), indent=1) + "\n")
    return ["eigen.csv", "eigen_summary.json"]


def _checks_out(checks, out, name):
    write_jsonl(out / name, checks)
    failed = [c.check for c in checks if not c.passed and not c.detail.get("report_only")]
    return failed


def cmd_verify(model, cfg, out):
    p = cfg["params"]
    checks = identity_suite(model, p["samples"], cfg["master_seed"], p["I_max"], p["r"],
                            workers=cfg["workers"], spine_depth=p["spine_depth"])
    failed = _checks_out(checks, out, "checks.jsonl")
    if failed:
        raise CheckFailed(f"failed checks: {failed}", ["checks.jsonl"])
    return ["checks.jsonl"]


def cmd_tails(model, cfg, out):
    p = cfg["params"]
    nu = tail_experiment_nu1(model, p["samples"], cfg["master_seed"], p["k_hill"], cfg["workers"])
    w = tail_experiment_Winf(model, p["w_depth"], p["w_samples"], cfg["master_seed"] + 1, p["k_hill"])
    kap = kappa_of(model)
    rows = [("L1", nu, kap), ("W_plain", w["plain"], kap), ("W_size_biased", w["size_biased"], kap - 1)]
    with open(out / "tails.csv", "w") as fh:
        fh.write("quantity,index,ci_low,ci_high,k_used,sample_size,target\n")
        for name, est, target in rows:
            fh.write(f"{name},{_fmt(est.index)},{_fmt(est.ci_low)},{_fmt(est.ci_high)},"
                     f"{est.k_used},{est.sample_size},{_fmt(target)}\n")
    write_jsonl(out / "checks.jsonl", [w["relation"]])
    return ["tails.csv", "checks.jsonl"]


def cmd_scaling(model, cfg, out):
    p = cfg["params"]
    rep = scaling_experiment(model, p["n_grid"], p["replicates"], cfg["master_seed"],
                             tuple(p["ts"]), tuple(p["M"]), workers=cfg["workers"])
    rep.write_csv(out / "scaling.csv")
    failed = _checks_out(rep.checks, out, "checks.jsonl")
    if failed:
        raise CheckFailed(f"failed checks: {failed}", ["scaling.csv", "checks.jsonl"])
    return ["scaling.csv", "checks.jsonl"]


HANDLERS = {"check-env": cmd_check_env, "simulate-walk": cmd_simulate_walk, "reduce": cmd_reduce,
            "heights": cmd_heights, "spine-sample": cmd_spine_sample, "eigen": cmd_eigen,
            "verify": cmd_verify, "tails": cmd_tails, "scaling": cmd_scaling}

NEEDS_KAPPA = {"reduce", "heights", "spine-sample", "eigen", "verify", "tails", "scaling"}


def _versions() -> dict:
    import numba
    import scipy
    return {"rwtree": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def _write_manifest(out, command, cfg, files, status, started):
    manifest = {"command": command, "config_hash": config_hash(cfg),
                "master_seed": cfg["master_seed"], "workers": cfg["workers"],
                "config": cfg, "versions": _versions(), "files": files, "exit_status": status,
                "wall_time_seconds": time.time() - started}
    (out / "manifest.json").write_text(json.dumps(_json_safe(manifest), indent=1) + "\n")


def run(command: str, raw_config: dict, overrides: dict | None = None) -> int:
    """Validate, run and record one command; returns the exit status."""
    started = time.time()
    try:
        raw = dict(raw_config)
        for k, v in (overrides or {}).items():
            if v is not None:
                raw[k] = v
        cfg = validate_config(raw, command)
        model = build_model(cfg["model"])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.get("output_dir") or os.environ.get(OUTPUT_ENV) or f"rwtree-out/{command}")
    cfg["output_dir"] = str(out)
    out.mkdir(parents=True, exist_ok=True)
    files, status = [], EXIT_OK
    try:
        if command in NEEDS_KAPPA:
            report = check_hypotheses(model)
            if not report.passes_Hc or not (1 < report.kappa <= 2):
                raise PreconditionError("the model must satisfy the hypotheses with kappa in (1, 2]")
        files = HANDLERS[command](model, cfg, out)
    except CheckFailed as exc:
        print(str(exc.args[0]), file=sys.stderr)
        files, status = list(exc.args[1]), EXIT_PRECONDITION
    except (PreconditionError, StructureError, InfeasibleError, IndeterminateError, ModelError) as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        status = EXIT_PRECONDITION
    except VertexBudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        status = EXIT_BUDGET
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        status = EXIT_INTERNAL
    _write_manifest(out, command, cfg, files, status, started)
    return status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rwtree", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--seed", type=int, dest="master_seed", help="override master_seed")
    parser.add_argument("--workers", type=int, help="override worker count")
    parser.add_argument("--out", dest="output_dir", help="override output directory")
    args = parser.parse_args(argv)
    try:
        raw = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.command, raw, {"master_seed": args.master_seed, "workers": args.workers,
                                   "output_dir": args.output_dir})


if __name__ == "__main__":
    sys.exit(main())
