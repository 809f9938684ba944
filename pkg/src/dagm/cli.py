"""Command-line experiment runner.

Subcommands: ``run``, ``validate``, ``complexity`` and ``sweep``. A YAML
config file supplies the experiment; ``--set section.key=value`` flags
override it. Relative output directories are placed under
``$DAGM_OUTPUT_ROOT`` when that variable is set.

Precedence, lowest first: built-in defaults, config file, ``--set`` flags,
dedicated flags such as ``--output`` and ``--replicates``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .dagm import DivergenceError, RunConfig, ScheduleError, dagm_run, schedule_params
from .diagnostics import complexity_table, metrics_records, theory_constants, write_metrics_csv
from .graph import (
    GraphError,
    MixingError,
    max_degree_weights,
    metropolis_weights,
    random_connected_graph,
    read_edge_list,
    validate_mixing,
)
from .problem import ho_problem, random_quad_bilevel, read_dataset_csv, synthetic_regression_data, verify_constants

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

OUTPUT_ROOT_ENV = "DAGM_OUTPUT_ROOT"

DEFAULTS = {
    "problem": {
        "family": "ho",
        "loss": "linear",
        "ridge": 0.0,
        "x_max": 1.0,
        "data": {
            "path": None,
            "label": "label",
            "synthetic": {"n": 100, "d": 2, "noise": 0.25, "samples_per_agent": 20, "seed": 1},
        },
        "quad": {"n": 3, "d1": 2, "d2": 2, "reg": 1.0, "scale": 1.0, "seed": 0, "box": None},
    },
    "graph": {"r": 0.5, "seed": 0, "edge_list": None},
    "weights": "metropolis",
    "run": {
        "alpha": 1.0,
        "beta": 0.1,
        "U": 5,
        "M": 10,
        "K": 100,
        "seed": 0,
        "schedule": "fixed",
        "M_mult": 1.0,
        "U_mult": 1.0,
    },
    # one epoch of the figures is one outer iteration
    "epoch_iterations": 1,
    "replicates": 1,
    "metrics": None,
    "output": "dagm_runs",
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(cfg: dict, dotted: str, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def load_config(path, overrides=()) -> dict:
    """Defaults, then the YAML file, then ``key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, loaded)
        base_dir = Path(path).resolve().parent
        for section, key in (("graph", "edge_list"),):
            ref = cfg[section].get(key)
            if ref and not Path(ref).is_absolute():
                cfg[section][key] = str(base_dir / ref)
        ref = cfg["problem"]["data"].get("path")
        if ref and not Path(ref).is_absolute():
            cfg["problem"]["data"]["path"] = str(base_dir / ref)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        _set_path(cfg, key.strip(), yaml.safe_load(raw))
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def output_dir(cfg: dict) -> Path:
    out = Path(cfg["output"])
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


# --------------------------------------------------------------------------
# building experiment objects

def build_problem(cfg: dict, replicate: int = 0):
    pc = cfg["problem"]
    fam = pc["family"]
    if fam == "quad":
        q = pc["quad"]
        return random_quad_bilevel(int(q["n"]), int(q["d1"]), int(q["d2"]), float(q["reg"]),
                                   seed=int(q["seed"]) + replicate, scale=float(q["scale"]), box=q.get("box"))
    if fam != "ho":
        raise ConfigError(f"unknown problem family {fam!r}")
    dc = pc["data"]
    if dc.get("path"):
        if not Path(dc["path"]).exists():
            raise ConfigError(f"dataset {dc['path']} does not exist")
        data = read_dataset_csv(dc["path"], label=dc.get("label", "label"))
    else:
        sc = dc["synthetic"]
        data, _ = synthetic_regression_data(int(sc["n"]), int(sc["d"]), float(sc["noise"]),
                                            int(sc["samples_per_agent"]), int(sc["seed"]) + replicate)
    return ho_problem(pc["loss"], data, ridge=float(pc["ridge"]), x_max=float(pc["x_max"]))


def build_graph(cfg: dict, n: int, replicate: int = 0):
    gc = cfg["graph"]
    if gc.get("edge_list"):
        if not Path(gc["edge_list"]).exists():
            raise ConfigError(f"edge list {gc['edge_list']} does not exist")
        g = read_edge_list(gc["edge_list"])
        if g.n != n:
            raise ConfigError(f"edge list has {g.n} nodes but the problem has {n} agents")
        return g
    return random_connected_graph(n, float(gc["r"]), int(gc["seed"]) + replicate)


def build_weights(cfg: dict, g):
    scheme = cfg["weights"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if scheme == "metropolis":
            return metropolis_weights(g)
        if scheme == "max_degree":
            return max_degree_weights(g)
    raise ConfigError(f"unknown weight scheme {scheme!r}")


def build_run_config(cfg: dict, p, W) -> tuple:
    rc = cfg["run"]
    mode = rc["schedule"]
    notes = []
    if mode == "fixed":
        alpha, beta, U, M = float(rc["alpha"]), float(rc["beta"]), int(rc["U"]), int(rc["M"])
    else:
        s = schedule_params(p.constants, W, int(rc["K"]), mode, beta_cap=rc.get("beta"),
                            U_fallback=rc.get("U"), M_mult=float(rc["M_mult"]), U_mult=float(rc["U_mult"]))
        alpha, beta, U, M = s.alpha, s.beta, s.U, s.M
        notes = s.notes
    run = RunConfig(alpha=alpha, beta=beta, U=U, M=M, K=int(rc["K"]) * int(cfg["epoch_iterations"]),
                    seed=int(rc["seed"]), schedule=mode)
    return run, notes


def default_measures(cfg: dict, p) -> list:
    if cfg.get("metrics") is not None:
        return list(cfg["metrics"])
    if p.family == "ho":
        return ["train_cost", "test_mse"] if all(a.z_test is not None for a in p.data) else ["train_cost"]
    return ["strongly_convex"] if p.reg > 0 else ["nonconvex"]


# --------------------------------------------------------------------------
# commands

SUMMARY_COLUMNS = ("config_hash", "replicate", "K", "alpha", "beta", "U", "M", "final_consensus_err",
                   "final_hypergrad_norm", "final_metric", "metric", "vectors_inner", "vectors_outer",
                   "comm_units", "floats_sent")


def _append_summary(path: Path, row: dict):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerow(row)


def execute(cfg: dict, out: Path, log=print) -> dict:
    """Run every replicate of ``cfg`` into ``out``; returns the manifest."""
    chash = config_hash(cfg)
    manifest = {
        "config": cfg,
        "config_hash": chash,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "replicates": [],
    }
    for r in range(int(cfg["replicates"])):
        p = build_problem(cfg, r)
        g = build_graph(cfg, p.n, r)
        if not g.connected:
            raise ConfigError("graph is disconnected")
        W = build_weights(cfg, g)
        run, notes = build_run_config(cfg, p, W)
        measures = default_measures(cfg, p)
        rep_dir = out / f"rep{r:02d}"
        # created only once the replicate is fully configured
        rep_dir.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        traj = dagm_run(p, W, run)
        wall = time.perf_counter() - t0
        recs = metrics_records(p, traj, measures, W=W)
        traj.to_jsonl(rep_dir / "trajectory.jsonl")
        write_metrics_csv(recs, rep_dir / "metrics.csv")
        last = recs[-1]
        metric = measures[0] if measures else ""
        col = {"strongly_convex": "sc_gap", "convex": "cvx_gap", "nonconvex": "ncvx_grad_sq"}.get(metric, metric)
        _append_summary(out / "summary.csv", {
            "config_hash": chash,
            "replicate": r,
            "K": run.K,
            "alpha": repr(run.alpha),
            "beta": repr(run.beta),
            "U": run.U,
            "M": run.M,
            "final_consensus_err": repr(last.consensus_err),
            "final_hypergrad_norm": repr(last.hypergrad_norm),
            "final_metric": repr(getattr(last, col)) if col else "",
            "metric": col,
            "vectors_inner": last.msgs_d2,
            "vectors_outer": last.msgs_d1,
            "comm_units": last.comm_units,
            "floats_sent": last.floats_sent,
        })
        seeds = {
            "graph": None if cfg["graph"].get("edge_list") else int(cfg["graph"]["seed"]) + r,
            "data": int(cfg["problem"]["quad"]["seed"] if p.family == "quad"
                        else cfg["problem"]["data"]["synthetic"]["seed"]) + r,
            "run": run.seed,
        }
        manifest["replicates"].append({
            "replicate": r,
            "seeds": seeds,
            "alpha": run.alpha, "beta": run.beta, "U": run.U, "M": run.M, "K": run.K,
            "notes": notes,
            "wall_clock": wall,
        })
        log(f"replicate {r}: K={run.K} alpha={run.alpha:.4g} beta={run.beta:.4g} U={run.U} M={run.M} "
            f"({wall:.2f} s)")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    return manifest


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.replicates is not None:
        cfg["replicates"] = args.replicates
    if args.output is not None:
        cfg["output"] = args.output
    out = output_dir(cfg)
    execute(cfg, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.output is not None:
        cfg["output"] = args.output
    values = [yaml.safe_load(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    base = output_dir(cfg)
    name = args.param.split(".")[-1]
    for v in values:
        sub = copy.deepcopy(cfg)
        _set_path(sub, args.param, v)
        if args.param == "run.beta" and sub.get("metrics") is None:
            p = build_problem(sub)
            sub["metrics"] = default_measures(sub, p) + ["penalty_gap"]
        out = base / f"{name}={v}"
        print(f"{args.param} = {v}")
        execute(sub, out)
    print(f"wrote {base}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config, args.set)
    hard = False
    p = build_problem(cfg)
    g = build_graph(cfg, p.n)
    print(f"graph: n={g.n}, edges={len(g.edges)}, connected={g.connected}")
    if not g.connected:
        print("FAIL  graph is disconnected")
        return EXIT_INVALID
    W = build_weights(cfg, g)
    report = validate_mixing(W, g)
    print("mixing matrix checks:")
    print(report)
    hard |= not report.ok
    cons = verify_constants(p, trials=int(args.trials), seed=0)
    print("declared problem constants:")
    print(cons)
    hard |= not cons.ok
    try:
        run, _ = build_run_config(cfg, p, W)
    except ScheduleError as exc:
        print(f"FAIL  schedule: {exc}")
        return EXIT_INVALID
    table = theory_constants(p.constants, W, run.beta, run.alpha, run.U)
    print("theory constants:")
    for k, v in table.items():
        print(f"  {k} = {v}")
    if "beta>beta_bar" in table["flags"]:
        print(f"WARNING  beta = {run.beta:.6g} exceeds the inner step cap beta_bar = {table['beta_bar']:.6g} "
              "(beta_bar = min{b_g/(lambda_max(I-W) L_g), 2/(mu_g+L_g), 1/b_g, 1})")
    if "rho>=1" in table["flags"]:
        print(f"WARNING  Neumann factor rho = {table['rho']} is not below one; the Neumann error bound is void")
    return EXIT_INVALID if hard else EXIT_OK


def cmd_complexity(args) -> int:
    for name in ("n", "d1", "d2", "eps"):
        if getattr(args, name) <= 0:
            raise ConfigError(f"{name} must be positive")
    table = complexity_table(args.n, args.d1, args.d2, args.eps, args.sigma, args.K, args.U, args.M)
    width = max(len(k) for k in table)
    for k, v in table.items():
        print(f"{k:<{width}}  {v:.6g}" if isinstance(v, float) else f"{k:<{width}}  {v}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dagm", description="Decentralized bilevel optimization experiments.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", nargs="?", help="YAML experiment config; built-in defaults when omitted")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. run.beta=0.05")

    sp = sub.add_parser("run", help="run DAGM for every replicate and write metrics")
    common(sp)
    sp.add_argument("--output", help="output directory")
    sp.add_argument("--replicates", type=int)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="repeat a run over several values of one config entry")
    common(sp)
    sp.add_argument("--param", required=True, help="dotted config key, e.g. run.beta")
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--output", help="output directory")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("validate", help="check the mixing matrix, constants and step sizes")
    common(sp)
    sp.add_argument("--trials", type=int, default=100)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("complexity", help="print leading-order communication costs")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--d1", type=int, required=True)
    sp.add_argument("--d2", type=int, required=True)
    sp.add_argument("--eps", type=float, required=True)
    sp.add_argument("--sigma", type=float, required=True)
    sp.add_argument("--K", type=int)
    sp.add_argument("--U", type=int)
    sp.add_argument("--M", type=int)
    sp.set_defaults(func=cmd_complexity)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, GraphError, MixingError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ScheduleError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
