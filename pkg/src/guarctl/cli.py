"""Scenario-driven command line: ``guarctl value|simulate|estimate|sweep``."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .disturbance import (
    Family,
    OpenLoop,
    Switching,
    constant_family,
    corner_family,
    sign_adversary_example,
)
from .dynamics import StateEscapeError, get_system, registered_systems
from .integrate import Signal
from .sets import CompactSet, contains
from .sim import estimate_guarantee, run_closed_loop, sweep, sweep_to_csv
from .strategy import default_v_samples, make_strategy
from .timegrid import uniform_partition
from .value import (
    EmptyLevelSetError,
    TerminalCost,
    load_value_grid,
    query,
    save_value_grid,
    solve_lower_value,
    solve_upper_value,
)

log = logging.getLogger("guarctl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "system": {"name": None, "params": {}},
    "z0": None,
    "cost": None,
    "grid": {
        "space_counts": 201,
        "space_lower": None,
        "space_upper": None,
        "time_steps": 100,
        "u_per_axis": 9,
        "v_per_axis": 9,
    },
    "strategy": {"eps": 0.05, "diam": 0.01, "level": None, "level_margin": None, "v_per_axis": 9},
    "disturbance": {"type": "constant", "value": None, "max_switches": 5, "path": None, "name": None, "switch_at": None},
    "runs": 200,
    "seed": 0,
    "upper": True,
    "value_grid": None,
    "sweep": {"eps": [0.2, 0.1, 0.05], "diam": [0.04, 0.02, 0.01], "pairing": "product"},
}

_DIST_TYPES = ("constant", "family", "corners", "switching", "csv", "feedback")


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {where}{key!r}")
        if isinstance(defaults[key], dict) and key != "params":
            if not isinstance(val, dict):
                raise ConfigError(f"key {where}{key!r} must be an object")
            out[key] = _merge(defaults[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def parse_scenario(path) -> dict:
    """Load a JSON scenario, reject unknown keys, fill defaults and validate."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("scenario must be a JSON object")
    if isinstance(raw.get("system"), str):
        raw["system"] = {"name": raw["system"]}
    cfg = _merge(DEFAULTS, raw, "")
    return validate(cfg)


def validate(cfg: dict) -> dict:
    name = cfg["system"]["name"]
    if name is None:
        raise ConfigError("key 'system.name' is required")
    try:
        sysm = get_system(name, **cfg["system"]["params"])
    except KeyError:
        raise ConfigError(f"key 'system.name': unknown system {name!r} (known: {registered_systems()})") from None
    except TypeError as exc:
        raise ConfigError(f"key 'system.params': {exc}") from None
    n = sysm.state_dim
    if cfg["z0"] is None:
        cfg["z0"] = sysm.G0.nodes()[0].tolist() if sysm.G0.kind != "box" else [0.0] * n
    if len(cfg["z0"]) != n:
        raise ConfigError(f"key 'z0' must have {n} components")
    if not contains(sysm.G0, cfg["z0"]):
        raise ConfigError(f"key 'z0' = {cfg['z0']} is not an admissible initial state of {name!r}")
    if cfg["cost"] is None:
        cfg["cost"] = {"linear": [0.0] * (n - 1) + [1.0], "quadratic": [], "constant": 0.0}
    extra = set(cfg["cost"]) - {"linear", "quadratic", "constant"}
    if extra:
        raise ConfigError(f"unknown key 'cost.{sorted(extra)[0]}'")
    for k in ("linear", "quadratic"):
        if cfg["cost"].get(k) and len(cfg["cost"][k]) != n:
            raise ConfigError(f"key 'cost.{k}' must have {n} components")
    g = cfg["grid"]
    if g["space_lower"] is None:
        g["space_lower"] = sysm.value_box.lower.tolist()
    if g["space_upper"] is None:
        g["space_upper"] = sysm.value_box.upper.tolist()
    for key in ("space_counts", "time_steps", "u_per_axis", "v_per_axis"):
        if int(g[key]) < (2 if key == "space_counts" else 1):
            raise ConfigError(f"key 'grid.{key}' out of range")
    eps = cfg["strategy"]["eps"]
    if not 0.0 < float(eps) < 1.0:
        raise ConfigError(f"key 'strategy.eps' = {eps} must lie in the open interval (0,1)")
    if not 0.0 < float(cfg["strategy"]["diam"]) <= sysm.theta - sysm.t0:
        raise ConfigError("key 'strategy.diam' must lie in (0, theta - t0]")
    d = cfg["disturbance"]
    if d["type"] not in _DIST_TYPES:
        raise ConfigError(f"key 'disturbance.type' must be one of {_DIST_TYPES}")
    for e in cfg["sweep"]["eps"]:
        if not 0.0 < float(e) < 1.0:
            raise ConfigError(f"key 'sweep.eps' entry {e} must lie in the open interval (0,1)")
    if cfg["sweep"]["pairing"] not in ("product", "zip"):
        raise ConfigError("key 'sweep.pairing' must be 'product' or 'zip'")
    if int(cfg["runs"]) < 1:
        raise ConfigError("key 'runs' must be >= 1")
    return cfg


def config_fingerprint(cfg: dict) -> str:
    return io.fingerprint(cfg)


# -- builders -----------------------------------------------------------------


def build(cfg: dict):
    sysm = get_system(cfg["system"]["name"], **cfg["system"]["params"])
    cost = TerminalCost.from_dict(cfg["cost"])
    return sysm, cost


def _space(cfg, sysm):
    g = cfg["grid"]
    return CompactSet.grid(g["space_lower"], g["space_upper"], (int(g["space_counts"]),) * sysm.state_dim)


def _actions(cfg, sysm):
    g = cfg["grid"]
    return sysm.P.sample_grid(int(g["u_per_axis"])), default_v_samples(sysm.Q, int(g["v_per_axis"]))


def lower_grid(cfg, sysm, cost):
    if cfg["value_grid"]:
        return load_value_grid(cfg["value_grid"])
    us, vs = _actions(cfg, sysm)
    tk = uniform_partition(sysm.t0, sysm.theta, int(cfg["grid"]["time_steps"]))
    return solve_lower_value(sysm, cost, _space(cfg, sysm), tk, us, vs)


def disturbance_model(cfg, sysm):
    d = cfg["disturbance"]
    t0, th = sysm.horizon
    typ = d["type"]
    if typ == "constant":
        val = d["value"] if d["value"] is not None else default_v_samples(sysm.Q, 2)[-1].tolist()
        return OpenLoop(Signal.constant(val, t0, th, "disturbance"))
    if typ == "csv":
        if not d["path"]:
            raise ConfigError("key 'disturbance.path' is required for csv disturbances")
        return OpenLoop(Signal.from_csv(d["path"]))
    if typ == "corners":
        return corner_family(default_v_samples(sysm.Q, 2), t0, th, d["switch_at"])
    if typ == "family":
        return constant_family(default_v_samples(sysm.Q, int(cfg["grid"]["v_per_axis"])), t0, th)
    if typ == "switching":
        return Switching(default_v_samples(sysm.Q, int(cfg["grid"]["v_per_axis"])), int(d["max_switches"]))
    if typ == "feedback":
        if d["name"] not in (None, "sign_example"):
            raise ConfigError(f"key 'disturbance.name': unknown feedback adversary {d['name']!r}")
        return sign_adversary_example()
    raise ConfigError(f"unknown disturbance type {typ!r}")


def _strategy(cfg, sysm, vg, eps=None, dm=None):
    s = cfg["strategy"]
    eps = s["eps"] if eps is None else eps
    dm = s["diam"] if dm is None else dm
    n = max(1, round((sysm.theta - sysm.t0) / dm))
    part = uniform_partition(sysm.t0, sysm.theta, n)
    strat = make_strategy(sysm, vg, part, eps, cfg["z0"], level=s["level"], level_margin=s["level_margin"],
                          v_per_axis=int(s["v_per_axis"]))
    return strat, part


# -- commands -----------------------------------------------------------------


def cmd_value(cfg, out: Path, workers: int = 1) -> dict:
    sysm, cost = build(cfg)
    fp = config_fingerprint(cfg)
    comment = f"guarctl value fingerprint={fp}"
    t = time.perf_counter()
    lower = lower_grid(cfg, sysm, cost)
    res = {"lower": query(lower, sysm.t0, cfg["z0"])}
    save_value_grid(lower, out / "value_lower.txt", comment, cfg["cost"])
    if cfg["upper"]:
        us, vs = _actions(cfg, sysm)
        upper = solve_upper_value(sysm, cost, lower.space, lower.time_knots, us, vs)
        res["upper"] = query(upper, sysm.t0, cfg["z0"])
        save_value_grid(upper, out / "value_upper.txt", comment, cfg["cost"])
    log.info("value solved in %.1fs", time.perf_counter() - t)
    print(f"lower V(t0, z0) = {io.fmt(res['lower'])}")
    if "upper" in res:
        print(f"upper V(t0, z0) = {io.fmt(res['upper'])}")
    return res


def cmd_simulate(cfg, out: Path, workers: int = 1):
    sysm, cost = build(cfg)
    vg = lower_grid(cfg, sysm, cost)
    strat, part = _strategy(cfg, sysm, vg)
    model = disturbance_model(cfg, sysm)
    motion = run_closed_loop(sysm, strat, model, part, cfg["z0"], seed=int(cfg["seed"]), cost=cost)
    motion.to_csv_bundle(out, "motion", f"guarctl simulate fingerprint={config_fingerprint(cfg)}")
    print(f"cost = {io.fmt(motion.cost)}")
    return motion


def cmd_estimate(cfg, out: Path, workers: int = 1):
    sysm, cost = build(cfg)
    vg = lower_grid(cfg, sysm, cost)
    strat, part = _strategy(cfg, sysm, vg)
    model = disturbance_model(cfg, sysm)
    est = estimate_guarantee(sysm, strat, model, part, cfg["z0"], int(cfg["runs"]), int(cfg["seed"]), cost,
                             workers=workers)
    est.to_files(out, "estimate", f"guarctl estimate fingerprint={config_fingerprint(cfg)}")
    print(f"guarantee estimate = {io.fmt(est.max_cost)} (run {est.argmax} of {est.n_runs})")
    return est


def cmd_sweep(cfg, out: Path, workers: int = 1):
    sysm, cost = build(cfg)
    vg = lower_grid(cfg, sysm, cost)
    model = disturbance_model(cfg, sysm)
    sw = cfg["sweep"]
    s = cfg["strategy"]
    rows = sweep(sysm, cfg["z0"], sw["eps"], sw["diam"], model, int(cfg["runs"]), vg, int(cfg["seed"]),
                 pairing=sw["pairing"], cost=cost, workers=workers, level=s["level"],
                 level_margin=s["level_margin"], v_per_axis=int(s["v_per_axis"]))
    sweep_to_csv(rows, out / "sweep.csv", f"guarctl sweep fingerprint={config_fingerprint(cfg)}")
    for r in rows:
        print(f"eps={r.eps:g} diam={r.diam:g} estimate={io.fmt(r.estimate)}")
    return rows


COMMANDS = {"value": cmd_value, "simulate": cmd_simulate, "estimate": cmd_estimate, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="guarctl", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--scenario", required=True, help="JSON scenario file")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--seed", type=int, default=None, help="overrides the scenario seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = parse_scenario(args.scenario)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg["seed"] = args.seed
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        COMMANDS[args.command](cfg, out, max(1, args.workers))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StateEscapeError, EmptyLevelSetError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        # inputs that only fail once built (strategy level, signal files, grids)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
