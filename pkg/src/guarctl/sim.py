"""Closed-loop simulation and empirical guaranteed-result estimation."""

from __future__ import annotations

import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import io
from .disturbance import Family, Feedback, OpenLoop, Switching, realize, worst_in_family
from .dynamics import ControlSystem, StateEscapeError
from .integrate import Signal, Trajectory, rk4_step, step_plan
from .sets import contains_many
from .strategy import FullMemoryStrategy, feedback_segment, init, make_strategy, surrogate_log_csv
from .timegrid import Partition, diam, diamin, thin_partition, uniform_partition

log = logging.getLogger(__name__)


class OpenLoopController:
    """Ignores the observed history and plays a fixed control signal."""

    def __init__(self, signal: Signal, partition: Partition):
        self.signal = signal
        self.partition = partition

    def init(self, z0):
        return {"i": 0, "surrogate_log": []}

    def feedback_segment(self, state, history, i):
        knots = self.partition.knots
        state["i"] = i + 1
        return self.signal.restrict(knots[i], knots[i + 1]), state

    def step_sizes(self):
        return diamin(self.partition) / 8.0, diamin(self.partition) / 8.0

    def fingerprint(self):
        return {"controller": "openloop", "diam": diam(self.partition)}


class _StrategyAdapter:
    def __init__(self, strategy: FullMemoryStrategy):
        self.strategy = strategy
        self.partition = strategy.partition

    def init(self, z0):
        return init(self.strategy, z0)

    def feedback_segment(self, state, history, i):
        return feedback_segment(self.strategy, state, history, i)

    def step_sizes(self):
        sched = self.strategy.schedule
        h_test = sched.window_length / (4 * sched.n_eps)
        return diamin(self.partition) / 8.0, h_test

    def fingerprint(self):
        return self.strategy.fingerprint()


def _controller(strategy):
    return _StrategyAdapter(strategy) if isinstance(strategy, FullMemoryStrategy) else strategy


def _log_of(state):
    return state["surrogate_log"] if isinstance(state, dict) else state.surrogate_log


@dataclass
class Motion:
    trajectory: Trajectory
    control: Signal
    disturbance_used: Signal
    surrogate_log: list
    cost: float
    fingerprint: dict = field(default_factory=dict)

    def to_csv_bundle(self, directory, stem: str = "motion", comment: str | None = None) -> dict:
        directory = os.fspath(directory)
        paths = {
            "trajectory": self.trajectory.to_csv(os.path.join(directory, f"{stem}_trajectory.csv"), comment),
            "control": self.control.to_csv(os.path.join(directory, f"{stem}_control.csv"), comment),
            "disturbance": self.disturbance_used.to_csv(
                os.path.join(directory, f"{stem}_disturbance.csv"), comment
            ),
            "surrogate": surrogate_log_csv(
                self.surrogate_log, os.path.join(directory, f"{stem}_surrogate.csv"), comment
            ),
        }
        summary = {"cost": self.cost, "fingerprint": self.fingerprint, "comment": comment}
        paths["summary"] = io.atomic_write(
            os.path.join(directory, f"{stem}_summary.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n"
        )
        return paths


@dataclass
class GuaranteeEstimate:
    z0: np.ndarray
    tag: str
    n_runs: int
    max_cost: float
    argmax: int
    costs: np.ndarray
    seeds: list
    fingerprint: dict = field(default_factory=dict)

    def rows(self):
        return [[str(k), str(s), c, "1" if k == self.argmax else "0"] for k, (s, c) in enumerate(zip(self.seeds, self.costs))]

    def to_files(self, directory, stem: str = "estimate", comment: str | None = None) -> dict:
        directory = os.fspath(directory)
        csv_path = io.write_csv(
            os.path.join(directory, f"{stem}_runs.csv"), ["run", "seed", "cost", "is_max"], self.rows(), comment
        )
        summary = {
            "comment": comment,
            "z0": np.asarray(self.z0).tolist(),
            "class": self.tag,
            "n_runs": self.n_runs,
            "max_cost": self.max_cost,
            "argmax": self.argmax,
            "fingerprint": self.fingerprint,
        }
        js = io.atomic_write(os.path.join(directory, f"{stem}_summary.json"),
                             json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return {"runs": csv_path, "summary": js}


def simulate_batch(sys: ControlSystem, strategy, drivers, z0, cost, record: bool = False,
                   check_bound: bool = True):
    """Run one closed loop per driver (a disturbance Signal or a feedback reaction).

    Runs are integrated together: each run keeps its own step plan and
    shorter plans are padded with zero-length steps, so every run is
    bitwise identical to running it alone.
    """
    ctl = _controller(strategy)
    part = ctl.partition
    knots = part.knots
    B = len(drivers)
    n = sys.state_dim
    z0 = np.asarray(z0, dtype=float)
    h_useful, h_test = ctl.step_sizes()
    X = np.tile(z0, (B, 1))
    states = [ctl.init(z0) for _ in range(B)]
    is_fb = np.array([not isinstance(d, Signal) for d in drivers])
    fb = [d for d in drivers if not isinstance(d, Signal)]
    if len({id(r) for r in fb}) > 1:
        raise ValueError("a batch may contain at most one feedback reaction")
    reaction = fb[0] if fb else None
    for d in drivers:
        if isinstance(d, Signal):
            if not d.covers(part.t0, part.theta):
                raise ValueError("disturbance signal does not cover the horizon")
            if not np.all(contains_many(sys.Q, d.values)):
                raise ValueError("disturbance signal leaves Q")
    hist_t = [[knots[0]] for _ in range(B)]
    hist_x = [[z0.copy()] for _ in range(B)]
    rec_t = [[knots[0]] for _ in range(B)] if record else None
    rec_x = [[z0.copy()] for _ in range(B)] if record else None
    controls = [[] for _ in range(B)]
    fb_values = [[] for _ in range(B)]
    for i in range(part.n):
        a, b = knots[i], knots[i + 1]
        plans = []
        for r in range(B):
            history = Trajectory(np.asarray(hist_t[r]), np.asarray(hist_x[r]), z0)
            sig, states[r] = ctl.feedback_segment(states[r], history, i)
            if not np.all(contains_many(sys.P, sig.values)):
                raise ValueError(f"controller emitted a control outside P on step {i}")
            controls[r].append(sig)
            ccuts = sig.breakpoints[1:-1]
            dcuts = drivers[r].switch_times(a, b) if not is_fb[r] else np.empty(0)
            cuts = np.union1d(ccuts, dcuts)
            edges = np.concatenate([[a], cuts, [b]])
            window_start = sig.breakpoints[1] if len(sig.breakpoints) > 2 else b
            hseg = np.where(edges[:-1] >= window_start - 1e-15, h_test, h_useful)
            starts, lengths = step_plan(a, b, cuts, hseg)
            uvals = sig.values[np.clip(np.searchsorted(sig.breakpoints, starts, side="right") - 1, 0, len(sig.values) - 1)]
            if is_fb[r]:
                vvals = None
            else:
                d = drivers[r]
                vvals = d.values[np.clip(np.searchsorted(d.breakpoints, starts, side="right") - 1, 0, len(d.values) - 1)]
            ends = np.append(starts[1:], b)
            obs = np.flatnonzero(np.isin(ends, sig.breakpoints[1:]) | (np.arange(len(ends)) == len(ends) - 1))
            plans.append((starts, lengths, uvals, vvals, obs, ends))
        L = max(len(p[0]) for p in plans)
        T = np.empty((B, L))
        H = np.zeros((B, L))
        UU = np.empty((B, L, sys.control_dim))
        VV = np.empty((B, L, sys.disturbance_dim))
        for r, (starts, lengths, uvals, vvals, _, _) in enumerate(plans):
            m = len(starts)
            T[r, :m], T[r, m:] = starts, b
            H[r, :m] = lengths
            UU[r, :m], UU[r, m:] = uvals, uvals[-1]
            if vvals is not None:
                VV[r, :m], VV[r, m:] = vvals, vvals[-1]
        Xs = np.empty((L, B, n))
        for k in range(L):
            Vk = VV[:, k]
            if reaction is not None:
                Vk = Vk.copy()
                Vk[is_fb] = np.asarray(reaction(T[is_fb, k], X[is_fb], UU[is_fb, k]), dtype=float)
                VV[is_fb, k] = Vk[is_fb]
            X = rk4_step(sys.rhs, T[:, k], H[:, k], X, UU[:, k], Vk)
            Xs[k] = X
        if check_bound:
            ok = sys.in_bound(Xs)
            if not np.all(ok):
                kbad, rbad = np.argwhere(~ok)[0]
                raise StateEscapeError(
                    f"{sys.name}: run {rbad} left G_bound at t={T[rbad, kbad] + H[rbad, kbad]:.6g}: {Xs[kbad, rbad]}"
                )
        if reaction is not None and not np.all(contains_many(sys.Q, VV[is_fb].reshape(-1, sys.disturbance_dim))):
            raise ValueError("feedback disturbance left Q")
        for r, (starts, lengths, _, _, obs, ends) in enumerate(plans):
            m = len(starts)
            if not record:
                # strategies only read the latest test window; keep knots plus that window
                keep = np.isin(np.asarray(hist_t[r]), knots)
                hist_t[r] = [t for t, kk in zip(hist_t[r], keep) if kk]
                hist_x[r] = [x for x, kk in zip(hist_x[r], keep) if kk]
            hist_t[r].extend(ends[obs].tolist())
            hist_x[r].extend(list(Xs[obs, r]))
            if record:
                rec_t[r].extend(ends.tolist())
                rec_x[r].extend(list(Xs[:m, r]))
            if is_fb[r]:
                fb_values[r].append((starts, VV[r, :m]))
    results = []
    for r in range(B):
        xf = X[r]
        c = float(cost(xf))
        entry = {"final": xf.copy(), "cost": c, "surrogate_log": _log_of(states[r])}
        if record:
            traj = Trajectory(np.asarray(rec_t[r]), np.asarray(rec_x[r]), z0)
            ctrl = Signal.concat(controls[r])
            if is_fb[r]:
                st = np.concatenate([s for s, _ in fb_values[r]])
                vv = np.concatenate([v for _, v in fb_values[r]])
                dist = Signal.concat([Signal(np.append(st, knots[-1]), vv, "disturbance")])
            else:
                dist = drivers[r].restrict(part.t0, part.theta)
            entry.update(trajectory=traj, control=ctrl, disturbance=dist)
        results.append(entry)
    return results


def _check_partition(strategy, partition: Partition):
    ctl = _controller(strategy)
    if partition is not None and thin_partition(partition) != ctl.partition:
        raise ValueError("partition does not match the strategy's schedule")


def _cost_of(strategy, cost):
    if cost is not None:
        return cost
    if isinstance(strategy, FullMemoryStrategy) and strategy.vg.terminal_cost is not None:
        return strategy.vg.terminal_cost
    raise ValueError("no terminal cost given")


def run_closed_loop(sys, strategy, model, partition, z0, seed: int = 0, cost=None, check_bound: bool = True) -> Motion:
    """One closed-loop motion from z0 under ``model`` realized with ``seed``."""
    _check_partition(strategy, partition)
    cost = _cost_of(strategy, cost)
    driver = realize(model, seed, sys.horizon)
    res = simulate_batch(sys, strategy, [driver], z0, cost, record=True, check_bound=check_bound)[0]
    fp = dict(_controller(strategy).fingerprint())
    fp.update(seed=int(seed), model=model.tag)
    return Motion(
        trajectory=res["trajectory"],
        control=res["control"],
        disturbance_used=res["disturbance"],
        surrogate_log=res["surrogate_log"],
        cost=res["cost"],
        fingerprint=fp,
    )


def _drivers_for(model, n_runs: int, base_seed: int, horizon):
    if isinstance(model, Family):
        return list(model.signals), list(range(len(model.signals)))
    if isinstance(model, (OpenLoop, Feedback)):
        return [realize(model, base_seed, horizon)], [base_seed]
    if isinstance(model, Switching):
        seeds = [base_seed + k for k in range(n_runs)]
        return [realize(model, s, horizon) for s in seeds], seeds
    raise TypeError(f"unknown disturbance model {type(model).__name__}")


def _batch_costs(args):
    sys, strategy, drivers, z0, cost = args
    return [r["cost"] for r in simulate_batch(sys, strategy, drivers, z0, cost)]


def estimate_guarantee(sys, strategy, model, partition, z0, n_runs: int = 1, base_seed: int = 0,
                       cost=None, workers: int = 1, batch_size: int = 256) -> GuaranteeEstimate:
    """Max realized cost over seeded runs, or over every member of a finite family."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    _check_partition(strategy, partition)
    cost = _cost_of(strategy, cost)
    drivers, seeds = _drivers_for(model, n_runs, base_seed, sys.horizon)
    if isinstance(model, Family):
        costs = _family_costs(sys, strategy, model, z0, cost, workers, batch_size)
    else:
        costs = _run_costs(sys, strategy, drivers, z0, cost, workers, batch_size)
    costs = np.asarray(costs, dtype=float)
    k = int(np.argmax(costs))
    fp = dict(_controller(strategy).fingerprint())
    fp.update(base_seed=int(base_seed), model=model.tag, n_runs=len(costs))
    return GuaranteeEstimate(np.asarray(z0, dtype=float), model.tag, len(costs), float(costs[k]), k, costs, seeds, fp)


def _family_costs(sys, strategy, family, z0, cost, workers, batch_size):
    costs = {}

    def evaluate(sig):
        return costs[id(sig)]

    for sig, c in zip(family.signals, _run_costs(sys, strategy, list(family.signals), z0, cost, workers, batch_size)):
        costs[id(sig)] = c
    worst_in_family(family, evaluate)
    return [costs[id(s)] for s in family.signals]


def _run_costs(sys, strategy, drivers, z0, cost, workers, batch_size):
    fb = [d for d in drivers if not isinstance(d, Signal)]
    batches = [drivers[k : k + batch_size] for k in range(0, len(drivers), batch_size)] if not fb else [[d] for d in drivers]
    jobs = [(sys, strategy, b, z0, cost) for b in batches]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_batch_costs, jobs))
    else:
        parts = [_batch_costs(j) for j in jobs]
    return [c for p in parts for c in p]


@dataclass
class SweepRow:
    eps: float
    diam: float
    estimate: float
    n_runs: int
    seed: int
    fingerprint: dict


def sweep(sys, z0, eps_list, diam_list, model, runs: int, vg, base_seed: int = 0, pairing: str = "product",
          cost=None, workers: int = 1, **strategy_kw) -> list[SweepRow]:
    """Guarantee estimates over (eps, diam) pairs with shared base seeds.

    ``pairing`` is "product" (cartesian) or "zip" (diagonal).
    """
    if not eps_list or not diam_list:
        raise ValueError("eps and diam lists must be nonempty")
    if pairing == "product":
        pairs = list(itertools.product(eps_list, diam_list))
    elif pairing == "zip":
        if len(eps_list) != len(diam_list):
            raise ValueError("zip pairing needs equal-length lists")
        pairs = list(zip(eps_list, diam_list))
    else:
        raise ValueError(f"unknown pairing {pairing!r}")
    rows = []
    for eps, dm in pairs:
        n = max(1, round((sys.theta - sys.t0) / dm))
        part = uniform_partition(sys.t0, sys.theta, n)
        strat = make_strategy(sys, vg, part, eps, z0, **strategy_kw)
        est = estimate_guarantee(sys, strat, model, part, z0, runs, base_seed, cost, workers)
        rows.append(SweepRow(float(eps), float(dm), est.max_cost, est.n_runs, int(base_seed), est.fingerprint))
        log.info("sweep eps=%g diam=%g -> %.6f", eps, dm, est.max_cost)
    return rows


def sweep_to_csv(rows: list[SweepRow], path, comment: str | None = None):
    return io.write_csv(path, ["eps", "diam", "estimate", "n_runs", "seed"],
                        [[r.eps, r.diam, r.estimate, str(r.n_runs), str(r.seed)] for r in rows], comment)
