"""Full-memory eps-strategy: test actions, surrogate identification, y-model, extremal shift."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import io
from .dynamics import ControlSystem, bound_kappa
from .integrate import Signal, Trajectory, integrate, sample, sample_many
from .sets import CompactSet, contains, epsilon_net
from .timegrid import Partition, TestSchedule, build_schedule, diam, diamin, thin_partition
from .value import ValueGrid, interpolate, level_set_project, query


def default_v_samples(Q: CompactSet, per_axis: int = 9) -> np.ndarray:
    """Finite search set for identification: Q itself if finite, else a lattice."""
    return Q.sample_grid(per_axis)


@dataclass(eq=False)
class FullMemoryStrategy:
    sys: ControlSystem
    schedule: TestSchedule
    net: np.ndarray
    eps: float
    vg: ValueGrid
    level: float
    u_star: np.ndarray
    v_star: np.ndarray
    v_samples: np.ndarray
    u_candidates: np.ndarray
    h_max: float
    replay_ladder: bool = False
    lookahead_ties: bool = True

    def __post_init__(self):
        if len(self.net) == 0:
            raise ValueError("control net must be nonempty")
        if not contains(self.sys.P, self.u_star):
            raise ValueError("u_star must lie in P")
        if not contains(self.sys.Q, self.v_star):
            raise ValueError("v_star must lie in Q")
        if self.vg.kind != "lower":
            raise ValueError("the strategy steers toward sublevel sets of the lower value")
        if self.level < float(self.vg.values[0].min()):
            raise ValueError("level is below the minimum of V(t0, .); target set would be empty")

    @property
    def partition(self) -> Partition:
        return self.schedule.base

    @property
    def n_eps(self) -> int:
        return len(self.net)

    def fingerprint(self) -> dict:
        return {
            "eps": self.eps,
            "n_eps": self.n_eps,
            "diam": diam(self.partition),
            "n_steps": self.partition.n,
            "level": self.level,
        }


def make_strategy(
    sys: ControlSystem,
    vg: ValueGrid,
    partition: Partition,
    eps: float,
    z0,
    level: float | None = None,
    level_margin: float | None = None,
    v_samples=None,
    v_per_axis: int = 9,
    u_candidates=None,
    h_max: float | None = None,
    replay_ladder: bool = False,
    lookahead_ties: bool = True,
) -> FullMemoryStrategy:
    """Assemble the eps-strategy for ``partition`` (thinned if needed).

    The default target level is V_lower(t0, z0) + 2 * kappa * diam(value time grid).
    """
    part = thin_partition(partition)
    net = epsilon_net(sys.P, eps)
    schedule = build_schedule(part, eps, len(net))
    if v_samples is None:
        v_samples = default_v_samples(sys.Q, v_per_axis)
    v_samples = np.atleast_2d(np.asarray(v_samples, dtype=float))
    if level is None:
        if level_margin is None:
            level_margin = 2.0 * bound_kappa(sys, 3) * diam(vg.time_knots)
        level = query(vg, sys.t0, z0) + level_margin
    if h_max is None:
        h_max = diamin(part) / 8.0
    cands = net if u_candidates is None else np.atleast_2d(np.asarray(u_candidates, dtype=float))
    return FullMemoryStrategy(
        sys=sys,
        schedule=schedule,
        net=net,
        eps=float(eps),
        vg=vg,
        level=float(level),
        u_star=net[0].copy(),
        v_star=v_samples[0].copy(),
        v_samples=v_samples,
        u_candidates=cands,
        h_max=float(h_max),
        replay_ladder=replay_ladder,
        lookahead_ties=lookahead_ties,
    )


@dataclass
class StrategyState:
    y_times: list
    y_states: list
    last_u: np.ndarray
    last_v_bar: np.ndarray
    i: int = 0
    surrogate_log: list = field(default_factory=list)
    control_log: list = field(default_factory=list)

    @property
    def y_traj(self) -> Trajectory:
        return Trajectory(np.array(self.y_times), np.array(self.y_states), self.y_states[0])

    @property
    def y(self) -> np.ndarray:
        return self.y_states[-1]

    def copy(self) -> StrategyState:
        return copy.deepcopy(self)

    def log_to_csv(self, path, comment: str | None = None):
        return surrogate_log_csv(self.surrogate_log, path, comment)


def surrogate_log_csv(log, path, comment: str | None = None):
    q = len(log[0][2]) if log else 0
    header = ["i", "tau_i"] + [f"vbar{k + 1}" for k in range(q)] + ["residual"]
    rows = [[str(i), tau, *vb, res] for (tau, _x, vb, res), i in zip(log, range(1, len(log) + 1))]
    return io.write_csv(path, header, rows, comment)


def init(strategy: FullMemoryStrategy, z0) -> StrategyState:
    z0 = np.asarray(z0, dtype=float)
    if not contains(strategy.sys.G0, z0):
        raise ValueError(f"z0={z0} is not in G0")
    return StrategyState(
        y_times=[strategy.partition.t0],
        y_states=[z0.copy()],
        last_u=strategy.u_star.copy(),
        last_v_bar=strategy.v_star.copy(),
    )


def difference_quotients(history: Trajectory, schedule: TestSchedule, i: int) -> np.ndarray:
    """Quotients (x(t_j) - x(t_{j-1})) / (t_j - t_{j-1}) over the test window ending at knot i."""
    ts = schedule.window(i)
    if history.end < ts[-1] - 1e-12 or history.start > ts[0] + 1e-12:
        raise ValueError(f"history [{history.start}, {history.end}] does not cover window {i}")
    xs = sample_many(history, ts)
    return np.diff(xs, axis=0) / np.diff(ts)[:, None]


def identify_surrogate(d, tau_i: float, x_i, net, v_samples, sys: ControlSystem):
    """v minimizing max_j ||d_j - f(tau_i, x_i, u_j, v)|| over ``v_samples``.

    Returns the first minimizer in sample order and its residual.
    """
    d = np.asarray(d, dtype=float)
    v_samples = np.atleast_2d(np.asarray(v_samples, dtype=float))
    if v_samples.size == 0:
        raise ValueError("v_samples is empty")
    if len(d) != len(net):
        raise ValueError("need one difference quotient per net control")
    x = np.asarray(x_i, dtype=float)
    f = sys.rhs(tau_i, x[None, None, :], np.asarray(net)[None, :, :], v_samples[:, None, :])
    res = np.linalg.norm(d[None, :, :] - f, axis=-1).max(axis=1)
    k = int(np.argmin(res))
    return v_samples[k].copy(), float(res[k])


def advance_y(state: StrategyState, strategy: FullMemoryStrategy, tau_prev: float, tau_i: float,
              h_max: float | None = None) -> StrategyState:
    """Integrate the y-model over [tau_prev, tau_i] under (last_u, last_v_bar)."""
    sys = strategy.sys
    h = strategy.h_max if h_max is None else h_max
    v_sig = Signal.constant(state.last_v_bar, tau_prev, tau_i, "disturbance")
    if strategy.replay_ladder and tau_i < strategy.partition.theta:
        u_sig = _ladder_signal(strategy, state.last_u, tau_prev, tau_i)
    else:
        u_sig = Signal.constant(state.last_u, tau_prev, tau_i)
    traj = integrate(sys, tau_prev, state.y, u_sig, v_sig, tau_i, h)
    state.y_times.extend(traj.times[1:].tolist())
    state.y_states.extend(list(traj.states[1:]))
    state.y_times[-1] = tau_i
    return state


def extremal_control(y_i, w, v_bar, sys: ControlSystem, tau_i: float, u_samples, tie_key=None) -> np.ndarray:
    """u minimizing <y - w, f(tau, y, u, v_bar)> over ``u_samples``.

    Ties go to the first sample unless ``tie_key`` (one score per sample,
    lower is better) is given; then the tied sample with the lowest score wins.
    """
    y = np.asarray(y_i, dtype=float)
    us = np.atleast_2d(np.asarray(u_samples, dtype=float))
    s = y - np.asarray(w, dtype=float)
    if np.any(s):
        f = sys.rhs(tau_i, y[None, :], us, np.asarray(v_bar, dtype=float)[None, :])
        ip = f @ s
    else:
        ip = np.zeros(len(us))
    if tie_key is None:
        return us[int(np.argmin(ip))].copy()
    best = ip.min()
    tied = ip <= best + 1e-12 * max(1.0, abs(best))
    key = np.where(tied, np.asarray(tie_key, dtype=float), np.inf)
    return us[int(np.argmin(key))].copy()


def _lookahead_scores(strategy: FullMemoryStrategy, i: int, y, v_bar) -> np.ndarray:
    """Lower value at the next knot after one Euler step of the y-model, per candidate control."""
    knots = strategy.partition.knots
    vg = strategy.vg
    t, dt = knots[i], knots[i + 1] - knots[i]
    us = strategy.u_candidates
    f = strategy.sys.rhs(t, y[None, :], us, np.asarray(v_bar, dtype=float)[None, :])
    k = vg.knot_index(knots[i + 1])
    return interpolate(vg.space, vg.values[k], y[None, :] + dt * f)[0]


def _ladder_signal(strategy: FullMemoryStrategy, u_useful, a: float, b: float) -> Signal:
    """u_useful on [a, tau'_k) followed by the test ladder on window k, where b = tau_k."""
    part = strategy.partition
    k = int(np.searchsorted(part.knots, b - 1e-12))
    if k >= part.n:
        return Signal.constant(u_useful, a, b)
    ts = strategy.schedule.window(k)
    bps = np.concatenate([[a], ts])
    vals = np.vstack([np.asarray(u_useful, dtype=float)[None, :], strategy.net])
    return Signal(bps, vals, "control")


def feedback_segment(strategy: FullMemoryStrategy, state: StrategyState, history: Trajectory, i: int):
    """Control on [tau_i, tau_{i+1}] from the observed history on [t0, tau_i].

    ``state`` is updated in place and returned together with the control signal.
    """
    part = strategy.partition
    knots = part.knots
    if i != state.i:
        raise ValueError(f"strategy state is at step {state.i}, asked for step {i}")
    if i > 0:
        tau_i = knots[i]
        d = difference_quotients(history, strategy.schedule, i)
        x_i = sample(history, tau_i)
        v_bar, res = identify_surrogate(d, tau_i, x_i, strategy.net, strategy.v_samples, strategy.sys)
        advance_y(state, strategy, knots[i - 1], tau_i)
        y_i = state.y
        w = level_set_project(strategy.vg, tau_i, y_i, strategy.level)
        tie = _lookahead_scores(strategy, i, y_i, v_bar) if strategy.lookahead_ties else None
        u_i = extremal_control(y_i, w, v_bar, strategy.sys, tau_i, strategy.u_candidates, tie)
        state.surrogate_log.append((float(tau_i), x_i, v_bar, res))
        state.last_u = u_i
        state.last_v_bar = v_bar
    else:
        u_i = state.last_u
    state.control_log.append(np.asarray(u_i).copy())
    sig = _ladder_signal(strategy, u_i, knots[i], knots[i + 1])
    state.i = i + 1
    return sig, state
