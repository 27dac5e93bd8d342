"""Fixed-step RK4 for piecewise-constant controls and disturbances."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import io
from .dynamics import ControlSystem, StateEscapeError

TIME_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Signal:
    """Piecewise-constant signal: ``values[k]`` holds on [breakpoints[k], breakpoints[k+1]).

    The last value also holds at the right end ``breakpoints[-1]``.
    """

    breakpoints: np.ndarray
    values: np.ndarray
    kind: str = "control"

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float).copy()
        vals = np.asarray(self.values, dtype=float).copy()
        if vals.ndim == 1:
            vals = vals[:, None]
        if b.ndim != 1 or len(b) != len(vals) + 1:
            raise ValueError("need len(breakpoints) == len(values) + 1")
        if np.any(np.diff(b) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if self.kind not in ("control", "disturbance"):
            raise ValueError("kind must be 'control' or 'disturbance'")
        b.flags.writeable = False
        vals.flags.writeable = False
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, value, start: float, end: float, kind: str = "control") -> Signal:
        return cls([start, end], [np.atleast_1d(np.asarray(value, dtype=float))], kind)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def start(self) -> float:
        return float(self.breakpoints[0])

    @property
    def end(self) -> float:
        return float(self.breakpoints[-1])

    def index(self, t: float) -> int:
        k = int(np.searchsorted(self.breakpoints, t, side="right") - 1)
        return min(max(k, 0), len(self.values) - 1)

    def __call__(self, t: float) -> np.ndarray:
        if t < self.start - TIME_TOL or t > self.end + TIME_TOL:
            raise ValueError(f"signal undefined at t={t} (span [{self.start}, {self.end}])")
        return self.values[self.index(t)]

    def covers(self, a: float, b: float) -> bool:
        return self.start <= a + TIME_TOL and self.end >= b - TIME_TOL

    def switch_times(self, a: float, b: float) -> np.ndarray:
        """Breakpoints strictly inside (a, b)."""
        bp = self.breakpoints
        return bp[(bp > a + TIME_TOL) & (bp < b - TIME_TOL)]

    def restrict(self, a: float, b: float) -> Signal:
        inner = self.switch_times(a, b)
        knots = np.concatenate([[a], inner, [b]])
        return Signal(knots, np.array([self(t) for t in knots[:-1]]), self.kind)

    @staticmethod
    def concat(pieces: list[Signal]) -> Signal:
        """Join signals on adjacent spans; equal consecutive values are merged."""
        bps = [pieces[0].start]
        vals = []
        for s in pieces:
            if abs(s.start - bps[-1]) > TIME_TOL:
                raise ValueError("signal pieces are not adjacent")
            for k in range(len(s.values)):
                if vals and np.array_equal(vals[-1], s.values[k]):
                    bps[-1] = s.breakpoints[k + 1]
                else:
                    vals.append(s.values[k])
                    bps.append(s.breakpoints[k + 1])
        return Signal(bps, vals, pieces[0].kind)

    def to_csv(self, path, comment: str | None = None):
        name = "u" if self.kind == "control" else "v"
        header = ["t"] + [f"{name}{k + 1}" for k in range(self.dim)]
        rows = [[t, *v] for t, v in zip(self.breakpoints[:-1], self.values)]
        rows.append([self.end, *self.values[-1]])
        return io.write_csv(path, header, rows, comment)

    @classmethod
    def from_csv(cls, path, kind: str = "disturbance") -> Signal:
        """Breakpoint rows ``t,v1..vq``; the final row marks the end of the span."""
        _, data = io.read_csv(path)
        if len(data) < 2:
            raise ValueError("signal CSV needs at least two rows")
        return cls(data[:, 0], data[:-1, 1:], kind)


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    z0: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.z0 is None:
            object.__setattr__(self, "z0", np.asarray(self.states[0]).copy())

    @property
    def start(self) -> float:
        return float(self.times[0])

    @property
    def end(self) -> float:
        return float(self.times[-1])

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path, comment: str | None = None):
        header = ["t"] + [f"x{k + 1}" for k in range(self.states.shape[1])]
        rows = np.column_stack([self.times, self.states])
        return io.write_csv(path, header, rows, comment)


def sample(traj: Trajectory, t: float) -> np.ndarray:
    """Linear interpolation between stored steps."""
    times = traj.times
    if t < times[0] - TIME_TOL or t > times[-1] + TIME_TOL:
        raise ValueError(f"t={t} outside trajectory span [{times[0]}, {times[-1]}]")
    k = int(np.searchsorted(times, t, side="right") - 1)
    k = min(max(k, 0), len(times) - 2) if len(times) > 1 else 0
    if len(times) == 1:
        return traj.states[0].copy()
    t0, t1 = times[k], times[k + 1]
    w = (t - t0) / (t1 - t0)
    w = min(max(w, 0.0), 1.0)
    if w == 0.0:
        return traj.states[k].copy()
    if w == 1.0:
        return traj.states[k + 1].copy()
    return (1.0 - w) * traj.states[k] + w * traj.states[k + 1]


def rk4_step(rhs, t, h, x, u, v):
    """One classical RK4 step, vectorized over leading axes.

    ``t`` and ``h`` may be scalars or arrays of shape (B,); a zero step
    leaves the state bitwise unchanged.
    """
    t = np.asarray(t, dtype=float)
    h = np.asarray(h, dtype=float)
    hh = h[..., None] if h.ndim else h
    th = t + 0.5 * h
    k1 = rhs(t, x, u, v)
    k2 = rhs(th, x + 0.5 * hh * k1, u, v)
    k3 = rhs(th, x + 0.5 * hh * k2, u, v)
    k4 = rhs(t + h, x + hh * k3, u, v)
    return x + (hh / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_plan(a: float, b: float, cuts, h_max) -> tuple[np.ndarray, np.ndarray]:
    """Step start times and lengths covering [a, b], never crossing ``cuts``.

    Each sub-segment between consecutive cuts is split into ceil(len / h_max)
    equal steps; ``h_max`` may be a scalar or one value per sub-segment.
    """
    knots = np.concatenate([[a], np.sort(np.asarray(cuts, dtype=float)), [b]])
    lens = np.diff(knots)
    h = np.broadcast_to(np.asarray(h_max, dtype=float), lens.shape)
    n = np.maximum(1, np.ceil(lens / h - 1e-9)).astype(np.int64)
    seg = np.repeat(np.arange(len(lens)), n)
    j = np.arange(len(seg)) - np.repeat(np.cumsum(n) - n, n)
    starts = knots[seg] + j * (lens / n)[seg]
    last = j == n[seg] - 1
    ends = np.empty_like(starts)
    ends[:-1] = starts[1:]
    ends[last] = knots[seg[last] + 1]
    return starts, ends - starts


def sample_many(traj: Trajectory, ts) -> np.ndarray:
    """Vectorized ``sample`` at an array of times."""
    ts = np.asarray(ts, dtype=float)
    times = traj.times
    if ts.min() < times[0] - TIME_TOL or ts.max() > times[-1] + TIME_TOL:
        raise ValueError(f"sample times outside trajectory span [{times[0]}, {times[-1]}]")
    return np.column_stack([np.interp(ts, times, traj.states[:, k]) for k in range(traj.states.shape[1])])


def integrate(
    sys: ControlSystem,
    t_start: float,
    x0,
    u: Signal,
    v: Signal,
    t_end: float,
    h_max: float,
    check_bound: bool = True,
) -> Trajectory:
    """RK4 solution of x' = f(t, x, u(t), v(t)) on [t_start, t_end].

    Steps never straddle a breakpoint of ``u`` or ``v`` and never exceed
    ``h_max``; the state is stored after every step.
    """
    if h_max <= 0:
        raise ValueError("h_max must be positive")
    x = np.asarray(x0, dtype=float).copy()
    if check_bound:
        sys.check_bound(t_start, x)
    for sig in (u, v):
        if not sig.covers(t_start, t_end):
            raise ValueError(
                f"{sig.kind} signal [{sig.start}, {sig.end}] does not cover [{t_start}, {t_end}]"
            )
    cuts = np.union1d(u.switch_times(t_start, t_end), v.switch_times(t_start, t_end))
    starts, lengths = step_plan(t_start, t_end, cuts, h_max)
    states = np.empty((len(starts) + 1, len(x)))
    states[0] = x
    for k, (t, h) in enumerate(zip(starts, lengths)):
        x = rk4_step(sys.rhs, t, h, x, u(t), v(t))
        if check_bound and not sys.in_bound(x):
            raise StateEscapeError(f"{sys.name}: state {x} left G_bound at t={t + h:.6g}")
        states[k + 1] = x
    times = np.append(starts, t_end)
    return Trajectory(times, states, np.asarray(x0, dtype=float).copy())
