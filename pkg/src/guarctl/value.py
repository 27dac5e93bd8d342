"""Grid minimax dynamic programming for lower and upper game values.

The lower value lets the minimizer react to the current disturbance
(max over v of min over u at every step); the upper value makes the
minimizer commit first (min over u of max over v).  Sublevel sets of the
lower value serve as target sets for the extremal-shift strategy.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numba
import numpy as np

from . import io
from .dynamics import ControlSystem
from .sets import CompactSet
from .timegrid import Partition, locate

log = logging.getLogger(__name__)

NODE_CHUNK = 4096
# fractional grid coordinates this close to an integer are treated as nodes
SNAP = 1e-9


class EmptyLevelSetError(ValueError):
    """No grid node satisfies V <= level."""


@dataclass(frozen=True)
class TerminalCost:
    """sigma(x) = constant + <linear, x> + sum_k quadratic[k] * x_k**2."""

    linear: tuple[float, ...] = ()
    quadratic: tuple[float, ...] = ()
    constant: float = 0.0

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape[:-1], float(self.constant))
        if self.linear:
            out = out + x @ np.asarray(self.linear, dtype=float)
        if self.quadratic:
            out = out + (x * x) @ np.asarray(self.quadratic, dtype=float)
        return out if out.ndim else float(out)

    @classmethod
    def coordinate(cls, k: int, dim: int) -> TerminalCost:
        w = [0.0] * dim
        w[k] = 1.0
        return cls(linear=tuple(w))

    def to_dict(self) -> dict:
        return {"linear": list(self.linear), "quadratic": list(self.quadratic), "constant": self.constant}

    @classmethod
    def from_dict(cls, d: dict) -> TerminalCost:
        return cls(
            linear=tuple(float(a) for a in d.get("linear", ())),
            quadratic=tuple(float(a) for a in d.get("quadratic", ())),
            constant=float(d.get("constant", 0.0)),
        )


@dataclass(frozen=True, eq=False)
class ValueGrid:
    time_knots: Partition
    space: CompactSet
    values: np.ndarray
    kind: str
    u_samples: np.ndarray
    v_samples: np.ndarray
    terminal_cost: object = None
    clamp_count: int = 0
    total_clamps: int = 0
    _sublevel_cache: dict = field(default_factory=dict, repr=False)

    @property
    def counts(self) -> tuple[int, ...]:
        return self.space.counts

    @property
    def cell(self) -> np.ndarray:
        return (self.space.upper - self.space.lower) / (np.asarray(self.counts) - 1)

    def nodes(self) -> np.ndarray:
        return self.space.nodes()

    def slice(self, k: int) -> np.ndarray:
        return self.values[k]

    def knot_index(self, t: float) -> int:
        return locate(self.time_knots, t, tol=1e-9)

    def sublevel_nodes(self, k: int, level: float) -> np.ndarray:
        """Nodes of slice k with V <= level, lexicographic order (cached)."""
        key = (k, float(level))
        hit = self._sublevel_cache.get(key)
        if hit is None:
            mask = self.values[k].ravel() <= level
            hit = self.nodes()[mask]
            self._sublevel_cache[key] = hit
        return hit


@numba.njit(cache=True)
def _interp_kernel(flat, lo, h, counts, strides, pts, out, outside):
    m, d = pts.shape
    idx0 = np.empty(d, dtype=np.int64)
    wts = np.empty(d)
    for p in range(m):
        off_flag = False
        base = 0
        for a in range(d):
            s = (pts[p, a] - lo[a]) / h[a]
            if s < -1e-9 or s > counts[a] - 1 + 1e-9:
                off_flag = True
            if s < 0.0:
                s = 0.0
            elif s > counts[a] - 1:
                s = counts[a] - 1.0
            r = np.floor(s + 0.5)
            if abs(s - r) < SNAP:
                s = r
            i0 = int(np.floor(s))
            if i0 > counts[a] - 2:
                i0 = counts[a] - 2
            idx0[a] = i0
            wts[a] = s - i0
            base += i0 * strides[a]
        acc = 0.0
        for corner in range(1 << d):
            w = 1.0
            off = 0
            for a in range(d):
                if (corner >> (d - 1 - a)) & 1:
                    w *= wts[a]
                    off += strides[a]
                else:
                    w *= 1.0 - wts[a]
            acc += w * flat[base + off]
        out[p] = acc
        outside[p] = off_flag


@numba.njit(cache=True)
def _interp_kernel_2d(flat, lo, h, counts, pts, out, outside):
    n0 = counts[0]
    n1 = counts[1]
    for p in range(pts.shape[0]):
        s0 = (pts[p, 0] - lo[0]) / h[0]
        s1 = (pts[p, 1] - lo[1]) / h[1]
        outside[p] = s0 < -1e-9 or s0 > n0 - 1 + 1e-9 or s1 < -1e-9 or s1 > n1 - 1 + 1e-9
        s0 = min(max(s0, 0.0), n0 - 1.0)
        s1 = min(max(s1, 0.0), n1 - 1.0)
        # snap to nodes so queries at nodes return stored values exactly
        r0 = np.floor(s0 + 0.5)
        r1 = np.floor(s1 + 0.5)
        if abs(s0 - r0) < SNAP:
            s0 = r0
        if abs(s1 - r1) < SNAP:
            s1 = r1
        i0 = min(int(s0), n0 - 2)
        i1 = min(int(s1), n1 - 2)
        w0 = s0 - i0
        w1 = s1 - i1
        b = i0 * n1 + i1
        out[p] = (1.0 - w0) * ((1.0 - w1) * flat[b] + w1 * flat[b + 1]) + w0 * (
            (1.0 - w1) * flat[b + n1] + w1 * flat[b + n1 + 1]
        )


def interpolate(space: CompactSet, grid_values: np.ndarray, points) -> tuple[np.ndarray, np.ndarray]:
    """Multilinear interpolation on a regular grid with clamping.

    Returns the values and a boolean mask of points that lay outside the grid.
    """
    pts = np.asarray(points, dtype=float)
    lead = pts.shape[:-1]
    pts = np.ascontiguousarray(pts.reshape(-1, pts.shape[-1]))
    counts = np.asarray(space.counts, dtype=np.int64)
    h = (space.upper - space.lower) / (counts - 1)
    strides = np.r_[np.cumprod(counts[::-1])[::-1][1:], 1].astype(np.int64)
    out = np.empty(len(pts))
    outside = np.empty(len(pts), dtype=np.bool_)
    flat = np.ascontiguousarray(grid_values, dtype=float).ravel()
    if pts.shape[1] == 2:
        _interp_kernel_2d(flat, space.lower, h, counts, pts, out, outside)
    else:
        _interp_kernel(flat, space.lower, h, counts, strides, pts, out, outside)
    return out.reshape(lead), outside.reshape(lead)


def _solve(sys, cost, space, time_knots, u_samples, v_samples, kind) -> ValueGrid:
    u_samples = np.atleast_2d(np.asarray(u_samples, dtype=float))
    v_samples = np.atleast_2d(np.asarray(v_samples, dtype=float))
    if len(u_samples) == 0 or len(v_samples) == 0 or u_samples.size == 0 or v_samples.size == 0:
        raise ValueError("action sample sets must be nonempty")
    if space.kind != "grid":
        raise ValueError("space must be a grid set")
    if min(space.counts) < 2:
        raise ValueError("space grid needs at least 2 nodes per axis")
    if space.dim != sys.state_dim:
        raise ValueError("space grid dimension does not match the system")
    nodes = space.nodes()
    inside = sys.in_bound(nodes)
    knots = time_knots.knots
    K = len(knots) - 1
    values = np.empty((K + 1,) + tuple(space.counts))
    values[K] = np.asarray(cost(nodes)).reshape(space.counts)
    clamps_inside = 0
    clamps_total = 0
    U, V = u_samples[:, None, :], v_samples
    for i in range(K - 1, -1, -1):
        t, dt = knots[i], knots[i + 1] - knots[i]
        nxt = values[i + 1]
        cur = np.empty(len(nodes))
        for c0 in range(0, len(nodes), NODE_CHUNK):
            X = nodes[c0 : c0 + NODE_CHUNK][None, :, :]
            ins = inside[c0 : c0 + NODE_CHUNK]
            acc = None
            for v in V:
                f = sys.rhs(t, X, U, np.broadcast_to(v, (1, 1, len(v))))
                z, out = interpolate(space, nxt, X + dt * f)
                clamps_total += int(out.sum())
                clamps_inside += int(out[:, ins].sum())
                if kind == "lower":
                    r = z.min(axis=0)
                    acc = r if acc is None else np.maximum(acc, r)
                else:
                    acc = z if acc is None else np.maximum(acc, z)
            cur[c0 : c0 + NODE_CHUNK] = acc if kind == "lower" else acc.min(axis=0)
        values[i] = cur.reshape(space.counts)
    if clamps_inside:
        log.warning(
            "%s value: %d stepped points from nodes inside G_bound were clamped to the grid",
            kind,
            clamps_inside,
        )
    values.flags.writeable = False
    return ValueGrid(
        time_knots=time_knots,
        space=space,
        values=values,
        kind=kind,
        u_samples=u_samples,
        v_samples=v_samples,
        terminal_cost=cost,
        clamp_count=clamps_inside,
        total_clamps=clamps_total,
    )


def solve_lower_value(sys: ControlSystem, cost, space: CompactSet, time_knots: Partition,
                      u_samples, v_samples) -> ValueGrid:
    """Backward recursion V_i(x) = max_v min_u V_{i+1}(x + dt f(t_i, x, u, v))."""
    return _solve(sys, cost, space, time_knots, u_samples, v_samples, "lower")


def solve_upper_value(sys: ControlSystem, cost, space: CompactSet, time_knots: Partition,
                      u_samples, v_samples) -> ValueGrid:
    """Backward recursion V_i(x) = min_u max_v V_{i+1}(x + dt f(t_i, x, u, v))."""
    return _solve(sys, cost, space, time_knots, u_samples, v_samples, "upper")


def query(vg: ValueGrid, t: float, x, with_flag: bool = False):
    """Value at the nearest time knot <= t, multilinear in space; outside points are clamped."""
    k = vg.knot_index(t)
    val, out = interpolate(vg.space, vg.values[k], np.asarray(x, dtype=float)[None, :])
    if out[0]:
        log.debug("query point %s clamped to the value grid", x)
    return (float(val[0]), bool(out[0])) if with_flag else float(val[0])


def level_set_project(vg: ValueGrid, t: float, y, level: float, bisection_steps: int = 40) -> np.ndarray:
    """Approximate nearest point of {x : V(t, x) <= level} to ``y``.

    The nearest sublevel grid node (ties: lexicographically smallest) is
    refined by bisection along the segment toward ``y``.  ``y`` itself is
    returned when it already lies in the set.
    """
    y = np.asarray(y, dtype=float)
    k = vg.knot_index(t)
    V = vg.values[k]

    def val(p):
        return interpolate(vg.space, V, p[None, :])[0][0]

    if val(y) <= level:
        return y.copy()
    cand = vg.sublevel_nodes(k, level)
    if len(cand) == 0:
        raise EmptyLevelSetError(f"no node with V <= {level} at t={t} (min {V.min():.6g})")
    d2 = np.einsum("ij,ij->i", cand - y, cand - y)
    w0 = cand[int(np.argmin(d2))]
    lo, hi = 0.0, 1.0
    seg = y - w0
    for _ in range(bisection_steps):
        mid = 0.5 * (lo + hi)
        if val(w0 + mid * seg) <= level:
            lo = mid
        else:
            hi = mid
    return w0 + lo * seg


def quasi_policy(vg: ValueGrid, sys: ControlSystem):
    """Stepwise feedback (i, x, v) -> u that is optimal for the lower-value grid."""
    if vg.kind != "lower":
        raise ValueError("quasi_policy needs a lower-value grid")
    knots = vg.time_knots.knots
    us = vg.u_samples

    def policy(i: int, x, v) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        t, dt = knots[i], knots[i + 1] - knots[i]
        f = sys.rhs(t, x[None, :], us, v[None, :])
        z, _ = interpolate(vg.space, vg.values[i + 1], x[None, :] + dt * f)
        return us[int(np.argmin(z))].copy()

    return policy


def u_stability_check(vg: ValueGrid, sys: ControlSystem, level: float, n: int = 100, seed: int = 0):
    """Spot-check that sublevel sets of the lower value are u-stable at grid accuracy.

    For ``n`` random (knot, node) pairs with V <= level and every sampled v,
    some sampled u must map the node within one cell diagonal of the next
    slice's sublevel node set.  Returns the list of failing (knot, node, v).
    """
    rng = np.random.default_rng(seed)
    knots = vg.time_knots.knots
    nodes = vg.nodes()
    tol = float(np.linalg.norm(vg.cell)) + 1e-12
    K = len(knots) - 1
    pairs = []
    for k in rng.permutation(K):
        idx = np.flatnonzero(vg.values[k].ravel() <= level)
        if len(idx):
            pairs.append((int(k), int(rng.choice(idx))))
        if len(pairs) >= n:
            break
    while len(pairs) < n and pairs:
        k = int(rng.integers(K))
        idx = np.flatnonzero(vg.values[k].ravel() <= level)
        if len(idx):
            pairs.append((k, int(rng.choice(idx))))
    failures = []
    for k, j in pairs:
        x = nodes[j]
        t, dt = knots[k], knots[k + 1] - knots[k]
        target = vg.sublevel_nodes(k + 1, level)
        for v in vg.v_samples:
            img = x[None, :] + dt * sys.rhs(t, x[None, :], vg.u_samples, v[None, :])
            ok = False
            for p in img:
                if len(target) and np.min(np.linalg.norm(target - p, axis=1)) <= tol:
                    ok = True
                    break
            if not ok:
                failures.append((k, x.copy(), v.copy()))
    return pairs, failures


# -- serialization ------------------------------------------------------------

_MAGIC = "guarctl-valuegrid"


def save_value_grid(vg: ValueGrid, path, comment: str | None = None, cost_spec: dict | None = None):
    if cost_spec is None and isinstance(vg.terminal_cost, TerminalCost):
        cost_spec = vg.terminal_cost.to_dict()
    header = {
        "kind": vg.kind,
        "knots": [io.fmt(t) for t in vg.time_knots.knots],
        "lower": [io.fmt(a) for a in vg.space.lower],
        "upper": [io.fmt(a) for a in vg.space.upper],
        "counts": list(vg.counts),
        "u_samples": [[io.fmt(a) for a in u] for u in vg.u_samples],
        "v_samples": [[io.fmt(a) for a in v] for v in vg.v_samples],
        "cost": cost_spec,
        "clamp_count": vg.clamp_count,
        "total_clamps": vg.total_clamps,
    }
    lines = []
    if comment is not None:
        lines.append(f"# {comment}")
    lines.append(f"{_MAGIC} {json.dumps(header, sort_keys=True)}")
    flat = vg.values.reshape(vg.values.shape[0], -1)
    for k in range(flat.shape[0]):
        lines.extend(f"{k} {j} {io.fmt(val)}" for j, val in enumerate(flat[k]))
    return io.atomic_write(path, "\n".join(lines) + "\n")


def load_value_grid(path) -> ValueGrid:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln and not ln.startswith("#")]
    magic, _, payload = lines[0].partition(" ")
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a value grid file")
    h = json.loads(payload)
    counts = tuple(h["counts"])
    knots = np.array([float(t) for t in h["knots"]])
    vals = np.array([float(ln.rsplit(" ", 1)[1]) for ln in lines[1:]])
    values = vals.reshape((len(knots),) + counts)
    values.flags.writeable = False
    cost = TerminalCost.from_dict(h["cost"]) if h.get("cost") else None
    return ValueGrid(
        time_knots=Partition(knots),
        space=CompactSet.grid([float(a) for a in h["lower"]], [float(a) for a in h["upper"]], counts),
        values=values,
        kind=h["kind"],
        u_samples=np.array([[float(a) for a in u] for u in h["u_samples"]]),
        v_samples=np.array([[float(a) for a in v] for v in h["v_samples"]]),
        terminal_cost=cost,
        clamp_count=int(h.get("clamp_count", 0)),
        total_clamps=int(h.get("total_clamps", 0)),
    )
