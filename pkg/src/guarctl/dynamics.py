"""Control systems x' = f(t, x, u, v) and the built-in registry."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .sets import MEMBERSHIP_TOL, CompactSet, contains, contains_many

# rhs(t, x, u, v) must broadcast over leading axes: x (..., n), u (..., p),
# v (..., q), t scalar or (...,) -> (..., n).
Rhs = Callable[[object, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class StateEscapeError(RuntimeError):
    """A trajectory left the state bound G_bound."""


@dataclass(frozen=True, eq=False)
class ControlSystem:
    name: str
    rhs: Rhs
    state_dim: int
    control_dim: int
    disturbance_dim: int
    P: CompactSet
    Q: CompactSet
    G0: CompactSet
    horizon: tuple[float, float]
    g_bound: CompactSet
    params: dict | None = None
    # default DP grid box; must contain g_bound plus room for one DP step
    value_box: CompactSet | None = None

    def __post_init__(self):
        t0, theta = self.horizon
        if not t0 < theta:
            raise ValueError("horizon requires t0 < theta")
        if self.P.dim != self.control_dim or self.Q.dim != self.disturbance_dim:
            raise ValueError("control/disturbance set dimensions do not match the system")
        if self.G0.dim != self.state_dim or self.g_bound.dim != self.state_dim:
            raise ValueError("state set dimensions do not match the system")
        if self.g_bound.kind != "box":
            raise ValueError("g_bound must be an axis-aligned box")
        if self.value_box is None:
            pad = 0.1 * (self.g_bound.upper - self.g_bound.lower)
            object.__setattr__(
                self, "value_box", CompactSet.box(self.g_bound.lower - pad, self.g_bound.upper + pad)
            )

    @property
    def t0(self) -> float:
        return float(self.horizon[0])

    @property
    def theta(self) -> float:
        return float(self.horizon[1])

    def in_bound(self, x, tol: float = MEMBERSHIP_TOL) -> np.ndarray:
        return contains_many(self.g_bound, x, tol)

    def check_bound(self, t, x) -> None:
        ok = self.in_bound(x)
        if not np.all(ok):
            bad = np.asarray(x)[~ok] if np.ndim(ok) else np.asarray(x)
            raise StateEscapeError(
                f"{self.name}: state left G_bound=[{self.g_bound.lower}, {self.g_bound.upper}] "
                f"at t={np.min(t):.6g}: {np.atleast_2d(bad)[0]}"
            )


def eval_rhs(sys: ControlSystem, t: float, x, u, v) -> np.ndarray:
    """f(t, x, u, v) at a single point, rejecting controls outside P and disturbances outside Q."""
    t0, theta = sys.horizon
    if not t0 - MEMBERSHIP_TOL <= t <= theta + MEMBERSHIP_TOL:
        raise ValueError(f"t={t} outside horizon {sys.horizon}")
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if x.shape != (sys.state_dim,):
        raise ValueError(f"state must have shape ({sys.state_dim},)")
    if not contains(sys.P, u):
        raise ValueError(f"control {u} not in P")
    if not contains(sys.Q, v):
        raise ValueError(f"disturbance {v} not in Q")
    return np.asarray(sys.rhs(t, x, u, v), dtype=float)


def bound_kappa(sys: ControlSystem, samples_per_axis: int = 3) -> float:
    """Sampled estimate of max ||f|| over horizon x G_bound x P x Q.

    The maximum is taken over the union of regular grids with 2..samples_per_axis
    points per axis, so the result is non-decreasing in ``samples_per_axis``.
    It is a lower estimate of the true bound.
    """
    if samples_per_axis < 2:
        raise ValueError("samples_per_axis must be >= 2")
    best = 0.0
    for m in range(2, samples_per_axis + 1):
        ts = np.linspace(sys.t0, sys.theta, m)
        xs = sys.g_bound.sample_grid(m)
        us = sys.P.sample_grid(m)
        vs = sys.Q.sample_grid(m)
        for t in ts:
            X = xs[:, None, None, :]
            U = us[None, :, None, :]
            V = vs[None, None, :, :]
            X, U, V = _broadcast3(X, U, V)
            f = np.asarray(sys.rhs(t, X, U, V), dtype=float)
            best = max(best, float(np.linalg.norm(f, axis=-1).max()))
    return best


def _broadcast3(a, b, c):
    shape = np.broadcast_shapes(a.shape[:-1], b.shape[:-1], c.shape[:-1])
    return (
        np.broadcast_to(a, shape + a.shape[-1:]),
        np.broadcast_to(b, shape + b.shape[-1:]),
        np.broadcast_to(c, shape + c.shape[-1:]),
    )


# -- registry -----------------------------------------------------------------

_REGISTRY: dict[str, Callable[..., ControlSystem]] = {}


def register(name: str):
    def deco(builder):
        _REGISTRY[name] = builder
        return builder

    return deco


def get_system(name: str, **params) -> ControlSystem:
    try:
        builder = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown system {name!r}; known: {sorted(_REGISTRY)}") from None
    return builder(**params)


def registered_systems() -> list[str]:
    return sorted(_REGISTRY)


def _example_rhs(t, x, u, v):
    x1 = x[..., 0]
    d1 = u[..., 0] * v[..., 0]
    d2 = np.maximum(0.0, x1) * u[..., 1] * v[..., 1]
    return np.stack(np.broadcast_arrays(d1, d2), axis=-1)


@register("example2x2")
def example2x2(bound: float = 1.1, z0=(0.0, 0.0)) -> ControlSystem:
    """x1' = u1 v1, x2' = max(0, x1) u2 v2 on [0, 1]; u in [-1,1]^2, v in {-1,1}^2.

    From the origin the lower (quasi-strategy) value of x2(1) is -0.5 and the
    upper value is 0.
    """
    return ControlSystem(
        name="example2x2",
        rhs=_example_rhs,
        state_dim=2,
        control_dim=2,
        disturbance_dim=2,
        P=CompactSet.box([-1.0, -1.0], [1.0, 1.0]),
        Q=CompactSet.finite(list(itertools.product([-1.0, 1.0], repeat=2))),
        G0=CompactSet.finite([list(z0)]),
        horizon=(0.0, 1.0),
        g_bound=CompactSet.box([-bound, -bound], [bound, bound]),
        params={"bound": bound, "z0": list(z0)},
        value_box=CompactSet.box([-round(bound + 0.1, 12)] * 2, [round(bound + 0.1, 12)] * 2),
    )


def _separated_rhs(t, x, u, v):
    return np.broadcast_to(u + v, np.broadcast_shapes(x.shape, u.shape, v.shape)).astype(float)


@register("separated1d")
def separated1d(bound: float = 2.0, z0=(0.0,), initial_box: float | None = None) -> ControlSystem:
    """x' = u + v on [0, 1] with u, v in [-1, 1]; the minimax swap holds for this system."""
    g0 = (
        CompactSet.finite([list(z0)])
        if initial_box is None
        else CompactSet.box([-initial_box], [initial_box])
    )
    return ControlSystem(
        name="separated1d",
        rhs=_separated_rhs,
        state_dim=1,
        control_dim=1,
        disturbance_dim=1,
        P=CompactSet.box([-1.0], [1.0]),
        Q=CompactSet.box([-1.0], [1.0]),
        G0=g0,
        horizon=(0.0, 1.0),
        g_bound=CompactSet.box([-bound], [bound]),
        params={"bound": bound, "z0": list(z0), "initial_box": initial_box},
    )


def _zero_rhs(t, x, u, v):
    shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1], v.shape[:-1]) + x.shape[-1:]
    return np.zeros(shape)


@register("zero")
def zero_system(dim: int = 2, bound: float = 1.0, z0=None) -> ControlSystem:
    """x' = 0; every strategy and disturbance leaves the state at z0."""
    z0 = [0.0] * dim if z0 is None else list(z0)
    return ControlSystem(
        name="zero",
        rhs=_zero_rhs,
        state_dim=dim,
        control_dim=1,
        disturbance_dim=1,
        P=CompactSet.box([-1.0], [1.0]),
        Q=CompactSet.box([-1.0], [1.0]),
        G0=CompactSet.finite([z0]),
        horizon=(0.0, 1.0),
        g_bound=CompactSet.box([-bound] * dim, [bound] * dim),
        params={"dim": dim, "bound": bound, "z0": z0},
    )
