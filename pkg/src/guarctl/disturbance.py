"""Disturbance models: open-loop signals, finite families, bounded-switch families, feedback adversaries."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .integrate import Signal
from .sets import MEMBERSHIP_TOL, CompactSet, contains_many


@dataclass(frozen=True, eq=False)
class OpenLoop:
    signal: Signal
    tag = "openloop"


@dataclass(frozen=True, eq=False)
class Family:
    """Finite family of open-loop signals; ``realize`` draws one member per seed."""

    signals: tuple
    tag = "l2family"

    def __post_init__(self):
        if len(self.signals) == 0:
            raise ValueError("family must be nonempty")
        object.__setattr__(self, "signals", tuple(self.signals))


@dataclass(frozen=True, eq=False)
class Switching:
    """Piecewise-constant signals with at most ``max_switches`` switches and values from ``values``.

    Such a family has uniformly bounded variation, hence is relatively
    compact in L2.
    """

    values: np.ndarray
    max_switches: int
    tag = "l2family"

    def __post_init__(self):
        vals = np.atleast_2d(np.asarray(self.values, dtype=float))
        if len(vals) == 0:
            raise ValueError("need at least one disturbance value")
        if self.max_switches < 0:
            raise ValueError("max_switches must be >= 0")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True, eq=False)
class Feedback:
    """Adversary reacting to (t, x, u_current); must broadcast over leading axes."""

    reaction: Callable
    dim: int
    tag = "feedback"


Model = OpenLoop | Family | Switching | Feedback


def realize(model: Model, seed: int, horizon: tuple[float, float]):
    """A Signal for open-loop style models, the reaction function for feedback models."""
    if isinstance(model, OpenLoop):
        return model.signal
    if isinstance(model, Family):
        rng = np.random.default_rng(seed)
        return model.signals[int(rng.integers(len(model.signals)))]
    if isinstance(model, Switching):
        rng = np.random.default_rng(seed)
        t0, theta = horizon
        k = int(rng.integers(model.max_switches + 1))
        times = np.unique(rng.uniform(t0, theta, size=k))
        times = times[(times > t0) & (times < theta)]
        vals = model.values[rng.integers(len(model.values), size=len(times) + 1)]
        return Signal(np.concatenate([[t0], times, [theta]]), vals, "disturbance")
    if isinstance(model, Feedback):
        return model.reaction
    raise TypeError(f"unknown disturbance model {type(model).__name__}")


def check_range(Q: CompactSet, values, tol: float = MEMBERSHIP_TOL) -> bool:
    return bool(np.all(contains_many(Q, np.atleast_2d(values), tol)))


def worst_in_family(family, evaluate: Callable[[Signal], float]):
    """Exhaustive maximization of ``evaluate`` over a finite family (first on ties)."""
    signals = family.signals if isinstance(family, Family) else tuple(family)
    if not signals:
        raise ValueError("family is empty")
    best, best_cost = None, -np.inf
    for s in signals:
        c = float(evaluate(s))
        if c > best_cost:
            best, best_cost = s, c
    return best, best_cost


def _sign_reaction(t, x, u):
    u = np.asarray(u, dtype=float)
    v1 = np.where(u[..., 0] >= 0.0, -1.0, 1.0)
    return np.stack([v1, np.ones_like(v1)], axis=-1)


def sign_adversary_example() -> Feedback:
    """v1 = -sign(u1) (sign 0 -> +1), v2 = +1: cancels any x1 progress of the example system."""
    return Feedback(_sign_reaction, 2)


def corner_family(Q_points, t0: float, theta: float, switch_at: float | None = None) -> Family:
    """Constant signals at every point of Q plus one-switch signals c -> -c at ``switch_at``.

    For Q = {-1, 1}^2 this gives 4 constant and 4 one-switch members.
    """
    pts = np.atleast_2d(np.asarray(Q_points, dtype=float))
    ts = 0.5 * (t0 + theta) if switch_at is None else switch_at
    sigs = [Signal.constant(p, t0, theta, "disturbance") for p in pts]
    sigs += [Signal([t0, ts, theta], [p, -p], "disturbance") for p in pts]
    return Family(tuple(sigs))


def constant_family(points, t0: float, theta: float) -> Family:
    return Family(tuple(Signal.constant(p, t0, theta, "disturbance") for p in np.atleast_2d(points)))


def product_values(values_per_axis) -> np.ndarray:
    return np.array(list(itertools.product(*values_per_axis)), dtype=float)
