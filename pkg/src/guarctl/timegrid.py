"""Partitions of the horizon and the test-action schedule of the eps-strategy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TIME_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Partition:
    knots: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float).copy()
        if k.ndim != 1 or len(k) < 2:
            raise ValueError("a partition needs at least two knots")
        if np.any(np.diff(k) <= 0):
            raise ValueError("partition knots must be strictly increasing")
        k.flags.writeable = False
        object.__setattr__(self, "knots", k)

    @property
    def n(self) -> int:
        """Number of intervals."""
        return len(self.knots) - 1

    @property
    def t0(self) -> float:
        return float(self.knots[0])

    @property
    def theta(self) -> float:
        return float(self.knots[-1])

    def __len__(self):
        return len(self.knots)

    def __eq__(self, other):
        return isinstance(other, Partition) and np.array_equal(self.knots, other.knots)

    __hash__ = None


def uniform_partition(t0: float, theta: float, n: int) -> Partition:
    if n < 1:
        raise ValueError("n must be >= 1")
    if not t0 < theta:
        raise ValueError("t0 < theta required")
    return Partition(np.linspace(t0, theta, n + 1))


def diam(part: Partition) -> float:
    return float(np.max(np.diff(part.knots)))


def diamin(part: Partition) -> float:
    """Smallest step among intervals 1..n-1; the final interval is excluded.

    With a single interval the range is empty and ``diam`` is returned.
    """
    steps = np.diff(part.knots)
    if len(steps) == 1:
        return float(steps[0])
    return float(np.min(steps[:-1]))


def locate(part: Partition, t: float, tol: float = TIME_TOL) -> int:
    """Largest knot index i with knots[i] <= t (``tol`` absorbs rounding)."""
    if t < part.t0 - tol or t > part.theta + tol:
        raise ValueError(f"t={t} outside [{part.t0}, {part.theta}]")
    return int(np.searchsorted(part.knots, t + tol, side="right") - 1)


def mesh_ratio(part: Partition) -> float:
    return diam(part) / diamin(part)


def thin_partition(part: Partition) -> Partition:
    """Drop knots so that diam/diamin <= 3 and diam grows at most threefold.

    Greedy left to right: keep t0, keep each knot at distance >= diam from the
    last kept knot, always keep theta, and absorb a too-short last interval
    into its predecessor.
    """
    k = part.knots
    d = diam(part)
    # relative slack so that rounding in linspace-made knots does not drop them;
    # the exact threshold is the fallback since it always meets the ratio bound
    for dd in (d * (1.0 - 1e-9), d):
        out = _greedy(k, dd)
        if mesh_ratio(out) <= 3.0:
            return out
    return out


def _greedy(k: np.ndarray, dd: float) -> Partition:
    kept = [k[0]]
    for t in k[1:-1]:
        if t - kept[-1] >= dd:
            kept.append(t)
    if len(kept) > 1 and k[-1] - kept[-1] < dd:
        kept.pop()
    kept.append(k[-1])
    return Partition(np.array(kept))


@dataclass(frozen=True, eq=False)
class TestSchedule:
    """Test windows [tau'_i, tau_i] and their sub-instants tau'_ij.

    ``primed[i-1]`` is tau'_i and ``sub[i-1]`` holds tau'_i0 .. tau'_i,n_eps
    for interior knots i = 1..n-1.
    """

    base: Partition
    eps: float
    n_eps: int
    primed: np.ndarray
    sub: np.ndarray

    @property
    def window_length(self) -> float:
        return self.eps * diamin(self.base)

    def window(self, i: int) -> np.ndarray:
        """Sub-instants tau'_i0..tau'_i,n_eps of interior knot i (1-based)."""
        if not 1 <= i <= self.base.n - 1:
            raise IndexError(f"knot {i} has no test window")
        return self.sub[i - 1]

    def test_measure(self) -> float:
        return float(np.sum(self.base.knots[1:-1] - self.primed))


def build_schedule(part: Partition, eps: float, n_eps: int) -> TestSchedule:
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    if n_eps < 1:
        raise ValueError("n_eps must be >= 1")
    if mesh_ratio(part) > 3.0 + 1e-12:
        raise ValueError(
            f"partition mesh ratio {mesh_ratio(part):.3g} exceeds 3; call thin_partition first"
        )
    tau = part.knots
    dm = diamin(part)
    interior = tau[1:-1]
    primed = interior - eps * dm
    j = np.arange(n_eps + 1)
    sub = primed[:, None] + j[None, :] * (interior - primed)[:, None] / n_eps
    if len(interior):
        sub[:, -1] = interior
    sub.flags.writeable = False
    primed.flags.writeable = False
    return TestSchedule(base=part, eps=float(eps), n_eps=int(n_eps), primed=primed, sub=sub)
