"""Compact sets used for controls, disturbances and initial states."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

MEMBERSHIP_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class CompactSet:
    """A compact subset of R^d.

    Three variants are supported: ``box`` (``lower``/``upper`` corners),
    ``finite`` (explicit ``points``) and ``grid`` (a box sampled with
    ``counts`` nodes per axis, endpoints included).
    """

    kind: str
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    points: np.ndarray | None = None
    counts: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind in ("box", "grid"):
            lo = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
            hi = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
            if lo.shape != hi.shape or lo.ndim != 1:
                raise ValueError("box corners must be vectors of equal length")
            if np.any(lo > hi):
                raise ValueError("box requires lower <= upper componentwise")
            lo.flags.writeable = False
            hi.flags.writeable = False
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)
            if self.kind == "grid":
                counts = tuple(int(c) for c in np.broadcast_to(self.counts, lo.shape))
                if any(c < 1 for c in counts):
                    raise ValueError("grid counts must be >= 1")
                object.__setattr__(self, "counts", counts)
        elif self.kind == "finite":
            pts = np.asarray(self.points, dtype=float)
            if pts.ndim == 1:
                pts = pts[:, None]
            if pts.ndim != 2 or len(pts) == 0:
                raise ValueError("finite set must be a nonempty list of vectors")
            pts = pts.copy()
            pts.flags.writeable = False
            object.__setattr__(self, "points", pts)
        else:
            raise ValueError(f"unknown set kind {self.kind!r}")

    @classmethod
    def box(cls, lower, upper) -> CompactSet:
        return cls("box", lower=lower, upper=upper)

    @classmethod
    def finite(cls, points) -> CompactSet:
        return cls("finite", points=points)

    @classmethod
    def grid(cls, lower, upper, counts) -> CompactSet:
        return cls("grid", lower=lower, upper=upper, counts=counts)

    @property
    def dim(self) -> int:
        if self.kind == "finite":
            return self.points.shape[1]
        return len(self.lower)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounding box of the set."""
        if self.kind == "finite":
            return self.points.min(axis=0), self.points.max(axis=0)
        return self.lower, self.upper

    def nodes(self) -> np.ndarray:
        """Points of a discrete set in lexicographic order (finite or grid only)."""
        if self.kind == "finite":
            return _lexsorted(self.points)
        if self.kind == "grid":
            return _lattice(self.lower, self.upper, self.counts)
        raise ValueError("a box has no finite node list; use epsilon_net or sample_grid")

    def sample_grid(self, per_axis: int) -> np.ndarray:
        """Regular sample of the set: box lattice with ``per_axis`` nodes, or the nodes themselves."""
        if self.kind == "box":
            return _lattice(self.lower, self.upper, (per_axis,) * self.dim)
        return self.nodes()

    def to_dict(self) -> dict:
        if self.kind == "finite":
            return {"finite": self.points.tolist()}
        d = {self.kind: [self.lower.tolist(), self.upper.tolist()]}
        if self.kind == "grid":
            d["counts"] = list(self.counts)
        return d


def _lexsorted(points: np.ndarray) -> np.ndarray:
    order = np.lexsort(points.T[::-1])
    return points[order]


def _lattice(lower, upper, counts) -> np.ndarray:
    axes = []
    for lo, hi, c in zip(lower, upper, counts):
        axes.append(np.array([0.5 * (lo + hi)]) if c == 1 or lo == hi else np.linspace(lo, hi, c))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def distance(s: CompactSet, point) -> float:
    """Infinity-norm distance from ``point`` to the set."""
    x = np.atleast_1d(np.asarray(point, dtype=float))
    if x.shape != (s.dim,):
        raise ValueError(f"dimension mismatch: set has dim {s.dim}, point has shape {x.shape}")
    if s.kind != "box":
        pts = s.nodes()
        return float(np.min(np.max(np.abs(pts - x), axis=1)))
    excess = np.maximum(s.lower - x, 0.0) + np.maximum(x - s.upper, 0.0)
    return float(np.max(excess)) if excess.size else 0.0


def contains(s: CompactSet, point, tol: float = MEMBERSHIP_TOL) -> bool:
    """True iff ``point`` lies within ``tol`` (infinity norm) of the set."""
    return distance(s, point) <= tol


def contains_many(s: CompactSet, points, tol: float = MEMBERSHIP_TOL) -> np.ndarray:
    """Vectorized membership for an array of shape (..., dim)."""
    x = np.asarray(points, dtype=float)
    if x.shape[-1] != s.dim:
        raise ValueError(f"dimension mismatch: set has dim {s.dim}, points have shape {x.shape}")
    if s.kind == "box":
        return np.all((x >= s.lower - tol) & (x <= s.upper + tol), axis=-1)
    pts = s.nodes()
    flat = x.reshape(-1, s.dim)
    out = np.zeros(len(flat), dtype=bool)
    for p in pts:
        out |= np.max(np.abs(flat - p), axis=1) <= tol
    return out.reshape(x.shape[:-1])


def epsilon_net(s: CompactSet, eps: float) -> np.ndarray:
    """Finite eps-net of the set in lexicographic order.

    Boxes get a lattice that includes the corners, with per-axis spacing at
    most ``2 * eps / sqrt(dim)``; finite and grid sets are their own net.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if s.kind != "box":
        return s.nodes()
    spacing = 2.0 * eps / math.sqrt(s.dim)
    counts = []
    for lo, hi in zip(s.lower, s.upper):
        width = hi - lo
        # guard against ceil(2.0000000000000004) style round-up on exact ratios
        cells = math.ceil(width / spacing - 1e-9) if width > 0 else 0
        counts.append(max(cells, 0) + 1)
    return _lattice(s.lower, s.upper, counts)


def covering_radius(s: CompactSet, net: np.ndarray, n_samples: int = 10_000, seed: int = 0) -> float:
    """Monte-Carlo estimate (from below) of sup over the set of the distance to ``net``.

    Box corners are always included in the sample.
    """
    rng = np.random.default_rng(seed)
    if s.kind == "box":
        pts = rng.uniform(s.lower, s.upper, size=(n_samples, s.dim))
        corners = np.array(list(itertools.product(*zip(s.lower, s.upper))))
        pts = np.vstack([pts, corners])
    else:
        pts = s.nodes()
    worst = 0.0
    net = np.asarray(net, dtype=float)
    rows = max(1, 2_000_000 // (len(net) * s.dim))
    for start in range(0, len(pts), rows):
        chunk = pts[start : start + rows]
        d = np.linalg.norm(chunk[:, None, :] - net[None, :, :], axis=-1).min(axis=1)
        worst = max(worst, float(d.max()))
    return worst
