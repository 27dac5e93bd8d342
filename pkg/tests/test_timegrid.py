import itertools

import numpy as np
import pytest

from guarctl.timegrid import (
    Partition,
    build_schedule,
    diam,
    diamin,
    locate,
    mesh_ratio,
    thin_partition,
    uniform_partition,
)


def test_uniform_partition():
    assert uniform_partition(0, 1, 4).knots.tolist() == [0, 0.25, 0.5, 0.75, 1]
    assert uniform_partition(0, 1, 1).knots.tolist() == [0, 1]
    p = uniform_partition(0, 2, 8)
    assert diam(p) == pytest.approx(0.25) and diamin(p) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        uniform_partition(0, 1, 0)
    with pytest.raises(ValueError):
        uniform_partition(1, 1, 3)


def test_partition_validation():
    with pytest.raises(ValueError):
        Partition([0.0])
    with pytest.raises(ValueError):
        Partition([0.0, 0.5, 0.5, 1.0])


def test_diam_locate_examples():
    p = uniform_partition(0, 1, 4)
    assert diam(p) == 0.25 and diamin(p) == 0.25
    assert locate(p, 0.6) == 2
    assert locate(p, 1.0) == 4
    assert locate(p, 0.0) == 0
    with pytest.raises(ValueError):
        locate(p, 1.1)
    with pytest.raises(ValueError):
        locate(p, -0.1)


def test_diamin_excludes_final_interval():
    p = Partition([0, 0.1, 0.5, 1])
    assert diamin(p) == pytest.approx(0.1)
    # a tiny final step does not count
    assert diamin(Partition([0, 0.4, 0.8, 0.81])) == pytest.approx(0.4)


def test_diamin_single_interval():
    assert diamin(Partition([0, 1])) == 1.0


def test_locate_on_knots_is_identity():
    p = Partition(np.sort(np.random.default_rng(1).uniform(0, 1, 30)).tolist() + [1.0])
    p = Partition(np.concatenate([[0.0], p.knots]))
    for i, t in enumerate(p.knots):
        assert locate(p, t) == i


def test_thin_examples():
    u = uniform_partition(0, 1, 100)
    assert thin_partition(u) == u
    assert thin_partition(Partition([0, 0.01, 0.5, 1])).knots.tolist() == [0, 0.5, 1]
    assert thin_partition(Partition([0, 0.4, 0.5, 0.9, 1])).knots.tolist() == [0, 0.4, 1]


def _postconditions(orig, out):
    ok_subset = set(out.knots.tolist()) <= set(orig.knots.tolist())
    ends = out.t0 == orig.t0 and out.theta == orig.theta
    return ok_subset and ends and mesh_ratio(out) <= 3.0 and diam(out) <= 3.0 * diam(orig)


def test_thin_against_exhaustive_subsets():
    # oracle: some subset always satisfies the bounds; greedy must find one
    rng = np.random.default_rng(7)
    for _ in range(200):
        n = rng.integers(1, 8)
        k = np.concatenate([[0.0], np.sort(rng.uniform(0, 1, n - 1)), [1.0]])
        if np.any(np.diff(k) <= 0):
            continue
        p = Partition(k)
        interior = k[1:-1]
        feasible = False
        for r in range(len(interior) + 1):
            for sub in itertools.combinations(interior, r):
                q = Partition([0.0, *sub, 1.0])
                if _postconditions(p, q):
                    feasible = True
                    break
            if feasible:
                break
        assert feasible
        assert _postconditions(p, thin_partition(p))


def test_thin_property_random():
    rng = np.random.default_rng(2024)
    for _ in range(10_000):
        n = int(rng.integers(1, 40))
        style = rng.integers(3)
        if style == 0:
            steps = rng.uniform(0, 1, n)
        elif style == 1:
            steps = rng.exponential(1.0, n) ** 3
        else:
            steps = np.where(rng.random(n) < 0.2, rng.uniform(1e-4, 1e-2, n), rng.uniform(0.5, 1, n))
        steps = steps + 1e-9
        t0 = rng.uniform(-5, 5)
        k = t0 + np.concatenate([[0.0], np.cumsum(steps)])
        p = Partition(k)
        out = thin_partition(p)
        assert _postconditions(p, out), k


def test_schedule_example():
    s = build_schedule(Partition([0, 0.5, 1]), 0.2, 2)
    assert s.primed.tolist() == pytest.approx([0.4])
    assert s.window(1).tolist() == pytest.approx([0.4, 0.45, 0.5])
    assert s.window(1)[-1] == 0.5
    with pytest.raises(IndexError):
        s.window(2)


def test_schedule_rejects_bad_inputs():
    with pytest.raises(ValueError, match="mesh ratio"):
        build_schedule(Partition([0, 0.01, 0.5, 1]), 0.1, 4)
    for eps in (0.0, 1.0, 1.5):
        with pytest.raises(ValueError):
            build_schedule(uniform_partition(0, 1, 4), eps, 4)


def test_schedule_eps_to_zero():
    p = uniform_partition(0, 1, 10)
    for eps in (1e-3, 1e-6, 1e-9):
        s = build_schedule(p, eps, 3)
        assert np.max(p.knots[1:-1] - s.primed) <= eps * 0.1 + 1e-15


@pytest.mark.parametrize("eps", [0.05, 0.2, 0.9])
def test_schedule_windows(eps):
    p = thin_partition(Partition([0, 0.1, 0.25, 0.3, 0.5, 0.55, 0.8, 1.0]))
    s = build_schedule(p, eps, 7)
    tau = p.knots
    for i in range(1, p.n):
        w = s.window(i)
        assert w[0] == s.primed[i - 1]
        assert np.all(np.diff(w) > 0)
        assert np.all((w > tau[i - 1]) & (w <= tau[i]))
        assert np.allclose(np.diff(w), (tau[i] - s.primed[i - 1]) / 7)
    # disjoint, total length
    starts, ends = s.primed, tau[1:-1]
    assert np.all(starts[1:] >= ends[:-1])
    assert s.test_measure() == pytest.approx((p.n - 1) * eps * diamin(p))
    assert s.test_measure() <= eps * (p.theta - p.t0) + 1e-12
