import json
import sys as _sys

import numpy as np
import pytest

from guarctl.disturbance import Family, Feedback, OpenLoop, Switching, constant_family, corner_family, sign_adversary_example
from guarctl.dynamics import get_system
from guarctl.integrate import Signal
from guarctl.io import read_csv
from guarctl.sim import (
    OpenLoopController,
    estimate_guarantee,
    run_closed_loop,
    simulate_batch,
    sweep,
    sweep_to_csv,
)
from guarctl.strategy import make_strategy
from guarctl.timegrid import uniform_partition
from guarctl.value import TerminalCost

PART = uniform_partition(0, 1, 10)


@pytest.fixture(scope="module")
def strat(example, coarse_lower):
    return make_strategy(example, coarse_lower, PART, 0.5, [0.0, 0.0])


def v_const(value):
    return OpenLoop(Signal.constant(value, 0, 1, "disturbance"))


def test_openloop_controller_closed_form(example, x2_cost):
    ctl = OpenLoopController(Signal.constant([1, -1], 0, 1), PART)
    m = run_closed_loop(example, ctl, v_const([1, 1]), PART, [0, 0], cost=x2_cost)
    assert m.cost == pytest.approx(-0.5, abs=1e-6)
    assert m.trajectory.final == pytest.approx([1.0, -0.5], abs=1e-6)


def test_zero_dynamics_cost_is_sigma_of_z0(coarse_lower):
    z = get_system("zero")
    sigma = TerminalCost(linear=(0.3, -2.0), constant=0.1)
    s = make_strategy(z, coarse_lower, PART, 0.5, [0.0, 0.0], level=10.0)
    for model in (v_const([0.2]), Switching([[1.0], [-1.0]], 3)):
        m = run_closed_loop(z, s, model, PART, [0.0, 0.0], seed=4, cost=sigma)
        assert m.cost == sigma(np.zeros(2))


def test_reproducible(example, strat):
    model = Switching(example.Q.nodes(), 5)
    a = run_closed_loop(example, strat, model, PART, [0, 0], seed=9)
    b = run_closed_loop(example, strat, model, PART, [0, 0], seed=9)
    assert a.trajectory.states.tobytes() == b.trajectory.states.tobytes()
    assert a.control.values.tobytes() == b.control.values.tobytes()
    assert a.cost == b.cost and a.fingerprint == b.fingerprint


def test_cost_consistency_and_ranges(example, strat):
    m = run_closed_loop(example, strat, Switching(example.Q.nodes(), 5), PART, [0, 0], seed=3)
    assert m.cost == strat.vg.terminal_cost(m.trajectory.final)
    assert np.all(np.abs(m.control.values) <= 1.0)
    assert m.control.start == 0.0 and m.control.end == 1.0
    assert m.disturbance_used.end == 1.0
    assert len(m.surrogate_log) == PART.n - 1
    assert m.fingerprint["seed"] == 3 and m.fingerprint["eps"] == 0.5


def test_batch_matches_single_bitwise(example, strat):
    model = Switching(example.Q.nodes(), 5)
    drivers = [__import__("guarctl.disturbance", fromlist=["realize"]).realize(model, s, (0, 1)) for s in range(6)]
    batch = simulate_batch(example, strat, drivers, [0, 0], strat.vg.terminal_cost)
    for d, r in zip(drivers, batch):
        single = simulate_batch(example, strat, [d], [0, 0], strat.vg.terminal_cost)[0]
        assert single["final"].tobytes() == r["final"].tobytes()


def test_recording_does_not_change_result(example, strat):
    d = [Signal([0, 0.37, 1], [[1, 1], [-1, 1]], "disturbance")]
    a = simulate_batch(example, strat, d, [0, 0], strat.vg.terminal_cost, record=False)[0]
    b = simulate_batch(example, strat, d, [0, 0], strat.vg.terminal_cost, record=True)[0]
    assert a["final"].tobytes() == b["final"].tobytes()


class _Spy(Signal):
    """Disturbance signal that records whether strategy code ever touches it."""

    touched_by_strategy = []

    def __getattribute__(self, name):
        f = _sys._getframe(1)
        while f is not None:
            if f.f_code.co_filename.endswith("strategy.py"):
                _Spy.touched_by_strategy.append(name)
            f = f.f_back
        return super().__getattribute__(name)


def test_strategy_is_blind_to_disturbance(example, strat):
    spy = _Spy([0.0, 0.5, 1.0], [[1.0, 1.0], [-1.0, -1.0]], "disturbance")
    _Spy.touched_by_strategy.clear()
    simulate_batch(example, strat, [spy], [0, 0], strat.vg.terminal_cost)
    assert _Spy.touched_by_strategy == []


def test_escape_is_reported(example, x2_cost):
    ctl = OpenLoopController(Signal.constant([1, 1], 0, 1), PART)
    with pytest.raises(Exception, match="G_bound"):
        simulate_batch(example, ctl, [Signal.constant([1, 1], 0, 1, "disturbance")], [0.5, 0.0], x2_cost)


def test_partition_mismatch(example, strat):
    with pytest.raises(ValueError, match="partition"):
        run_closed_loop(example, strat, v_const([1, 1]), uniform_partition(0, 1, 20), [0, 0])


def test_estimate_singleton_equals_run(example, strat):
    model = v_const([1, 1])
    est = estimate_guarantee(example, strat, model, PART, [0, 0], n_runs=5)
    assert est.max_cost == run_closed_loop(example, strat, model, PART, [0, 0]).cost
    assert est.n_runs == 1


def test_family_is_exhaustive_and_monotone(example, strat):
    fam = corner_family(example.Q.nodes(), 0, 1)
    e1 = estimate_guarantee(example, strat, fam, PART, [0, 0], n_runs=1)
    e50 = estimate_guarantee(example, strat, fam, PART, [0, 0], n_runs=50)
    assert e1.n_runs == 8 and np.array_equal(e1.costs, e50.costs)
    assert e1.max_cost == max(e1.costs) and e1.costs[e1.argmax] == e1.max_cost
    sub = Family(fam.signals[:3])
    assert estimate_guarantee(example, strat, sub, PART, [0, 0]).max_cost <= e1.max_cost


def test_family_member_choice(example, strat):
    fam = constant_family([[1, 1], [-1, 1]], 0, 1)
    est = estimate_guarantee(example, strat, fam, PART, [0, 0])
    runs = [run_closed_loop(example, strat, OpenLoop(s), PART, [0, 0]).cost for s in fam.signals]
    assert est.max_cost == max(runs)


def test_empirical_chain(example, strat):
    single = v_const([1, 1])
    fam = corner_family(example.Q.nodes(), 0, 1)
    a = estimate_guarantee(example, strat, single, PART, [0, 0]).max_cost
    b = estimate_guarantee(example, strat, fam, PART, [0, 0]).max_cost
    c = estimate_guarantee(example, strat, sign_adversary_example(), PART, [0, 0]).max_cost
    assert a <= b <= c


def test_switching_seeds_and_workers(example, strat):
    model = Switching(example.Q.nodes(), 5)
    e1 = estimate_guarantee(example, strat, model, PART, [0, 0], n_runs=12, base_seed=100, batch_size=5)
    assert e1.seeds == list(range(100, 112))
    e2 = estimate_guarantee(example, strat, model, PART, [0, 0], n_runs=12, base_seed=100, workers=2, batch_size=5)
    assert np.array_equal(e1.costs, e2.costs)
    with pytest.raises(ValueError):
        estimate_guarantee(example, strat, model, PART, [0, 0], n_runs=0)


def test_feedback_reaction_logged(example, strat):
    m = run_closed_loop(example, strat, sign_adversary_example(), PART, [0, 0])
    assert set(np.unique(m.disturbance_used.values[:, 1])) == {1.0}
    assert m.cost == pytest.approx(0.0, abs=1e-12)


def test_bundles(tmp_path, example, strat):
    m = run_closed_loop(example, strat, v_const([1, 1]), PART, [0, 0])
    paths = m.to_csv_bundle(tmp_path, comment="guarctl simulate fingerprint=abc")
    header, data = read_csv(paths["trajectory"])
    assert header == ["t", "x1", "x2"]
    assert open(paths["control"]).readline().startswith("# guarctl")
    summary = json.loads(open(paths["summary"]).read())
    assert summary["cost"] == m.cost
    est = estimate_guarantee(example, strat, corner_family(example.Q.nodes(), 0, 1), PART, [0, 0])
    files = est.to_files(tmp_path)
    header, rows = read_csv(files["runs"])
    assert header == ["run", "seed", "cost", "is_max"]
    assert rows.shape[0] == 8 and rows[:, 3].sum() == 1


def test_sweep_rows(tmp_path, example, coarse_lower):
    rows = sweep(example, [0, 0], [0.5], [0.1], v_const([1, 1]), 1, coarse_lower)
    assert len(rows) == 1 and rows[0].fingerprint["eps"] == 0.5 and rows[0].fingerprint["n_steps"] == 10
    rows = sweep(example, [0, 0], [0.5, 0.4], [0.1, 0.2], v_const([1, 1]), 1, coarse_lower, pairing="zip")
    assert [(r.eps, r.diam) for r in rows] == [(0.5, 0.1), (0.4, 0.2)]
    p = sweep_to_csv(rows, tmp_path / "s.csv")
    header, data = read_csv(p)
    assert header == ["eps", "diam", "estimate", "n_runs", "seed"] and data.shape == (2, 5)
    with pytest.raises(ValueError):
        sweep(example, [0, 0], [], [0.1], v_const([1, 1]), 1, coarse_lower)
    with pytest.raises(ValueError):
        sweep(example, [0, 0], [0.5], [0.1, 0.2], v_const([1, 1]), 1, coarse_lower, pairing="zip")
