from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctm_mpc.mpc import build_inflow_qp
from ctm_mpc.solver import (
    InfeasibleError,
    InflowQP,
    PlanSearchProblem,
    evaluate_plan,
    exhaustive_node_count,
    minimal_margin,
    search_signal_plan,
    solve_integer_qp,
    solve_qp_relaxation,
)

from oracles import active_set_qp, benchmark_search_problem, brute_force_qp, exhaustive_plan_search, random_qp


def _scalar(hi):
    return InflowQP(np.array([[2.0]]), np.array([-12.0]), np.zeros((0, 1)), np.zeros(0), np.zeros(1), np.array([hi]), const=36.0)


def test_relaxation_interior_scalar():
    rel = solve_qp_relaxation(_scalar(12.0))
    assert rel.u[0] == pytest.approx(6.0)
    assert rel.objective == pytest.approx(0.0)
    assert rel.kkt_residual <= 1e-12


def test_relaxation_active_bound_scalar():
    rel = solve_qp_relaxation(_scalar(4.0))
    assert rel.u[0] == pytest.approx(4.0)
    assert rel.kkt_residual <= 1e-7


def test_relaxation_matches_active_set_enumeration():
    rng = np.random.default_rng(8)
    for _ in range(12):
        qp = random_qp(rng, 6, 5, rows=2, rank=6)
        rel = solve_qp_relaxation(qp)
        assert rel.kkt_residual <= 1e-7
        assert rel.objective == pytest.approx(active_set_qp(qp), abs=1e-6)


def test_relaxation_bounds_integer_optimum():
    rng = np.random.default_rng(9)
    for _ in range(30):
        qp = random_qp(rng, 3, 4)
        obj, _ = brute_force_qp(qp)
        assert solve_qp_relaxation(qp).objective <= obj + 1e-9


def test_relaxation_infeasible_box_signalled():
    qp = InflowQP(np.eye(2), np.zeros(2), np.ones((1, 2)), np.array([-1.0]), np.zeros(2), np.full(2, 3.0))
    with pytest.raises(InfeasibleError):
        solve_qp_relaxation(qp)
    with pytest.raises(InfeasibleError):
        solve_integer_qp(qp)


def test_integer_qp_matches_enumeration_small():
    rng = np.random.default_rng(1)
    for _ in range(60):
        qp = random_qp(rng, 4, 4)
        obj, arg = brute_force_qp(qp)
        sol = solve_integer_qp(qp)
        assert abs(sol.objective - obj) <= 1e-9 * max(1.0, abs(obj))
        assert tuple(sol.u) == arg


def test_integer_qp_prefers_lexicographically_smallest_tie():
    # f(u) = (u1 + u2 - 3)^2 has minimizers (0,3), (1,2), (2,1), (3,0)
    qp = InflowQP(2 * np.ones((2, 2)), np.array([-6.0, -6.0]), np.zeros((0, 2)), np.zeros(0), np.zeros(2), np.full(2, 4.0), const=9.0)
    assert tuple(solve_integer_qp(qp).u) == (0, 3)


def test_integer_qp_large_theta_returns_nominal(bench_spec, benchmark):
    T = 4
    As = [bench_spec.tendency((0, 0, 0, 0))] * T
    u_nom = np.tile([6.0, 6.0, 8.0], (T, 1))
    qp, _, _ = build_inflow_qp(bench_spec, benchmark.x0, As, np.ones((T, 14)), np.full((T, 14), np.inf),
                               1e6 * np.eye(3), u_nom, np.full(3, 16.0), range(3), u_nom)
    np.testing.assert_array_equal(solve_integer_qp(qp).u.reshape(T, 3), u_nom)


def test_integer_qp_zero_lane_weight_returns_nominal(bench_spec, benchmark):
    T = 3
    As = [bench_spec.tendency((1, 0, 1, 0))] * T
    u_nom = np.tile([6.0, 6.0, 8.0], (T, 1))
    qp, _, _ = build_inflow_qp(bench_spec, benchmark.x0, As, np.zeros((T, 14)), np.full((T, 14), np.inf),
                               np.eye(3), u_nom, np.full(3, 16.0), range(3), u_nom)
    sol = solve_integer_qp(qp)
    np.testing.assert_array_equal(sol.u.reshape(T, 3), u_nom)
    assert sol.objective == pytest.approx(0.0, abs=1e-9)


def test_integer_qp_network_instances_match_enumeration(bench_spec):
    # T_f = 2, two free inlets, u_max = 4: the 5^4 box is enumerated
    rng = np.random.default_rng(4)
    actions = bench_spec.actions()
    for _ in range(20):
        x0 = rng.integers(0, 18, 14)
        As = [bench_spec.tendency(actions[int(rng.integers(16))]) for _ in range(2)]
        u_nom = np.tile(rng.integers(0, 5, 3).astype(float), (2, 1))
        caps = np.full((2, 14), float(rng.integers(18, 26)))
        try:
            qp, _, _ = build_inflow_qp(bench_spec, x0, As, np.ones((2, 14)), caps, 50 * np.eye(3), u_nom,
                                       np.full(3, 4.0), [0, 2], u_nom)
        except ValueError:
            continue
        obj, arg = brute_force_qp(qp)
        if obj is None:
            with pytest.raises(InfeasibleError):
                solve_integer_qp(qp)
            continue
        sol = solve_integer_qp(qp)
        assert abs(sol.objective - obj) <= 1e-9 * max(1.0, abs(obj))
        assert tuple(sol.u) == arg


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_integer_qp_exact_property(seed):
    rng = np.random.default_rng(seed)
    qp = random_qp(rng, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    obj, arg = brute_force_qp(qp)
    sol = solve_integer_qp(qp)
    assert tuple(sol.u) == arg
    assert sol.objective == pytest.approx(obj, rel=1e-9, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_relaxation_kkt_property(seed):
    rng = np.random.default_rng(seed)
    qp = random_qp(rng, int(rng.integers(1, 7)), int(rng.integers(1, 9)))
    rel = solve_qp_relaxation(qp)
    assert rel.kkt_residual <= 1e-7
    assert qp.feasible(rel.u, tol=1e-7)


def _two_action_problem(cost_a: float, cost_b: float) -> PlanSearchProblem:
    # lane 1 drains completely under action 0 and keeps its density under action 1;
    # lane 2 keeps its density always. Stage weights make the k = 1 state cost
    # cost_a or cost_b; step 2 has a single action.
    A_drain = np.diag([0.0, 1.0])
    A_hold = np.eye(2)
    x0 = np.array([1.0, 1.0])
    w = np.array([[0.0, 0.0], [cost_b - cost_a, cost_a]])
    return PlanSearchProblem(x0, (np.stack([A_drain, A_hold]), np.stack([A_hold])), np.zeros((2, 2)), w,
                             np.full((2, 2), np.inf), np.zeros(2))


def test_search_picks_cheaper_action():
    res = search_signal_plan(_two_action_problem(30.0, 40.0))
    assert res.plan == (0, 0) and res.cost == pytest.approx(30.0)
    res = search_signal_plan(_two_action_problem(40.0, 30.0))
    assert res.plan[0] == 1


def test_search_tie_breaks_lexicographically():
    A = np.eye(1)
    prob = PlanSearchProblem(np.array([3.0]), (np.stack([A, A, A]),) * 2, np.zeros((2, 1)), np.ones((2, 1)),
                             np.full((2, 1), np.inf), np.zeros(1))
    assert search_signal_plan(prob, warm_start=[2, 1]).plan == (0, 0)


def test_search_prunes_infeasible_prefix():
    # one lane with three actions; only the draining one keeps the first
    # upper band under its cap, so the two other subtrees are never expanded
    mats = np.stack([np.eye(1) * 0.5, np.eye(1), np.eye(1) * 0.9])
    prob = PlanSearchProblem(np.array([5.0]), (mats, mats), np.zeros((2, 1)), np.ones((2, 1)),
                             np.array([[5.5], [6.0]]), np.array([1.0]))
    res = search_signal_plan(prob)
    assert res.plan == (0, 0)
    assert res.nodes == 6 < 3 ** 2 < exhaustive_node_count(prob)
    # the band grows by d_max each step, so a cap below it at step 2 rules out every plan
    with pytest.raises(InfeasibleError):
        search_signal_plan(prob.with_caps(np.array([[5.5], [1.5]])))


def test_band_start_above_state_tightens_caps_only():
    # the upper band starts at 7 instead of 5: the holding action breaks the
    # first cap, while costs still follow the point state
    mats = np.stack([np.eye(1) * 0.5, np.eye(1)])
    base = PlanSearchProblem(np.array([5.0]), (mats,), np.zeros((1, 1)), np.ones((1, 1)), np.array([[6.5]]), np.zeros(1))
    wide = PlanSearchProblem(base.x0, base.choices, base.inflow, base.weights, base.caps, base.d_max, np.array([7.0]))
    assert evaluate_plan(base, [1]).feasible and not evaluate_plan(wide, [1]).feasible
    assert evaluate_plan(wide, [0]).upper[1][0] == 4.0 and evaluate_plan(wide, [0]).df[1][0] == 3.0
    assert evaluate_plan(wide, [0]).cost == evaluate_plan(base, [0]).cost
    assert wide.with_caps(wide.caps).x0_upper[0] == 7.0
    assert minimal_margin(wide.with_caps(np.array([[3.0]])))[0] == 1


def test_search_with_band_start_matches_exhaustive(bench_spec):
    rng = np.random.default_rng(21)
    for _ in range(10):
        x0 = rng.integers(0, 15, 14)
        p = benchmark_search_problem(bench_spec, x0, T=3)
        p = PlanSearchProblem(p.x0, p.choices, p.inflow, p.weights, p.caps, p.d_max, p.x0 + rng.integers(0, 3, 14))
        ref = exhaustive_plan_search(p)
        if ref is None:
            with pytest.raises(InfeasibleError):
                search_signal_plan(p)
            continue
        res = search_signal_plan(p)
        assert res.plan == ref[0] and res.cost == pytest.approx(ref[1], rel=1e-12)


def test_inflow_qp_band_start_shifts_cap_rows_only(bench_spec):
    x0 = np.full(14, 5)
    As = [bench_spec.tendency(bench_spec.actions()[3])] * 2
    args = (np.ones((2, 14)), np.full((2, 14), 20.0), 50 * np.eye(3), np.full((2, 3), 4.0), np.full(3, 8.0), [0, 1, 2],
            np.full((2, 3), 4.0))
    qp, c_up, _ = build_inflow_qp(bench_spec, x0, As, *args)
    qp2, c_up2, _ = build_inflow_qp(bench_spec, x0, As, *args, x0_upper=x0 + 2)
    assert np.allclose(qp.H, qp2.H) and np.allclose(qp.g, qp2.g) and qp.const == qp2.const
    assert np.all(c_up2 >= c_up) and np.all(qp2.h <= qp.h)
    assert np.allclose(c_up2[1] - c_up[1], As[0] @ np.full(14, 2.0))


def test_search_node_count_below_leaf_count_when_pruning(bench_spec):
    rng = np.random.default_rng(12)
    hit = 0
    for _ in range(30):
        x0 = rng.integers(0, 19, 14)
        prob = benchmark_search_problem(bench_spec, x0)
        ref = exhaustive_plan_search(prob)
        if ref is None:
            continue
        res = search_signal_plan(prob)
        assert evaluate_plan(prob, res.plan).feasible
        assert res.nodes < 16 ** 4
        hit += 1
    assert hit > 0


def test_search_matches_exhaustive_on_benchmark(bench_spec):
    rng = np.random.default_rng(21)
    infeasible = 0
    for _ in range(25):
        x0 = rng.integers(0, 15, 14)
        prob = benchmark_search_problem(bench_spec, x0)
        ref = exhaustive_plan_search(prob)
        if ref is None:
            infeasible += 1
            with pytest.raises(InfeasibleError):
                search_signal_plan(prob)
            continue
        res = search_signal_plan(prob)
        assert res.plan == ref[0]
        assert res.cost == pytest.approx(ref[1], rel=1e-12)
    assert 0 < infeasible < 25


def test_warm_start_does_not_change_optimum(bench_spec):
    rng = np.random.default_rng(2)
    x0 = rng.integers(0, 16, 14)
    prob = benchmark_search_problem(bench_spec, x0)
    cold = search_signal_plan(prob)
    warm = search_signal_plan(prob, warm_start=[5, 3, 9, 1])
    assert cold.plan == warm.plan and warm.nodes <= cold.nodes + 4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_search_exact_property(seed):
    rng = np.random.default_rng(seed)
    N, T = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    choices = []
    for _ in range(T):
        mats = []
        for _ in range(int(rng.integers(1, 4))):
            A = rng.uniform(0, 1, (N, N))
            mats.append(A / np.maximum(A.sum(axis=0), 1.0))
        choices.append(np.stack(mats))
    prob = PlanSearchProblem(rng.integers(0, 10, N).astype(float), tuple(choices), rng.integers(0, 4, (T, N)).astype(float),
                             rng.integers(0, 3, (T, N)).astype(float), rng.integers(6, 14, (T, N)).astype(float),
                             rng.integers(0, 3, N).astype(float))
    ref = exhaustive_plan_search(prob)
    if ref is None:
        with pytest.raises(InfeasibleError):
            search_signal_plan(prob)
        return
    res = search_signal_plan(prob)
    assert res.plan == ref[0]
    assert res.cost == pytest.approx(ref[1])


def test_minimal_margin_restores_feasibility(bench_spec):
    x0 = np.full(14, 20)
    prob = benchmark_search_problem(bench_spec, x0)
    with pytest.raises(InfeasibleError):
        search_signal_plan(prob)
    m, _ = minimal_margin(prob)
    assert m > 0
    search_signal_plan(prob.with_caps(prob.caps + m))
    with pytest.raises(InfeasibleError):
        search_signal_plan(prob.with_caps(prob.caps + m - 1))
