"""Pruned exhaustive search over signal-plan sequences.

The search walks plans depth-first in index order. A prefix whose upper band
leaves the caps is dropped with its whole subtree, and a prefix whose partial
stage cost already exceeds the incumbent is dropped too (stage costs are
nonnegative, so partial sums bound every extension).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..network import round_nonneg
from .qp import InfeasibleError


@dataclass(frozen=True)
class PlanSearchProblem:
    """One step-2 problem on the rounded model.

    ``choices[k]`` stacks the candidate tendency matrices for step k, shape
    (n_k, N, N). ``inflow[k]`` is the fixed ``B U(t+k)``. ``weights[k]`` are
    the stage weights of ``x_df(k)`` for k = 0..T-1 and ``caps[k]`` the
    per-lane limits on the upper band at step k + 1 (``inf`` = free).
    ``x0_upper`` starts the upper band when the current state is only known
    up to an upper bound; it defaults to ``x0``.
    """

    x0: np.ndarray
    choices: tuple
    inflow: np.ndarray
    weights: np.ndarray
    caps: np.ndarray
    d_max: np.ndarray
    x0_upper: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return len(self.choices)

    def sizes(self) -> list[int]:
        return [len(c) for c in self.choices]

    def with_caps(self, caps) -> "PlanSearchProblem":
        return PlanSearchProblem(self.x0, self.choices, self.inflow, self.weights, np.asarray(caps, dtype=float),
                                 self.d_max, self.x0_upper)

    def upper_start(self) -> np.ndarray:
        return np.asarray(self.x0 if self.x0_upper is None else self.x0_upper, dtype=float)


@dataclass
class PlanEvaluation:
    cost: float
    feasible: bool
    df: np.ndarray  # (T + 1, N)
    upper: np.ndarray  # (T + 1, N)


@dataclass
class SearchResult:
    plan: tuple[int, ...]
    cost: float
    nodes: int
    df: np.ndarray


def evaluate_plan(problem: PlanSearchProblem, plan: Sequence[int]) -> PlanEvaluation:
    """Cost, feasibility and traces of one complete plan."""
    T = problem.horizon
    x = np.asarray(problem.x0, dtype=float)
    df = np.empty((T + 1, len(x)))
    up = np.empty((T + 1, len(x)))
    df[0] = x
    up[0] = problem.upper_start()
    feasible = True
    for k, a in enumerate(plan):
        A = problem.choices[k][a]
        df[k + 1] = round_nonneg(A @ df[k] + problem.inflow[k])
        up[k + 1] = np.maximum(round_nonneg(A @ up[k] + problem.inflow[k]) + problem.d_max, 0.0)
        if np.any(up[k + 1] > problem.caps[k]):
            feasible = False
    cost = float(sum(problem.weights[k] @ df[k] ** 2 for k in range(T)))
    return PlanEvaluation(cost, feasible, df, up)


def exhaustive_node_count(problem: PlanSearchProblem) -> int:
    """Tree nodes an unpruned search evaluates: sum over depths of prefix counts."""
    total, width = 0, 1
    for n in problem.sizes():
        width *= n
        total += width
    return total


def search_signal_plan(problem: PlanSearchProblem, warm_start: Sequence[int] | None = None, tie_tol: float = 1e-12) -> SearchResult:
    """Cost-minimizing feasible plan; lexicographically smallest among ties.

    The warm start, when feasible, seeds the incumbent before the walk.
    Raises :class:`InfeasibleError` when every plan leaves the caps.
    """
    T = problem.horizon
    choices = problem.choices
    bu = np.asarray(problem.inflow, dtype=float)
    w = np.asarray(problem.weights, dtype=float)
    caps = np.asarray(problem.caps, dtype=float)
    offset = np.stack([np.zeros_like(problem.d_max, dtype=float), np.asarray(problem.d_max, dtype=float)], axis=1)

    best = {"cost": math.inf, "plan": None, "nodes": 0}
    if warm_start is not None and len(warm_start) == T and all(0 <= a < n for a, n in zip(warm_start, problem.sizes())):
        ev = evaluate_plan(problem, warm_start)
        if ev.feasible:
            best["cost"], best["plan"] = ev.cost, tuple(int(a) for a in warm_start)

    def promising(cost: float, prefix: tuple) -> bool:
        if best["plan"] is None:
            return True
        gap = tie_tol * max(1.0, abs(best["cost"]))
        if cost < best["cost"] - gap:
            return True
        if cost > best["cost"] + gap:
            return False
        return prefix <= best["plan"][: len(prefix)]

    x0 = np.asarray(problem.x0, dtype=float)
    start = np.stack([x0, problem.upper_start()], axis=1)
    root_cost = float(w[0] @ x0 ** 2) if T else 0.0

    def walk(k: int, S: np.ndarray, partial: float, prefix: tuple) -> None:
        for a, A in enumerate(choices[k]):
            best["nodes"] += 1
            S1 = np.maximum(round_nonneg(A @ S + bu[k][:, None]) + offset, 0.0)
            if np.any(S1[:, 1] > caps[k]):
                continue
            cost = partial + float(w[k + 1] @ S1[:, 0] ** 2) if k + 1 < T else partial
            nxt = prefix + (a,)
            if not promising(cost, nxt):
                continue
            if k + 1 == T:
                best["cost"], best["plan"] = cost, nxt
            else:
                walk(k + 1, S1, cost, nxt)

    if T:
        walk(0, start, root_cost, ())
    else:
        best["plan"], best["cost"] = (), 0.0
    if best["plan"] is None:
        raise InfeasibleError("no signal plan satisfies the caps")
    ev = evaluate_plan(problem, best["plan"])
    return SearchResult(best["plan"], best["cost"], best["nodes"], ev.df)


def minimal_margin(problem: PlanSearchProblem, measure: Sequence[bool] | None = None) -> tuple[int, int]:
    """Smallest integer m such that caps + m admit a feasible plan.

    With ``measure`` given, only the flagged steps are raised; caps at the
    other steps stay hard. Returns ``(m, nodes)``; a branch-and-bound over
    plans on the running maximum cap excess. Raises :class:`InfeasibleError`
    when the hard caps alone admit no plan.
    """
    choices = problem.choices
    T = problem.horizon
    measure = [True] * T if measure is None else list(measure)
    bu = np.asarray(problem.inflow, dtype=float)
    caps = np.asarray(problem.caps, dtype=float)
    d_max = np.asarray(problem.d_max, dtype=float)
    state = {"best": math.inf, "nodes": 0}

    def walk(k: int, up: np.ndarray, excess: float) -> None:
        finite = np.isfinite(caps[k])
        for A in choices[k]:
            state["nodes"] += 1
            up1 = np.maximum(round_nonneg(A @ up + bu[k]) + d_max, 0.0)
            over = float(np.max(up1[finite] - caps[k][finite], initial=-math.inf))
            if measure[k]:
                e = max(excess, over)
            elif over > 0:
                continue
            else:
                e = excess
            if e >= state["best"]:
                continue
            if k + 1 == T:
                state["best"] = e
            else:
                walk(k + 1, up1, e)

    if T:
        walk(0, problem.upper_start(), -math.inf)
        if state["best"] == math.inf:
            raise InfeasibleError("hard caps admit no plan")
    return max(0, math.ceil(state["best"] - 1e-9)), state["nodes"]
