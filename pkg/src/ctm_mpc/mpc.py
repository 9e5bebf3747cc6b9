"""Centralized two-step receding-horizon controller.

Step 1 fixes a signal plan (previous optimum shifted by one, plus a random
tail action) and solves the integer inflow QP on the linear model. Step 2
fixes the inflows and searches signal plans on the rounded model. Only the
first inflow vector and the first action are applied.

Emergency mode reuses both steps with lane weights raised on the emergency
path while the vehicle is expected in the network, and with extended density
caps until the recovery countdown ends.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .network import NetworkError, NetworkSpec, SignalAction
from .reachability import affine_prediction, linear_trace
from .solver import (
    InfeasibleError,
    InflowQP,
    PlanSearchProblem,
    minimal_margin,
    search_signal_plan,
    solve_integer_qp,
)

log = logging.getLogger(__name__)

RELAXATION_PENALTY = 1e6


class NominalInflow:
    """Nominal inflow schedule; the last row holds for all later periods."""

    def __init__(self, rows) -> None:
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.size == 0 or np.any(rows < 0):
            raise ValueError("nominal inflow schedule must be nonempty and nonnegative")
        self.rows = rows
        self.rows.setflags(write=False)

    @property
    def width(self) -> int:
        return self.rows.shape[1]

    def at(self, t: int) -> np.ndarray:
        return self.rows[min(max(t, 0), len(self.rows) - 1)]

    def window(self, t: int, length: int) -> np.ndarray:
        return np.array([self.at(t + k) for k in range(length)]).reshape(length, self.width)


@dataclass(frozen=True, eq=False)
class ControllerConfig:
    horizon: int
    gamma_normal: np.ndarray
    gamma_emergency: float
    theta: np.ndarray
    u_nom: NominalInflow
    caps: np.ndarray
    caps_extended: np.ndarray
    u_max: np.ndarray
    seed: int = 0

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        for name in ("gamma_normal", "caps", "caps_extended", "u_max"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "theta", theta)
        if np.any(self.gamma_normal < 0):
            raise ValueError("normal lane weights must be nonnegative")
        if self.gamma_normal.size and not self.gamma_emergency > self.gamma_normal.max():
            raise ValueError("emergency weight must exceed every normal lane weight")
        if np.any(self.caps_extended < self.caps):
            raise ValueError("extended caps must be at least the normal caps")
        if np.any(np.linalg.eigvalsh(0.5 * (theta + theta.T)) < -1e-12):
            raise ValueError("theta must be positive semidefinite")
        if np.any(self.u_max < 0):
            raise ValueError("u_max must be nonnegative")

    def check(self, spec: NetworkSpec) -> None:
        n, m = spec.n_lanes, spec.n_inlets
        if self.gamma_normal.shape != (n,) or self.caps.shape != (n,) or self.caps_extended.shape != (n,):
            raise ValueError(f"lane vectors must have length {n}")
        if self.theta.shape != (m, m) or self.u_max.shape != (m,) or self.u_nom.width != m:
            raise ValueError(f"inlet quantities must have width {m}")


@dataclass(frozen=True)
class EmergencyStatus:
    """Countdowns (periods) plus the candidate and selected emergency paths."""

    arrival: int
    traverse: int
    recovery: int
    entry: int
    exit: int
    paths: tuple[tuple[int, ...], ...] = ()
    selected: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if min(self.arrival, self.traverse, self.recovery) < 0:
            raise ValueError("countdowns must be nonnegative")

    @property
    def active(self) -> bool:
        return self.arrival + self.traverse + self.recovery > 0

    @property
    def priority_steps(self) -> int:
        return self.arrival + self.traverse

    @property
    def relaxed_steps(self) -> int:
        return self.arrival + self.traverse + self.recovery


def advance_mode(status: EmergencyStatus | None) -> EmergencyStatus | None:
    """Decrement the first nonzero countdown (arrival, then traverse, then recovery).

    Returns ``None`` (normal mode) once every countdown is zero.
    """
    if status is None or not status.active:
        return None
    if status.arrival:
        status = replace(status, arrival=status.arrival - 1)
    elif status.traverse:
        status = replace(status, traverse=status.traverse - 1)
    else:
        status = replace(status, recovery=status.recovery - 1)
    return status if status.active else None


def enumerate_paths(spec: NetworkSpec, entry: int, exit: int) -> list[tuple[int, ...]]:
    """All simple directed lane paths from ``entry`` to ``exit``, lexicographically."""
    spec.index(entry)
    spec.index(exit)
    out: list[tuple[int, ...]] = []

    def walk(path: list[int]) -> None:
        last = path[-1]
        if last == exit:
            out.append(tuple(path))
            return
        for nxt in spec.successors(last):
            if nxt not in path:
                path.append(nxt)
                walk(path)
                path.pop()

    walk([entry])
    return sorted(out)


@dataclass
class Decision:
    inflow: np.ndarray
    action: SignalAction
    inflow_plan: np.ndarray
    action_plan: list[SignalAction]
    cost_inflow: float
    cost_signal: float
    margins: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    df: np.ndarray | None = None
    path: tuple[int, ...] | None = None


# -- horizon weights and caps -------------------------------------------------
def stage_weights(config: ControllerConfig, spec: NetworkSpec, status: EmergencyStatus | None, T: int) -> np.ndarray:
    """Diagonal lane weights for k = 0..T-1, raised on the path while k <= T_a + T_s."""
    w = np.tile(config.gamma_normal, (T, 1))
    if status is not None and status.active and status.selected:
        idx = spec.indices(status.selected)
        for k in range(min(T, status.priority_steps + 1)):
            w[k, idx] = config.gamma_emergency
    return w


def step_caps(config: ControllerConfig, status: EmergencyStatus | None, T: int) -> np.ndarray:
    """Per-lane caps for k = 1..T: extended through T_a + T_s + T_r, normal after."""
    caps = np.tile(config.caps, (T, 1))
    if status is not None and status.active:
        n_ext = status.relaxed_steps
        if n_ext > T:
            log.debug("relaxation window %d exceeds horizon %d; extended caps on every step", n_ext, T)
        caps[: min(T, n_ext)] = config.caps_extended
    return caps


# -- the two steps -------------------------------------------------------------
@dataclass
class InflowStep:
    plan: np.ndarray  # (T, N_in) integers
    cost: float
    margins: np.ndarray  # per prediction step, integer cap inflation applied
    nodes: int
    relaxations: int


def build_inflow_qp(spec, x0, As, weights, caps, theta, u_nom, u_max, free, fixed,
                    x0_upper=None) -> tuple[InflowQP, np.ndarray, np.ndarray]:
    """Assemble the step-1 QP over the inflows of inlet positions ``free``.

    ``fixed`` is a (T, N_in) inflow plan whose non-free columns stay fixed.
    ``x0_upper`` (default ``x0``) starts the upper band.
    Returns the QP plus the constant parts of the upper band (``c_up``) and
    the band's inflow sensitivity ``M`` (used for cap inflation).
    """
    T = len(As)
    free = list(free)
    B = spec.inlet_matrix
    fixed = np.asarray(fixed, dtype=float).copy()
    fixed[:, free] = 0.0
    bus_fixed = fixed @ B.T
    B_free = B[:, free]
    c, M = affine_prediction(As, B_free, bus_fixed, np.asarray(x0, dtype=float))
    c_up = linear_trace(As, bus_fixed, np.asarray(x0 if x0_upper is None else x0_upper, dtype=float), spec.d_max)
    m = len(free)
    theta_f = theta[np.ix_(free, free)]
    Theta = np.kron(np.eye(T), theta_f)
    unom = np.asarray(u_nom, dtype=float)[:, free].reshape(-1)
    H = 2.0 * Theta
    g = -2.0 * Theta @ unom
    const = float(unom @ Theta @ unom)
    for k in range(T):
        Wk = weights[k]
        MW = M[k].T * Wk
        H = H + 2.0 * MW @ M[k]
        g = g + 2.0 * MW @ c[k]
        const += float(c[k] @ (Wk * c[k]))
    G, h, rows = _cap_rows(M, c_up, caps)
    lo = np.zeros(T * m)
    hi = np.tile(np.asarray(u_max, dtype=float)[free], T)
    return InflowQP(H, g, G, h, lo, hi, const=const, horizon=T, rows=rows), c_up, M


def _cap_rows(M, c_up, caps):
    G, h, rows = [], [], []
    for k in range(1, len(c_up)):
        for i in np.flatnonzero(np.isfinite(caps[k - 1])):
            G.append(M[k][i])
            h.append(caps[k - 1][i] - c_up[k][i])
            rows.append((k, int(i)))
    n = M.shape[2]
    G = np.array(G, dtype=float).reshape(len(rows), n)
    return G, np.array(h, dtype=float), tuple(rows)


def solve_inflow_step(spec, x0, As, weights, caps, theta, u_nom, u_max, free, fixed, x0_upper=None) -> InflowStep:
    """Step 1 with the cap-inflation fallback.

    When a cap cannot be met even at zero free inflow (the most permissive
    point, since bands grow with inflow), that lane's cap at that step is
    raised by the smallest integer restoring feasibility; all other caps stay.
    ``margins`` reports the largest raise per prediction step.
    """
    T = len(As)
    plan = np.asarray(fixed, dtype=float).copy()
    free = list(free)
    qp, c_up, M = build_inflow_qp(spec, x0, As, weights, caps, theta, u_nom, u_max, free, fixed, x0_upper)
    margins = np.zeros(T, dtype=np.int64)
    if np.any(qp.h < -1e-9):
        excess = np.where(np.isfinite(caps), c_up[1:] - caps, -np.inf)
        raise_by = np.where(excess > 1e-9, np.ceil(excess - 1e-9), 0.0)
        margins = raise_by.max(axis=1).astype(np.int64)
        caps = caps + raise_by
        log.info("inflow caps inflated by %s", margins.tolist())
        qp, c_up, M = build_inflow_qp(spec, x0, As, weights, caps, theta, u_nom, u_max, free, fixed, x0_upper)
    if qp.n:
        sol = solve_integer_qp(qp)
        plan[:, free] = sol.u.reshape(T, len(free))
        cost, nodes, rel = sol.objective, sol.nodes, sol.relaxations
    else:
        cost, nodes, rel = qp.const, 0, 0
    cost += RELAXATION_PENALTY * float(margins.sum())
    return InflowStep(np.round(plan).astype(np.int64), cost, margins, nodes, rel)


@dataclass
class SignalStep:
    plan: tuple[int, ...]  # choice indices per step
    cost: float
    margin: int  # largest per-step cap raise
    nodes: int
    df: np.ndarray
    margins: tuple[int, ...] = ()


def solve_signal_step(problem: PlanSearchProblem, warm: Sequence[int] | None) -> SignalStep:
    """Step 2 with the cap-inflation fallback.

    Per-step raises are chosen lexicographically: the smallest raise at step 1,
    then the smallest at step 2 given that, and so on, so the step that is
    actually applied keeps the tightest caps.
    """
    try:
        res = search_signal_plan(problem, warm)
        margins = [0] * problem.horizon
        extra = 0
    except InfeasibleError:
        margins, extra = [], 0
        T = problem.horizon
        for k in range(T):
            caps = problem.caps.copy()
            caps[:k] += np.asarray(margins, dtype=float)[:, None]
            caps[k + 1:] = np.inf
            m, nodes = minimal_margin(problem.with_caps(caps), measure=[j == k for j in range(T)])
            margins.append(m)
            extra += nodes
        log.info("signal caps inflated by %s", margins)
        res = search_signal_plan(problem.with_caps(problem.caps + np.asarray(margins, dtype=float)[:, None]), warm)
    total = RELAXATION_PENALTY * float(sum(margins))
    return SignalStep(res.plan, res.cost + total, max(margins, default=0), res.nodes + extra, res.df, tuple(margins))


# -- centralized planning ---------------------------------------------------------
def _action_stack(spec: NetworkSpec) -> tuple[list[SignalAction], np.ndarray, dict]:
    key = "action_stack"
    if key not in spec._cache:
        actions = spec.actions()
        stack = np.stack([spec.tendency(a) for a in actions])
        spec._cache[key] = (actions, stack, {a: i for i, a in enumerate(actions)})
    return spec._cache[key]


def _two_step(config, spec, x, guess: Sequence[SignalAction], weights, caps, t: int) -> Decision:
    T = config.horizon
    guess = [spec.check_action(a) for a in guess]
    if len(guess) != T:
        raise NetworkError(f"signal plan guess must have length {T}")
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=float)
    u_nom = config.u_nom.window(t, T)
    As = [spec.tendency(a) for a in guess]
    s1 = solve_inflow_step(spec, x, As, weights, caps, config.theta, u_nom, config.u_max, range(spec.n_inlets), u_nom)
    t1 = time.perf_counter()
    actions, stack, index = _action_stack(spec)
    problem = PlanSearchProblem(
        x0=x,
        choices=tuple(stack for _ in range(T)),
        inflow=s1.plan @ spec.inlet_matrix.T,
        weights=weights,
        caps=caps,
        d_max=spec.d_max.astype(float),
    )
    s2 = solve_signal_step(problem, [index[a] for a in guess])
    t2 = time.perf_counter()
    plan = [actions[i] for i in s2.plan]
    return Decision(
        inflow=s1.plan[0].copy(),
        action=plan[0],
        inflow_plan=s1.plan,
        action_plan=plan,
        cost_inflow=s1.cost,
        cost_signal=s2.cost,
        margins={"inflow": s1.margins.tolist(), "signal": s2.margin},
        stats={"qp_nodes": s1.nodes, "qp_relaxations": s1.relaxations, "search_nodes": s2.nodes,
               "time_inflow": t1 - t0, "time_signal": t2 - t1},
        df=s2.df,
    )


def plan_normal(config: ControllerConfig, spec: NetworkSpec, x, warm: Sequence[SignalAction], tail: SignalAction, t: int = 0) -> Decision:
    """Normal-mode two-step decision from state ``x`` at time ``t``.

    ``warm`` is the previous optimal signal plan shifted by one period
    (length T_f - 1) and ``tail`` the randomly drawn final action.
    """
    T = config.horizon
    return _two_step(config, spec, x, list(warm) + [tail], stage_weights(config, spec, None, T), step_caps(config, None, T), t)


def plan_emergency(config: ControllerConfig, spec: NetworkSpec, x, status: EmergencyStatus, warm, tail, t: int = 0) -> Decision:
    """Emergency-mode two-step decision for the path in ``status.selected``."""
    if status.active and not status.selected:
        raise ValueError("emergency path not selected")
    T = config.horizon
    return _two_step(config, spec, x, list(warm) + [tail], stage_weights(config, spec, status, T), step_caps(config, status, T), t)


def path_density(df: np.ndarray, spec: NetworkSpec, path: Sequence[int], steps: int) -> float:
    """Sum of predicted densities over path lanes for k = 1..steps."""
    idx = spec.indices(path)
    steps = min(steps, len(df) - 1)
    return float(df[1 : steps + 1][:, idx].sum())


def select_emergency_path(config, spec, x, status: EmergencyStatus, warm, tail, t: int = 0) -> tuple[tuple[int, ...], Decision]:
    """Solve the emergency problem for every candidate path; keep the least dense.

    Paths are scored by predicted density summed over their lanes for
    k = 1..T_a + T_s; ties go to the earliest candidate.
    """
    if not status.paths:
        raise ValueError("no candidate emergency paths")
    best = None
    for path in status.paths:
        dec = plan_emergency(config, spec, x, replace(status, selected=tuple(path)), warm, tail, t)
        score = path_density(dec.df, spec, path, status.priority_steps)
        if best is None or score < best[0]:
            best = (score, tuple(path), dec)
    _, path, dec = best
    dec.path = path
    return path, dec


class CentralizedController:
    """Stateful wrapper: draws random tails, keeps warm starts, switches modes."""

    name = "centralized"

    def __init__(self, spec: NetworkSpec, config: ControllerConfig, stream: int = 0) -> None:
        config.check(spec)
        self.spec = spec
        self.config = config
        self.rng = np.random.default_rng([config.seed, 1, stream])
        self.actions = spec.actions()
        self.warm = [self._draw() for _ in range(config.horizon - 1)]

    def _draw(self) -> SignalAction:
        return self.actions[int(self.rng.integers(len(self.actions)))]

    def act(self, t: int, x, status: EmergencyStatus | None = None) -> Decision:
        tail = self._draw()
        t0 = time.perf_counter()
        if status is None or not status.active:
            dec = plan_normal(self.config, self.spec, x, self.warm, tail, t)
        elif status.selected is None:
            _, dec = select_emergency_path(self.config, self.spec, x, status, self.warm, tail, t)
        else:
            dec = plan_emergency(self.config, self.spec, x, status, self.warm, tail, t)
            dec.path = status.selected
        dec.stats["compute_time"] = time.perf_counter() - t0
        self.warm = list(dec.action_plan[1:])
        return dec
