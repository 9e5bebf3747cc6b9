"""Per-intersection control units coordinated through an aggregator.

Each round the aggregator broadcasts a bundle (previous global state, the
action/inflow actually applied, and every unit's previous plans). A unit then

1. predicts the current global state from the bundle with zero disturbance,
2. overwrites its own lanes with local measurements,
3. shifts every unit's signal plan and appends a random tail action,
4. shifts the other units' inflow plans and appends their nominal inflow,
5. solves its inflow QP (own inlets only, costs and caps on own lanes),
6. searches its own signal configurations with everything else held fixed.

The aggregator collects the first action and inflow of each unit, archives
the plans for the next bundle and applies the assembled global decision.
"""
from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .mpc import (
    ControllerConfig,
    Decision,
    EmergencyStatus,
    path_density,
    solve_inflow_step,
    solve_signal_step,
    stage_weights,
    step_caps,
)
from .network import NetworkError, NetworkSpec, SignalAction, step_exact
from .reachability import rounded_trace
from .solver import PlanSearchProblem

ROUND_BUDGET_S = 30.0


class ProtocolError(RuntimeError):
    """A bundle or unit message violates the aggregator protocol."""


@dataclass(frozen=True)
class UnitSpec:
    """Ownership of one control unit.

    Local weights, caps and inflow penalty are the controller configuration
    restricted to ``lanes`` and ``inlets``.
    """

    name: str
    intersections: tuple[int, ...]
    lanes: tuple[int, ...]
    inlets: tuple[int, ...] = ()

    def local_actions(self, spec: NetworkSpec) -> list[tuple[int, ...]]:
        sizes = [spec.intersections[j].n_configs for j in self.intersections]
        return list(itertools.product(*(range(m) for m in sizes)))


def validate_units(spec: NetworkSpec, units: Sequence[UnitSpec]) -> list[str]:
    """Ownership must partition lanes, inlets and intersections."""
    problems = []
    seen_lanes: dict[int, str] = {}
    seen_inter: dict[int, str] = {}
    n_in = 0
    for u in units:
        for lane in u.lanes:
            if lane not in spec.lanes:
                problems.append(f"unit {u.name}: unknown lane {lane}")
            elif lane in seen_lanes:
                problems.append(f"lane {lane} owned by {seen_lanes[lane]} and {u.name}")
            seen_lanes.setdefault(lane, u.name)
        for j in u.intersections:
            if not 0 <= j < spec.m_intersections:
                problems.append(f"unit {u.name}: unknown intersection {j}")
            elif j in seen_inter:
                problems.append(f"intersection {spec.intersections[j].name} owned by {seen_inter[j]} and {u.name}")
            else:
                seen_inter[j] = u.name
                for lane in spec.intersections[j].lanes:
                    if lane not in u.lanes:
                        problems.append(f"unit {u.name}: controlled lane {lane} not among its lanes")
        for lane in u.inlets:
            if lane not in spec.inlets:
                problems.append(f"unit {u.name}: lane {lane} is not an inlet")
            if lane not in u.lanes:
                problems.append(f"unit {u.name}: inlet {lane} not among its lanes")
        n_in += len(u.inlets)
    for lane in spec.lanes:
        if lane not in seen_lanes:
            problems.append(f"lane {lane} owned by no unit")
    for j in range(spec.m_intersections):
        if j not in seen_inter:
            problems.append(f"intersection {spec.intersections[j].name} owned by no unit")
    if n_in != spec.n_inlets or len({i for u in units for i in u.inlets}) != spec.n_inlets:
        problems.append("unit inlets must partition the network inlets")
    return problems


@dataclass(frozen=True)
class ArchivedPlan:
    """A unit's plan; entry 0 concerns period ``start``. ``seq`` is the producing round (-1 = initial)."""

    actions: tuple[tuple[int, ...], ...]
    inflows: np.ndarray  # (len, n_inlets of the unit)
    start: int
    seq: int

    def shifted(self, t: int) -> tuple[list[tuple[int, ...]], np.ndarray]:
        off = t - self.start
        return list(self.actions[off:]), self.inflows[off:]


@dataclass(frozen=True)
class EmergencyInfo:
    arrival: int
    traverse: int
    recovery: int
    path: tuple[int, ...]

    def status(self, entry: int = 0, exit: int = 0) -> EmergencyStatus:
        return EmergencyStatus(self.arrival, self.traverse, self.recovery, entry, exit, (self.path,), self.path)


@dataclass(frozen=True)
class AggregatorBundle:
    t: int
    x_prev: np.ndarray
    applied_action: SignalAction | None
    applied_inflow: np.ndarray | None
    plans: Mapping[str, ArchivedPlan]
    u_nom: np.ndarray  # (T, N_in) nominal inflows for periods t..t+T-1
    emergency: EmergencyInfo | None = None

    def to_record(self) -> dict:
        return {
            "t": self.t,
            "x_prev": self.x_prev.tolist(),
            "applied_action": list(self.applied_action) if self.applied_action is not None else None,
            "applied_inflow": self.applied_inflow.tolist() if self.applied_inflow is not None else None,
            "plans": {
                name: {"actions": [list(a) for a in p.actions], "inflows": p.inflows.tolist(), "start": p.start, "seq": p.seq}
                for name, p in self.plans.items()
            },
            "u_nom": self.u_nom.tolist(),
            "emergency": None if self.emergency is None else {
                "arrival": self.emergency.arrival, "traverse": self.emergency.traverse,
                "recovery": self.emergency.recovery, "path": list(self.emergency.path),
            },
        }


def estimate_global_state(bundle: AggregatorBundle, spec: NetworkSpec, units: Sequence[UnitSpec] | None = None) -> np.ndarray:
    """Zero-disturbance one-step prediction of the current state.

    The first bundle has no applied decision; its state is returned as is.
    """
    if units is not None:
        missing = [u.name for u in units if u.name not in bundle.plans]
        if missing:
            raise ProtocolError(f"bundle at t={bundle.t} lacks entries for {missing}")
    if bundle.applied_action is None:
        return np.asarray(bundle.x_prev, dtype=np.int64).copy()
    return step_exact(spec, bundle.x_prev, bundle.applied_action, bundle.applied_inflow)


def patch_local_measurements(x_est, unit: UnitSpec, local_obs: Mapping[int, int], spec: NetworkSpec) -> np.ndarray:
    """Replace owned-lane entries of the estimate by local measurements."""
    out = np.array(x_est, dtype=np.int64, copy=True)
    for lane, value in local_obs.items():
        if lane not in unit.lanes:
            raise NetworkError(f"unit {unit.name} does not own lane {lane}")
        out[spec.index(lane)] = int(value)
    return out


def merge_action(spec: NetworkSpec, units: Sequence[UnitSpec], local: Mapping[str, tuple[int, ...]]) -> SignalAction:
    action = [0] * spec.m_intersections
    for u in units:
        for j, c in zip(u.intersections, local[u.name]):
            action[j] = int(c)
    return tuple(action)


def local_masks(spec: NetworkSpec, config: ControllerConfig, unit: UnitSpec, status: EmergencyStatus | None, T: int):
    """Stage weights and caps restricted to the unit's lanes (zero weight / no cap elsewhere)."""
    owned = np.zeros(spec.n_lanes, dtype=bool)
    owned[spec.indices(unit.lanes)] = True
    w = stage_weights(config, spec, status, T)
    caps = step_caps(config, status, T)
    w[:, ~owned] = 0.0
    caps[:, ~owned] = np.inf
    return w, caps


@dataclass
class UnitDecision:
    unit: str
    actions: list[tuple[int, ...]]
    inflows: np.ndarray
    compute_time: float
    stats: dict = field(default_factory=dict)

    def to_record(self, timing: bool = True) -> dict:
        rec = {
            "unit": self.unit,
            "actions": [list(a) for a in self.actions],
            "inflows": self.inflows.tolist(),
            "stats": {k: v for k, v in self.stats.items() if timing or not k.startswith("time")},
        }
        if timing:
            rec["ms"] = 1e3 * self.compute_time
        return rec


class ControlUnit:
    """One unit's state machine; communicates only through bundles."""

    def __init__(self, spec: NetworkSpec, config: ControllerConfig, unit: UnitSpec, units: Sequence[UnitSpec], stream: int) -> None:
        self.spec = spec
        self.config = config
        self.unit = unit
        self.units = list(units)
        self.rng = np.random.default_rng([config.seed, 1, stream])
        self.local_actions = {u.name: u.local_actions(spec) for u in self.units}
        self.inlet_pos = [spec.inlets.index(lane) for lane in unit.inlets]

    def initial_plan(self) -> ArchivedPlan:
        acts = self.local_actions[self.unit.name]
        T = self.config.horizon
        actions = tuple(acts[int(self.rng.integers(len(acts)))] for _ in range(T - 1))
        inflows = self.config.u_nom.window(0, T - 1)[:, self.inlet_pos]
        return ArchivedPlan(actions, inflows, start=0, seq=-1)

    def plan(self, bundle: AggregatorBundle, local_obs: Mapping[int, int]) -> UnitDecision:
        t0 = time.perf_counter()
        spec, config, T = self.spec, self.config, self.config.horizon
        x_est = estimate_global_state(bundle, spec, self.units)
        x = patch_local_measurements(x_est, self.unit, local_obs, spec)
        # unmeasured lanes are known only up to the one-step disturbance, so the band starts above the estimate
        slack = 0 if bundle.applied_action is None else spec.d_max.astype(np.int64)
        x_up = patch_local_measurements(x_est + slack, self.unit, local_obs, spec)

        plans: dict[str, list[tuple[int, ...]]] = {}
        inflow = np.array(bundle.u_nom, dtype=float)
        for u in self.units:
            archived = bundle.plans[u.name]
            acts, flows = archived.shifted(bundle.t)
            if len(acts) != T - 1:
                raise ProtocolError(f"plan of {u.name} covers {len(acts)} periods from t={bundle.t}, need {T - 1}")
            local = self.local_actions[u.name]
            plans[u.name] = list(acts) + [local[int(self.rng.integers(len(local)))]]
            if u.name != self.unit.name and u.inlets:
                pos = [spec.inlets.index(lane) for lane in u.inlets]
                inflow[: T - 1, pos] = flows
        own = self.unit.name
        status = bundle.emergency.status() if bundle.emergency is not None else None
        weights, caps = local_masks(spec, config, self.unit, status, T)

        As = [spec.tendency(merge_action(spec, self.units, {n: p[k] for n, p in plans.items()})) for k in range(T)]
        s1 = solve_inflow_step(spec, x, As, weights, caps, config.theta, bundle.u_nom, config.u_max, self.inlet_pos, inflow,
                               x_up)
        t1 = time.perf_counter()

        mine = self.local_actions[own]
        choices = []
        for k in range(T):
            others = {n: p[k] for n, p in plans.items()}
            mats = []
            for a in mine:
                others[own] = a
                mats.append(spec.tendency(merge_action(spec, self.units, others)))
            choices.append(np.stack(mats))
        problem = PlanSearchProblem(
            x0=x.astype(float),
            choices=tuple(choices),
            inflow=s1.plan @ spec.inlet_matrix.T,
            weights=weights,
            caps=caps,
            d_max=spec.d_max.astype(float),
            x0_upper=x_up.astype(float),
        )
        index = {a: i for i, a in enumerate(mine)}
        s2 = solve_signal_step(problem, [index[a] for a in plans[own]])
        t2 = time.perf_counter()
        return UnitDecision(
            unit=own,
            actions=[mine[i] for i in s2.plan],
            inflows=s1.plan[:, self.inlet_pos],
            compute_time=t2 - t0,
            stats={
                "qp_nodes": s1.nodes, "search_nodes": s2.nodes,
                "margin_inflow": s1.margins.tolist(), "margin_signal": s2.margin,
                "cost_inflow": s1.cost, "cost_signal": s2.cost,
                "time_inflow": t1 - t0, "time_signal": t2 - t1,
            },
        )


def plan_local_normal(unit: ControlUnit, bundle: AggregatorBundle, local_obs: Mapping[int, int]) -> UnitDecision:
    if bundle.emergency is not None:
        bundle = AggregatorBundle(bundle.t, bundle.x_prev, bundle.applied_action, bundle.applied_inflow, bundle.plans, bundle.u_nom)
    return unit.plan(bundle, local_obs)


def plan_local_emergency(unit: ControlUnit, bundle: AggregatorBundle, local_obs: Mapping[int, int]) -> UnitDecision:
    if bundle.emergency is None:
        raise ProtocolError("emergency planning needs emergency information in the bundle")
    return unit.plan(bundle, local_obs)


@dataclass
class RoundTrace:
    t: int
    bundle: AggregatorBundle
    decisions: list[UnitDecision]
    applied_action: SignalAction
    applied_inflow: np.ndarray
    latency: float
    budget_ok: bool

    def to_record(self, timing: bool = True) -> dict:
        rec = {
            "t": self.t,
            "bundle": self.bundle.to_record(),
            "decisions": [d.to_record(timing) for d in self.decisions],
            "applied_action": list(self.applied_action),
            "applied_inflow": self.applied_inflow.tolist(),
        }
        if timing:
            rec["latency_ms"] = 1e3 * self.latency
            rec["budget_ok"] = self.budget_ok
        return rec

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_record(timing), sort_keys=True)


def read_round_log(lines) -> list[dict]:
    """Parse a line-delimited round log (one JSON record per round)."""
    return [json.loads(line) for line in lines if line.strip()]


class Aggregator:
    def __init__(self, spec: NetworkSpec, config: ControllerConfig, units: Sequence[UnitSpec], x0) -> None:
        self.spec = spec
        self.config = config
        self.units = list(units)
        self.x_prev = np.asarray(x0, dtype=np.int64).copy()
        self.applied: tuple[SignalAction, np.ndarray] | None = None
        self.archive: dict[str, ArchivedPlan] = {}

    def register(self, name: str, plan: ArchivedPlan) -> None:
        self.archive[name] = plan

    def bundle(self, t: int, emergency: EmergencyInfo | None = None) -> AggregatorBundle:
        for u in self.units:
            p = self.archive.get(u.name)
            if p is None:
                raise ProtocolError(f"no archived plan for unit {u.name}")
            if p.seq != t - 1 and not (p.seq == -1 and t == 0):
                raise ProtocolError(f"plan of {u.name} is from round {p.seq}, expected {t - 1}")
        return AggregatorBundle(
            t=t,
            x_prev=self.x_prev.copy(),
            applied_action=None if self.applied is None else self.applied[0],
            applied_inflow=None if self.applied is None else self.applied[1].copy(),
            plans=dict(self.archive),
            u_nom=self.config.u_nom.window(t, self.config.horizon),
            emergency=emergency,
        )

    def collect(self, t: int, decisions: Sequence[UnitDecision], x_now) -> tuple[SignalAction, np.ndarray]:
        by_name = {d.unit: d for d in sorted(decisions, key=lambda d: [u.name for u in self.units].index(d.unit))}
        if set(by_name) != {u.name for u in self.units}:
            raise ProtocolError(f"round {t}: decisions from {sorted(by_name)}")
        inflow = np.zeros(self.spec.n_inlets, dtype=np.int64)
        for u in self.units:
            d = by_name[u.name]
            for c, lane in enumerate(u.inlets):
                inflow[self.spec.inlets.index(lane)] = d.inflows[0, c]
            self.archive[u.name] = ArchivedPlan(tuple(d.actions), np.asarray(d.inflows), start=t, seq=t)
        action = merge_action(self.spec, self.units, {n: d.actions[0] for n, d in by_name.items()})
        self.applied = (action, inflow)
        self.x_prev = np.asarray(x_now, dtype=np.int64).copy()
        return action, inflow

    def choose_path(self, paths: Sequence[tuple[int, ...]], steps: int, t: int) -> tuple[int, ...]:
        """Emergency-vehicle path pick: least predicted path density under current plans.

        Uses the zero-disturbance state estimate and the archived plans
        (shifted, last action held, nominal inflow at the end); no solves.
        """
        if not paths:
            raise ValueError("no candidate emergency paths")
        T = self.config.horizon
        bundle = self.bundle(t)
        x = estimate_global_state(bundle, self.spec).astype(float)
        inflow = np.array(bundle.u_nom, dtype=float)
        local = {}
        for u in self.units:
            acts, flows = self.archive[u.name].shifted(t)
            acts = list(acts) if acts else [u.local_actions(self.spec)[0]]
            local[u.name] = acts + [acts[-1]] * (T - len(acts))
            if u.inlets:
                pos = [self.spec.inlets.index(lane) for lane in u.inlets]
                inflow[: len(flows), pos] = flows
        As = [self.spec.tendency(merge_action(self.spec, self.units, {n: a[k] for n, a in local.items()})) for k in range(T)]
        df = rounded_trace(As, inflow @ self.spec.inlet_matrix.T, x)
        scores = [path_density(df, self.spec, p, steps) for p in paths]
        return tuple(paths[int(np.argmin(scores))])


def run_round(aggregator: Aggregator, units: Sequence[ControlUnit], x_measured, t: int,
              emergency: EmergencyInfo | None = None, comm_latency: float = 0.0) -> tuple[RoundTrace, np.ndarray, SignalAction]:
    """One synchronous round: broadcast, local solves, collection by unit order."""
    bundle = aggregator.bundle(t, emergency)
    spec = aggregator.spec
    x_measured = np.asarray(x_measured, dtype=np.int64)
    decisions = []
    for unit in units:
        obs = {lane: int(x_measured[spec.index(lane)]) for lane in unit.unit.lanes}
        if emergency is None:
            decisions.append(plan_local_normal(unit, bundle, obs))
        else:
            decisions.append(plan_local_emergency(unit, bundle, obs))
    action, inflow = aggregator.collect(t, decisions, x_measured)
    latency = max((d.compute_time for d in decisions), default=0.0) + comm_latency
    trace = RoundTrace(t, bundle, decisions, action, inflow, latency, latency <= ROUND_BUDGET_S)
    return trace, inflow, action


class DecentralizedController:
    """Units plus aggregator behind the same ``act`` interface as the centralized controller."""

    name = "decentralized"

    def __init__(self, spec: NetworkSpec, config: ControllerConfig, units: Sequence[UnitSpec], x0, log=None) -> None:
        config.check(spec)
        problems = validate_units(spec, units)
        if problems:
            raise ValueError("; ".join(problems))
        self.spec = spec
        self.config = config
        self.unit_specs = list(units)
        self.units = [ControlUnit(spec, config, u, units, stream=i) for i, u in enumerate(units)]
        self.aggregator = Aggregator(spec, config, units, x0)
        for cu in self.units:
            self.aggregator.register(cu.unit.name, cu.initial_plan())
        self.log = log
        self.traces: list[RoundTrace] = []

    def act(self, t: int, x, status: EmergencyStatus | None = None) -> Decision:
        info = None
        path = None
        if status is not None and status.active:
            path = status.selected or self.aggregator.choose_path(status.paths, status.priority_steps, t)
            info = EmergencyInfo(status.arrival, status.traverse, status.recovery, tuple(path))
        trace, inflow, action = run_round(self.aggregator, self.units, x, t, info)
        self.traces.append(trace)
        if self.log is not None:
            self.log.write(trace.to_json() + "\n")
        times = [d.compute_time for d in trace.decisions]
        stats = {
            "compute_time": max(times),
            "compute_time_total": sum(times),
            "qp_nodes": sum(d.stats["qp_nodes"] for d in trace.decisions),
            "search_nodes": sum(d.stats["search_nodes"] for d in trace.decisions),
            "budget_ok": trace.budget_ok,
        }
        margins = {d.unit: {"inflow": d.stats["margin_inflow"], "signal": d.stats["margin_signal"]} for d in trace.decisions}
        return Decision(
            inflow=inflow,
            action=action,
            inflow_plan=np.zeros((0, self.spec.n_inlets), dtype=np.int64),
            action_plan=[action],
            cost_inflow=sum(d.stats["cost_inflow"] for d in trace.decisions),
            cost_signal=sum(d.stats["cost_signal"] for d in trace.decisions),
            margins=margins,
            stats=stats,
            path=path,
        )
