"""Closed-loop runs, the periodic baseline, metrics, batches and horizon sweeps."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .decentralized import DecentralizedController
from .mpc import CentralizedController, Decision, EmergencyStatus, advance_mode, enumerate_paths, path_density
from .network import NetworkSpec, sample_disturbance, step_exact
from .reachability import rounded_trace
from .scenario import Scenario

CONTROLLERS = ("centralized", "decentralized", "baseline")


class RunAborted(RuntimeError):
    """The controller could not produce a decision; carries the failing step."""

    def __init__(self, t: int, controller: str, cause: Exception) -> None:
        super().__init__(f"{controller} controller failed at t={t}: {cause}")
        self.t = t
        self.cause = cause


class BaselineController:
    """Fixed-order signal cycling with a dwell time; inflows held at nominal."""

    name = "baseline"

    def __init__(self, spec: NetworkSpec, u_nom, dwell: int = 2, horizon: int = 4) -> None:
        if dwell < 1:
            raise ValueError("dwell must be at least 1")
        self.spec = spec
        self.u_nom = u_nom
        self.dwell = dwell
        self.horizon = horizon

    def action_at(self, t: int) -> tuple[int, ...]:
        return tuple((t // self.dwell) % inter.n_configs for inter in self.spec.intersections)

    def inflow_at(self, t: int) -> np.ndarray:
        return np.round(self.u_nom.at(t)).astype(np.int64)

    def choose_path(self, x, status: EmergencyStatus, t: int) -> tuple[int, ...]:
        """Least predicted path density under the periodic plan (no optimization)."""
        T = max(self.horizon, status.priority_steps)
        As = [self.spec.tendency(self.action_at(t + k)) for k in range(T)]
        bus = np.array([self.inflow_at(t + k) for k in range(T)], dtype=float) @ self.spec.inlet_matrix.T
        df = rounded_trace(As, bus, np.asarray(x, dtype=float))
        scores = [path_density(df, self.spec, p, status.priority_steps) for p in status.paths]
        return tuple(status.paths[int(np.argmin(scores))])

    def act(self, t: int, x, status: EmergencyStatus | None = None) -> Decision:
        t0 = time.perf_counter()
        path = None
        if status is not None and status.active:
            path = status.selected or self.choose_path(x, status, t)
        action = self.action_at(t)
        inflow = self.inflow_at(t)
        return Decision(inflow, action, inflow[None, :], [action], 0.0, 0.0,
                        stats={"compute_time": time.perf_counter() - t0}, path=path)


def baseline_periodic(scenario: Scenario, dwell: int | None = None) -> BaselineController:
    return BaselineController(scenario.spec, scenario.config.u_nom, dwell or scenario.baseline_dwell, scenario.config.horizon)


def make_controller(scenario: Scenario, name: str, seed: int, log=None):
    config = replace(scenario.config, seed=seed)
    if name == "centralized":
        return CentralizedController(scenario.spec, config)
    if name == "decentralized":
        return DecentralizedController(scenario.spec, config, scenario.units, scenario.x0, log=log)
    if name == "baseline":
        return baseline_periodic(scenario)
    raise ValueError(f"unknown controller {name!r}; choose from {', '.join(CONTROLLERS)}")


@dataclass
class RunRecord:
    scenario: str
    controller: str
    seed: int
    lanes: tuple[int, ...]
    inlets: tuple[int, ...]
    intersections: tuple[str, ...]
    states: np.ndarray  # (steps + 1, N)
    inflows: np.ndarray  # (steps, N_in)
    actions: np.ndarray  # (steps, M)
    modes: list[str]
    path: tuple[int, ...] | None
    stats: list[dict] = field(default_factory=list)
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def steps(self) -> int:
        return len(self.modes)

    def relaxed_states(self) -> np.ndarray:
        """Mask over states: True where extended caps may apply (states after emergency-mode steps)."""
        mask = np.zeros(len(self.states), dtype=bool)
        for t, mode in enumerate(self.modes):
            if mode == "emergency":
                mask[t + 1] = True
        return mask

    def emergency_start(self) -> int | None:
        return self.modes.index("emergency") if "emergency" in self.modes else None

    def to_record(self, timing: bool = False) -> dict:
        rec = {
            "scenario": self.scenario,
            "controller": self.controller,
            "seed": self.seed,
            "lanes": list(self.lanes),
            "inlets": list(self.inlets),
            "intersections": list(self.intersections),
            "states": self.states.tolist(),
            "inflows": self.inflows.tolist(),
            "actions": self.actions.tolist(),
            "modes": list(self.modes),
            "path": list(self.path) if self.path else None,
            "stats": [{k: v for k, v in s.items() if timing or not _is_timing(k)} for s in self.stats],
        }
        if timing:
            rec["ms"] = (1e3 * self.times).tolist()
        return rec

    def to_json(self, timing: bool = False) -> str:
        """Canonical serialization; wall-clock fields only when ``timing``."""
        return json.dumps(self.to_record(timing), sort_keys=True, separators=(",", ":"), default=_jsonable)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def _is_timing(key: str) -> bool:
    return key.startswith("time") or key.startswith("compute_time") or key == "budget_ok"


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _status_at(scenario: Scenario, t: int, status: EmergencyStatus | None) -> EmergencyStatus | None:
    ev = scenario.emergency
    if ev is None:
        return status
    if t == ev.time:
        paths = tuple(enumerate_paths(scenario.spec, ev.entry, ev.exit))
        status = EmergencyStatus(ev.arrival, ev.traverse, ev.recovery, ev.entry, ev.exit, paths, ev.path)
    for o in ev.overrides:
        if o.time == t and status is not None:
            status = replace(status, arrival=o.arrival, traverse=o.traverse, recovery=o.recovery)
    return status if status is not None and status.active else None


def run_closed_loop(scenario: Scenario, controller: str, seed: int | None = None, steps: int | None = None, log=None,
                    disturbances: bool = True) -> RunRecord:
    """Simulate with seeded disturbances; the controller stream uses the same seed.

    ``disturbances=False`` runs the disturbance-free plant (the controller
    still plans robustly against the full box).
    """
    seed = scenario.seed if seed is None else int(seed)
    steps = scenario.steps if steps is None else int(steps)
    spec = scenario.spec
    ctrl = make_controller(scenario, controller, seed, log=log)
    rng = np.random.default_rng([seed, 0])
    x = np.asarray(scenario.x0, dtype=np.int64).copy()
    states, inflows, actions, modes, stats, times = [x.copy()], [], [], [], [], []
    status: EmergencyStatus | None = None
    path = None
    for t in range(steps):
        status = _status_at(scenario, t, status)
        try:
            dec = ctrl.act(t, x, status)
        except Exception as exc:  # solver failures beyond the fallback policy
            raise RunAborted(t, controller, exc) from exc
        if status is not None:
            if status.selected is None:
                status = replace(status, selected=dec.path)
            path = status.selected
        modes.append("normal" if status is None else "emergency")
        d = sample_disturbance(spec, rng)
        x = step_exact(spec, x, dec.action, dec.inflow, d if disturbances else None)
        states.append(x.copy())
        inflows.append(np.asarray(dec.inflow, dtype=np.int64))
        actions.append(np.asarray(dec.action, dtype=np.int64))
        times.append(dec.stats.get("compute_time", 0.0))
        stats.append({k: v for k, v in dec.stats.items()} | {"margins": dec.margins})
        status = advance_mode(status)
    return RunRecord(
        scenario=scenario.name,
        controller=controller,
        seed=seed,
        lanes=spec.lanes,
        inlets=spec.inlets,
        intersections=tuple(it.name for it in spec.intersections),
        states=np.array(states, dtype=np.int64),
        inflows=np.array(inflows, dtype=np.int64).reshape(steps, spec.n_inlets),
        actions=np.array(actions, dtype=np.int64).reshape(steps, spec.m_intersections),
        modes=modes,
        path=path,
        stats=stats,
        times=np.array(times, dtype=float),
    )


# -- metrics -----------------------------------------------------------------
@dataclass
class Metrics:
    ssd: float
    dep: float | None
    ct_mean: float
    ct_max: float
    cap_violations: int  # normal caps exceeded outside relaxation windows
    extended_violations: int  # extended caps exceeded anywhere

    def as_dict(self) -> dict:
        return {"ssd": self.ssd, "dep": self.dep, "ct_mean": self.ct_mean, "ct_max": self.ct_max,
                "cap_violations": self.cap_violations, "extended_violations": self.extended_violations}


def steady_state_density(states: np.ndarray, window: int) -> float:
    """Lane mean of the time-average density over the final ``window`` states."""
    if window > len(states):
        raise ValueError(f"window {window} exceeds {len(states)} recorded states")
    return float(np.asarray(states[len(states) - window:], dtype=float).mean())


def emergency_path_density(states: np.ndarray, lanes: Sequence[int], path: Sequence[int], start: int, end: int) -> float:
    """Time-average over states ``start..end`` of the summed path-lane density."""
    pos = {lane: i for i, lane in enumerate(lanes)}
    idx = [pos[lane] for lane in path]
    end = min(end, len(states) - 1)
    return float(np.asarray(states[start : end + 1], dtype=float)[:, idx].sum(axis=1).mean())


def compute_metrics(record: RunRecord, caps, caps_extended, window: int, dep_window: tuple[int, int] | None = None) -> Metrics:
    """SSD, DEP (when a window and path exist), compute time and cap accounting.

    ``dep_window`` is the inclusive state range of the traversal; without it
    (or without a selected path) DEP is omitted.
    """
    states = record.states
    relaxed = record.relaxed_states()
    over = states > np.asarray(caps)[None, :]
    dep = None
    if dep_window is not None and record.path:
        dep = emergency_path_density(states, record.lanes, record.path, *dep_window)
    times = record.times if len(record.times) else np.zeros(1)
    return Metrics(
        ssd=steady_state_density(states, window),
        dep=dep,
        ct_mean=float(times.mean()),
        ct_max=float(times.max()),
        cap_violations=int(over[~relaxed].sum()),
        extended_violations=int((states > np.asarray(caps_extended)[None, :]).sum()),
    )


def scenario_metrics(scenario: Scenario, record: RunRecord) -> Metrics:
    ev = scenario.emergency
    dep_window = (ev.time, ev.priority_end) if ev is not None else None
    return compute_metrics(record, scenario.config.caps, scenario.config.caps_extended, scenario.ssd_window, dep_window)


def normalized(values: dict[str, float | None], reference: str) -> dict[str, float | None]:
    base = values[reference]
    return {k: (None if v is None or not base else v / base) for k, v in values.items()}


# -- batches -----------------------------------------------------------------
@dataclass
class BatchResult:
    scenario: str
    mode: str
    seeds: list[int]
    metrics: dict[str, list[Metrics]]
    digests: dict[str, list[str]] = field(default_factory=dict)

    def mean(self, controller: str, key: str) -> float | None:
        vals = [getattr(m, key) for m in self.metrics[controller]]
        if any(v is None for v in vals) or not vals:
            return None
        return float(np.mean(vals))

    def means(self, key: str) -> dict[str, float | None]:
        return {c: self.mean(c, key) for c in self.metrics}

    def violations(self) -> dict[str, tuple[int, int]]:
        return {c: (sum(m.cap_violations for m in ms), sum(m.extended_violations for m in ms)) for c, ms in self.metrics.items()}


def run_batch(scenario: Scenario, controllers: Iterable[str] = CONTROLLERS, runs: int = 100, base_seed: int = 0,
              steps: int | None = None, progress=None) -> BatchResult:
    """Seeds ``base_seed .. base_seed + runs - 1``; every controller sees the same disturbances."""
    controllers = list(controllers)
    seeds = [base_seed + i for i in range(runs)]
    metrics: dict[str, list[Metrics]] = {c: [] for c in controllers}
    digests: dict[str, list[str]] = {c: [] for c in controllers}
    for seed in seeds:
        for c in controllers:
            rec = run_closed_loop(scenario, c, seed=seed, steps=steps)
            metrics[c].append(scenario_metrics(scenario, rec))
            digests[c].append(rec.digest())
            if progress is not None:
                progress(c, seed)
    mode = "emergency" if scenario.emergency is not None else "normal"
    return BatchResult(scenario.name, mode, seeds, metrics, digests)


@dataclass
class SweepRow:
    horizon: int
    ssd: float
    ct: float
    ssd_norm: float = 1.0
    ct_norm: float = 1.0


def sweep_horizon(scenario: Scenario, horizons: Sequence[int], runs: int = 20, controller: str = "decentralized",
                  base_seed: int = 0, steps: int | None = None) -> list[SweepRow]:
    """Mean SSD and mean per-step compute time per horizon; normalized to the first row."""
    if not horizons or min(horizons) < 1:
        raise ValueError("horizons must be positive")
    rows = []
    for T in horizons:
        sc = scenario.with_(horizon=int(T))
        res = run_batch(sc, [controller], runs=runs, base_seed=base_seed, steps=steps)
        rows.append(SweepRow(int(T), res.mean(controller, "ssd"), res.mean(controller, "ct_mean")))
    base = rows[0]
    for r in rows:
        r.ssd_norm = r.ssd / base.ssd if base.ssd else float("nan")
        r.ct_norm = r.ct / base.ct if base.ct else float("nan")
    return rows


# -- CSV ---------------------------------------------------------------------
def csv_header(record: RunRecord) -> list[str]:
    return (["t"] + [f"x_{lane}" for lane in record.lanes] + [f"u_{lane}" for lane in record.inlets]
            + [f"lambda_{name}" for name in record.intersections] + ["mode", "ms"])


def write_csv(record: RunRecord, stream) -> None:
    """One row per state x(t); inputs, mode and time are those applied at t (blank on the last row)."""
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(csv_header(record))
    n_in, m = len(record.inlets), len(record.intersections)
    for t, x in enumerate(record.states):
        row = [t] + [int(v) for v in x]
        if t < record.steps:
            row += [int(v) for v in record.inflows[t]] + [int(v) for v in record.actions[t]]
            row += [record.modes[t], f"{1e3 * record.times[t]:.3f}"]
        else:
            row += [""] * (n_in + m + 2)
        w.writerow(row)


def read_csv(stream) -> dict:
    """Parse a run CSV back into arrays: states, inflows, actions, modes, ms."""
    rows = list(csv.reader(stream))
    header, body = rows[0], rows[1:]
    xs = [i for i, h in enumerate(header) if h.startswith("x_")]
    us = [i for i, h in enumerate(header) if h.startswith("u_")]
    ls = [i for i, h in enumerate(header) if h.startswith("lambda_")]
    mode_i, ms_i = header.index("mode"), header.index("ms")
    applied = [r for r in body if r[mode_i] != ""]
    return {
        "lanes": [int(header[i][2:]) for i in xs],
        "states": np.array([[int(r[i]) for i in xs] for r in body], dtype=np.int64).reshape(len(body), len(xs)),
        "inflows": np.array([[int(r[i]) for i in us] for r in applied], dtype=np.int64).reshape(len(applied), len(us)),
        "actions": np.array([[int(r[i]) for i in ls] for r in applied], dtype=np.int64).reshape(len(applied), len(ls)),
        "modes": [r[mode_i] for r in applied],
        "ms": [float(r[ms_i]) for r in applied],
    }


def csv_text(record: RunRecord) -> str:
    buf = io.StringIO()
    write_csv(record, buf)
    return buf.getvalue()
