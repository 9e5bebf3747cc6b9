"""Scenario files (TOML): network, initial state, controller, units, events.

Schema (see ``data/benchmark.toml`` for a complete example)::

    name = "..."
    [network]
    lanes, inlets, edges            lane labels, [from, to] pairs
    green_p, outlet_p               default outflow fraction of green lanes / outlets
    disturbance_min/max             scalar or one value per lane
    opposite_pairs                  optional [a, b] pairs of opposite lanes
    [[network.intersections]]
    name, lanes
    configs = [{name, green, p = {lane = p}, splits = {lane = {dest = q}}}]
    [initial] state
    [controller]
    horizon, gamma_normal (scalar or per lane), gamma_emergency, theta
    (scalar, per-inlet diagonal or matrix), u_nom (vector or list of
    vectors per period), u_max, caps, caps_extended
    [run] steps, seed, ssd_window, baseline_dwell
    [[units]] name, intersections (names), lanes, inlets
    [emergency] time, entry, exit, arrival, traverse, recovery, path (optional)
    [[emergency.overrides]] time, arrival, traverse, recovery

Omitted p/split entries default to ``green_p`` and a uniform split over the
lane's out-edges. Without ``[[units]]`` each intersection gets its own unit.
"""
from __future__ import annotations

import re
import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .decentralized import UnitSpec, validate_units
from .mpc import ControllerConfig, NominalInflow, enumerate_paths
from .network import Intersection, LanePhase, NetworkSpec, uniform_phase, validate_network


class ScenarioError(ValueError):
    """Malformed scenario; the message names the file, field and line when known."""


@dataclass(frozen=True)
class CountdownOverride:
    time: int
    arrival: int
    traverse: int
    recovery: int


@dataclass(frozen=True)
class EmergencyEvent:
    time: int
    entry: int
    exit: int
    arrival: int
    traverse: int
    recovery: int
    overrides: tuple[CountdownOverride, ...] = ()
    path: tuple[int, ...] | None = None  # declared route; otherwise chosen at the event

    @property
    def priority_end(self) -> int:
        """Last period of the traversal window."""
        return self.time + self.arrival + self.traverse

    @property
    def relaxed_end(self) -> int:
        return self.time + self.arrival + self.traverse + self.recovery


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    spec: NetworkSpec
    x0: np.ndarray
    config: ControllerConfig
    units: tuple[UnitSpec, ...]
    steps: int
    seed: int = 0
    ssd_window: int = 10
    baseline_dwell: int = 2
    emergency: EmergencyEvent | None = None

    def with_(self, **changes) -> "Scenario":
        if "horizon" in changes:
            changes["config"] = replace(changes.get("config", self.config), horizon=changes.pop("horizon"))
        if "controller_seed" in changes:
            changes["config"] = replace(changes.get("config", self.config), seed=changes.pop("controller_seed"))
        return replace(self, **changes)

    def without_emergency(self) -> "Scenario":
        return replace(self, emergency=None)

    def problems(self) -> list[str]:
        out = [str(v) for v in validate_network(self.spec)]
        if out:
            return out
        try:
            self.config.check(self.spec)
        except ValueError as exc:
            out.append(str(exc))
        out.extend(validate_units(self.spec, self.units))
        if self.x0.shape != (self.spec.n_lanes,):
            out.append(f"initial state must have {self.spec.n_lanes} entries")
        elif np.any(self.x0 < 0) or np.any(self.x0 > self.config.caps):
            out.append("initial state must lie within the normal caps")
        if self.steps < 0:
            out.append("run length must be nonnegative")
        if not 1 <= self.ssd_window:
            out.append("ssd_window must be positive")
        if self.baseline_dwell < 1:
            out.append("baseline_dwell must be positive")
        ev = self.emergency
        if ev is not None:
            if not 0 <= ev.time < max(self.steps, 1):
                out.append(f"emergency time {ev.time} outside run length {self.steps}")
            try:
                if not enumerate_paths(self.spec, ev.entry, ev.exit):
                    out.append(f"no lane path from {ev.entry} to {ev.exit}")
            except ValueError as exc:
                out.append(str(exc))
            if ev.path is not None:
                try:
                    if ev.path not in enumerate_paths(self.spec, ev.entry, ev.exit):
                        out.append(f"declared emergency path {list(ev.path)} is not a lane path from {ev.entry} to {ev.exit}")
                except ValueError:
                    pass
            for o in ev.overrides:
                if o.time <= ev.time:
                    out.append(f"override at {o.time} precedes the emergency")
        return out


def _line_of(text: str, key: str) -> int | None:
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=|[{{,]\s*{re.escape(key)}\s*=")
    for n, line in enumerate(text.splitlines(), 1):
        if pat.search(line):
            return n
    return None


class _Reader:
    def __init__(self, text: str, source: str) -> None:
        self.text = text
        self.source = source

    def fail(self, field: str, msg: str) -> ScenarioError:
        line = _line_of(self.text, field.split(".")[-1].split("[")[0])
        where = f"{self.source}: field '{field}'" + (f" (line {line})" if line else "")
        return ScenarioError(f"{where}: {msg}")

    def get(self, table: dict, key: str, path: str, kind=None, default: Any = ...):
        field = f"{path}.{key}" if path else key
        if key not in table:
            if default is ...:
                raise self.fail(field, "missing")
            return default
        value = table[key]
        if kind is not None and not _is(value, kind):
            raise self.fail(field, f"expected {kind.__name__ if isinstance(kind, type) else kind}, got {value!r}")
        return value

    def ints(self, table, key, path, default: Any = ...) -> list[int]:
        value = self.get(table, key, path, default=default)
        if not isinstance(value, list) or not all(_is(v, int) for v in value):
            raise self.fail(f"{path}.{key}", f"expected a list of integers, got {value!r}")
        return [int(v) for v in value]


def _is(value, kind) -> bool:
    if kind is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if kind is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, kind)


def _lane_vector(r: _Reader, value, n: int, field: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float) if _numeric(value) else None
    if arr is None or arr.ndim > 1 or (arr.ndim == 1 and arr.shape != (n,)):
        raise r.fail(field, f"expected a number or {n} numbers")
    return np.broadcast_to(arr, (n,)).copy()


def _numeric(value) -> bool:
    if _is(value, float):
        return True
    return isinstance(value, list) and all(_is(v, float) for v in value)


def _network(r: _Reader, net: dict) -> NetworkSpec:
    lanes = r.ints(net, "lanes", "network")
    inlets = r.ints(net, "inlets", "network")
    edges = []
    for k, e in enumerate(r.get(net, "edges", "network", list)):
        if not (isinstance(e, list) and len(e) == 2 and all(_is(v, int) for v in e)):
            raise r.fail(f"network.edges[{k}]", f"expected a [from, to] pair, got {e!r}")
        edges.append((int(e[0]), int(e[1])))
    green_p = float(r.get(net, "green_p", "network", float, 0.6))
    outlet_p = float(r.get(net, "outlet_p", "network", float, green_p))
    pairs = []
    for k, e in enumerate(r.get(net, "opposite_pairs", "network", list, [])):
        if not (isinstance(e, list) and len(e) == 2):
            raise r.fail(f"network.opposite_pairs[{k}]", "expected a pair of lanes")
        pairs.append(frozenset(int(v) for v in e))

    inters = []
    for j, it in enumerate(r.get(net, "intersections", "network", list)):
        path = f"network.intersections[{j}]"
        name = str(r.get(it, "name", path, str))
        ilanes = tuple(r.ints(it, "lanes", path))
        names, phases = [], []
        for c, cfg in enumerate(r.get(it, "configs", path, list)):
            cpath = f"{path}.configs[{c}]"
            names.append(str(r.get(cfg, "name", cpath, str, f"c{c + 1}")))
            green = set(r.ints(cfg, "green", cpath))
            unknown = green - set(ilanes)
            if unknown:
                raise r.fail(f"{cpath}.green", f"lanes {sorted(unknown)} are not controlled by {name}")
            p_over = r.get(cfg, "p", cpath, dict, {})
            s_over = r.get(cfg, "splits", cpath, dict, {})
            table = {}
            for lane in ilanes:
                ph = uniform_phase(edges, lane, lane in green, green_p)
                if lane in green:
                    p = float(p_over.get(str(lane), ph.p))
                    splits = {int(k): float(v) for k, v in s_over[str(lane)].items()} if str(lane) in s_over else dict(ph.splits)
                    ph = LanePhase(True, p, splits)
                table[lane] = ph
            phases.append(table)
        inters.append(Intersection(name, ilanes, tuple(names), tuple(phases)))

    controlled = {lane for it in inters for lane in it.lanes}
    sources = {i for i, _ in edges}
    free = {lane: uniform_phase(edges, lane, True, outlet_p) for lane in lanes if lane not in controlled and lane not in sources}
    d_min = r.get(net, "disturbance_min", "network", default=0)
    d_max = r.get(net, "disturbance_max", "network", default=0)
    for key, val in (("disturbance_min", d_min), ("disturbance_max", d_max)):
        if not (_is(val, int) or (isinstance(val, list) and len(val) == len(lanes) and all(_is(v, int) for v in val))):
            raise r.fail(f"network.{key}", f"expected an integer or {len(lanes)} integers")
    return NetworkSpec(
        lanes=tuple(lanes),
        inlets=tuple(inlets),
        edges=frozenset(edges),
        intersections=tuple(inters),
        free_lanes=free,
        d_min=np.asarray(d_min),
        d_max=np.asarray(d_max),
        opposite_pairs=frozenset(pairs),
    )


def _controller(r: _Reader, c: dict, spec: NetworkSpec, seed: int) -> ControllerConfig:
    n, m = spec.n_lanes, spec.n_inlets
    u_nom = r.get(c, "u_nom", "controller", list)
    rows = u_nom if u_nom and isinstance(u_nom[0], list) else [u_nom]
    if not all(isinstance(row, list) and len(row) == m and all(_is(v, float) for v in row) for row in rows):
        raise r.fail("controller.u_nom", f"expected {m} inflows or a list of such rows")
    theta = r.get(c, "theta", "controller")
    if _is(theta, float):
        theta = float(theta) * np.eye(m)
    elif isinstance(theta, list) and len(theta) == m and all(_is(v, float) for v in theta):
        theta = np.diag(np.asarray(theta, dtype=float))
    elif isinstance(theta, list) and all(isinstance(row, list) and len(row) == m for row in theta) and len(theta) == m:
        theta = np.asarray(theta, dtype=float)
    else:
        raise r.fail("controller.theta", f"expected a scalar, {m} diagonal entries or an {m}x{m} matrix")
    nominal = NominalInflow(rows)
    u_max = r.get(c, "u_max", "controller", default=2.0 * float(nominal.rows.max(initial=0.0)))
    try:
        return ControllerConfig(
            horizon=int(r.get(c, "horizon", "controller", int)),
            gamma_normal=_lane_vector(r, r.get(c, "gamma_normal", "controller", default=1.0), n, "controller.gamma_normal"),
            gamma_emergency=float(r.get(c, "gamma_emergency", "controller", float)),
            theta=theta,
            u_nom=nominal,
            caps=_lane_vector(r, r.get(c, "caps", "controller"), n, "controller.caps"),
            caps_extended=_lane_vector(r, r.get(c, "caps_extended", "controller"), n, "controller.caps_extended"),
            u_max=_lane_vector(r, u_max, m, "controller.u_max"),
            seed=seed,
        )
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise r.fail("controller", str(exc)) from None


def _units(r: _Reader, raw: list, spec: NetworkSpec) -> tuple[UnitSpec, ...]:
    by_name = {it.name: j for j, it in enumerate(spec.intersections)}
    if not raw:
        return _default_units(spec)
    out = []
    for k, u in enumerate(raw):
        path = f"units[{k}]"
        names = r.get(u, "intersections", path, list)
        unknown = [s for s in names if s not in by_name]
        if unknown:
            raise r.fail(f"{path}.intersections", f"unknown intersections {unknown}")
        out.append(UnitSpec(
            name=str(r.get(u, "name", path, str)),
            intersections=tuple(by_name[s] for s in names),
            lanes=tuple(r.ints(u, "lanes", path)),
            inlets=tuple(r.ints(u, "inlets", path, [])),
        ))
    return tuple(out)


def _default_units(spec: NetworkSpec) -> tuple[UnitSpec, ...]:
    """One unit per intersection; an uncontrolled lane joins its first feeder's unit."""
    owner = {lane: j for j, it in enumerate(spec.intersections) for lane in it.lanes}
    for lane in spec.lanes:
        if lane not in owner:
            feeders = sorted(i for (i, t) in spec.edges if t == lane and i in owner)
            owner[lane] = owner[feeders[0]] if feeders else 0
    units = []
    for j, it in enumerate(spec.intersections):
        lanes = tuple(lane for lane in spec.lanes if owner[lane] == j)
        units.append(UnitSpec(it.name, (j,), lanes, tuple(i for i in spec.inlets if i in lanes)))
    return tuple(units)


def _emergency(r: _Reader, e: dict | None) -> EmergencyEvent | None:
    if e is None:
        return None
    fields = {k: int(r.get(e, k, "emergency", int)) for k in ("time", "entry", "exit", "arrival", "traverse", "recovery")}
    overrides = []
    for k, o in enumerate(r.get(e, "overrides", "emergency", list, [])):
        path = f"emergency.overrides[{k}]"
        overrides.append(CountdownOverride(*(int(r.get(o, f, path, int)) for f in ("time", "arrival", "traverse", "recovery"))))
    for k, v in fields.items():
        if v < 0:
            raise r.fail(f"emergency.{k}", "must be nonnegative")
    path = e.get("path")
    if path is not None:
        path = tuple(r.ints(e, "path", "emergency"))
    return EmergencyEvent(**fields, overrides=tuple(sorted(overrides, key=lambda o: o.time)), path=path)


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{source}: {exc}") from None
    r = _Reader(text, source)
    spec = _network(r, r.get(data, "network", "", dict))
    run = r.get(data, "run", "", dict, {})
    seed = int(r.get(run, "seed", "run", int, 0))
    x0 = np.asarray(r.ints(r.get(data, "initial", "", dict), "state", "initial"), dtype=np.int64)
    scenario = Scenario(
        name=str(r.get(data, "name", "", str, Path(source).stem)),
        spec=spec,
        x0=x0,
        config=_controller(r, r.get(data, "controller", "", dict), spec, seed),
        units=_units(r, r.get(data, "units", "", list, []), spec),
        steps=int(r.get(run, "steps", "run", int, 40)),
        seed=seed,
        ssd_window=int(r.get(run, "ssd_window", "run", int, 10)),
        baseline_dwell=int(r.get(run, "baseline_dwell", "run", int, 2)),
        emergency=_emergency(r, r.get(data, "emergency", "", dict, None)),
    )
    return scenario


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc.strerror or exc}") from None
    return parse_scenario(text, str(path))


def benchmark_text() -> str:
    return resources.files("ctm_mpc").joinpath("data/benchmark.toml").read_text()


def load_benchmark() -> Scenario:
    return parse_scenario(benchmark_text(), "benchmark.toml")
