"""Signalized lane network and its discrete-time cell-transmission dynamics.

Lanes carry integer vehicle counts. Each controlled lane belongs to exactly
one intersection, whose local configuration decides whether the lane's light
is green, which fraction ``p`` of its vehicles leaves per period, and how the
leaving vehicles split over the lane's out-edges. Outlets are uncontrolled.

Lanes are addressed by their integer labels in the public API; matrices and
state vectors are indexed by lane position (``spec.index(label)``).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

SignalAction = tuple  # one local configuration index per intersection

_ROUND_EPS = 1e-9
_SUM_TOL = 1e-9


@dataclass(frozen=True)
class LanePhase:
    """Light state of one lane under one local configuration."""

    green: bool
    p: float = 0.0
    splits: Mapping[int, float] = field(default_factory=dict)


@dataclass(frozen=True)
class Intersection:
    name: str
    lanes: tuple[int, ...]
    config_names: tuple[str, ...]
    # phases[c][lane] for every controlled lane and local configuration c
    phases: tuple[Mapping[int, LanePhase], ...]

    @property
    def n_configs(self) -> int:
        return len(self.config_names)


@dataclass(frozen=True)
class Violation:
    kind: str
    where: str
    message: str

    def __str__(self) -> str:
        return f"{self.kind} at {self.where}: {self.message}"


class NetworkError(ValueError):
    """Rejected input to a network operation."""


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    """Immutable topology, phase tables and disturbance box of a network.

    ``free_lanes`` holds the constant light data of uncontrolled lanes
    (outlets); a missing entry means the lane never releases vehicles.
    """

    lanes: tuple[int, ...]
    inlets: tuple[int, ...]
    edges: frozenset[tuple[int, int]]
    intersections: tuple[Intersection, ...]
    free_lanes: Mapping[int, LanePhase]
    d_min: np.ndarray
    d_max: np.ndarray
    opposite_pairs: frozenset[frozenset[int]] = frozenset()

    def __post_init__(self) -> None:
        d_min = np.array(self.d_min, dtype=np.int64).reshape(-1)
        d_max = np.array(self.d_max, dtype=np.int64).reshape(-1)
        if d_min.size == 1:
            d_min = np.full(len(self.lanes), d_min[0], dtype=np.int64)
        if d_max.size == 1:
            d_max = np.full(len(self.lanes), d_max[0], dtype=np.int64)
        d_min.setflags(write=False)
        d_max.setflags(write=False)
        object.__setattr__(self, "d_min", d_min)
        object.__setattr__(self, "d_max", d_max)
        object.__setattr__(self, "_pos", {lane: i for i, lane in enumerate(self.lanes)})
        object.__setattr__(self, "_cache", {})

    # -- sizes and lookups ---------------------------------------------------
    @property
    def n_lanes(self) -> int:
        return len(self.lanes)

    @property
    def n_inlets(self) -> int:
        return len(self.inlets)

    @property
    def m_intersections(self) -> int:
        return len(self.intersections)

    def index(self, lane: int) -> int:
        try:
            return self._pos[lane]
        except KeyError:
            raise NetworkError(f"unknown lane {lane!r}") from None

    def indices(self, lanes: Iterable[int]) -> list[int]:
        return [self.index(lane) for lane in lanes]

    def successors(self, lane: int) -> list[int]:
        return sorted(j for (i, j) in self.edges if i == lane)

    @property
    def outlets(self) -> tuple[int, ...]:
        sources = {i for i, _ in self.edges}
        return tuple(lane for lane in self.lanes if lane not in sources)

    @property
    def inlet_matrix(self) -> np.ndarray:
        """N x N_in 0/1 matrix; entry (i, j) is 1 iff lane i is the j-th inlet."""
        if "B" not in self._cache:
            B = np.zeros((self.n_lanes, self.n_inlets))
            for j, lane in enumerate(self.inlets):
                B[self.index(lane), j] = 1.0
            B.setflags(write=False)
            self._cache["B"] = B
        return self._cache["B"]

    @property
    def action_sizes(self) -> tuple[int, ...]:
        return tuple(inter.n_configs for inter in self.intersections)

    def actions(self) -> list[SignalAction]:
        """All global actions, in lexicographic order of local indices."""
        return list(itertools.product(*(range(m) for m in self.action_sizes)))

    def controller_of(self, lane: int) -> int | None:
        for j, inter in enumerate(self.intersections):
            if lane in inter.lanes:
                return j
        return None

    def phase(self, lane: int, action: SignalAction) -> LanePhase:
        j = self.controller_of(lane)
        if j is None:
            return self.free_lanes.get(lane, LanePhase(green=False))
        return self.intersections[j].phases[action[j]][lane]

    def check_action(self, action: Sequence[int]) -> SignalAction:
        action = tuple(int(a) for a in action)
        if len(action) != self.m_intersections:
            raise NetworkError(
                f"action has {len(action)} entries, network has {self.m_intersections} intersections"
            )
        for j, (a, m) in enumerate(zip(action, self.action_sizes)):
            if not 0 <= a < m:
                raise NetworkError(
                    f"action index {a} invalid for intersection {self.intersections[j].name} ({m} configurations)"
                )
        return action

    # -- matrix assembly -----------------------------------------------------
    def _column(self, lane: int, phase: LanePhase) -> np.ndarray:
        col = np.zeros(self.n_lanes)
        i = self.index(lane)
        col[i] = 1.0 - phase.p
        for dest, q in phase.splits.items():
            col[self.index(dest)] += q * phase.p
        return col

    def _blocks(self) -> tuple[np.ndarray, list[list[tuple[list[int], np.ndarray]]]]:
        if "blocks" not in self._cache:
            base = np.eye(self.n_lanes)
            for lane, phase in self.free_lanes.items():
                base[:, self.index(lane)] = self._column(lane, phase)
            blocks = []
            for inter in self.intersections:
                per_config = []
                for phases in inter.phases:
                    cols = [self.index(lane) for lane in inter.lanes]
                    mat = np.column_stack([self._column(lane, phases[lane]) for lane in inter.lanes])
                    per_config.append((cols, mat))
                blocks.append(per_config)
            self._cache["blocks"] = (base, blocks)
        return self._cache["blocks"]

    def tendency(self, action: SignalAction) -> np.ndarray:
        """Cached, read-only traffic tendency matrix for ``action``."""
        key = ("A", tuple(action))
        A = self._cache.get(key)
        if A is None:
            action = self.check_action(action)
            base, blocks = self._blocks()
            A = base.copy()
            for j, c in enumerate(action):
                cols, mat = blocks[j][c]
                A[:, cols] = mat
            A.setflags(write=False)
            self._cache[key] = A
        return A


def assemble_tendency(spec: NetworkSpec, action: Sequence[int]) -> np.ndarray:
    """Return A(action): diagonal ``1 - p_i``, entry (i, j) equal to ``q_{j,i} p_j``."""
    return spec.tendency(spec.check_action(action)).copy()


def round_nonneg(v: np.ndarray) -> np.ndarray:
    """Round each entry to the closest nonnegative integer, ties away from zero."""
    return np.floor(np.maximum(v, 0.0) + 0.5 + _ROUND_EPS)


def _as_state(spec: NetworkSpec, x) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != (spec.n_lanes,):
        raise NetworkError(f"state must have shape ({spec.n_lanes},), got {x.shape}")
    if np.any(x < 0) or np.any(x != np.round(x)):
        raise NetworkError("state entries must be nonnegative integers")
    return x.astype(np.int64)


def _as_inflow(spec: NetworkSpec, u) -> np.ndarray:
    u = np.asarray(u)
    if u.shape != (spec.n_inlets,):
        raise NetworkError(f"inflow must have shape ({spec.n_inlets},), got {u.shape}")
    if np.any(u < 0) or np.any(u != np.round(u)):
        raise NetworkError("inflow entries must be nonnegative integers")
    return u.astype(np.int64)


def step_exact(spec: NetworkSpec, state, action, inflow, disturbance=None) -> np.ndarray:
    """One period of the rounded dynamics ``max([A x + B U]_+ + d, 0)``."""
    x = _as_state(spec, state)
    u = _as_inflow(spec, inflow)
    A = spec.tendency(spec.check_action(action))
    if disturbance is None:
        d = np.zeros(spec.n_lanes, dtype=np.int64)
    else:
        d = np.asarray(disturbance)
        if d.shape != (spec.n_lanes,) or np.any(d != np.round(d)):
            raise NetworkError("disturbance must be an integer vector of length N")
        if np.any(d < spec.d_min) or np.any(d > spec.d_max):
            raise NetworkError("disturbance outside the disturbance box")
        d = d.astype(np.int64)
    nxt = round_nonneg(A @ x + spec.inlet_matrix @ u).astype(np.int64) + d
    return np.maximum(nxt, 0)


def sample_disturbance(spec: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """Independent uniform integer draw per lane from ``[d_min_i, d_max_i]``."""
    return rng.integers(spec.d_min, spec.d_max + 1, dtype=np.int64)


def validate_network(spec: NetworkSpec) -> list[Violation]:
    """Check every structural invariant; an empty list means the network is valid."""
    out: list[Violation] = []
    lanes = set(spec.lanes)

    if len(lanes) != len(spec.lanes):
        out.append(Violation("duplicate lane", "lanes", "lane labels must be unique"))
    for lane in spec.inlets:
        if lane not in lanes:
            out.append(Violation("unknown lane", f"inlet {lane}", "inlet is not a lane"))
    if len(set(spec.inlets)) != len(spec.inlets):
        out.append(Violation("duplicate inlet", "inlets", "inlets must be unique"))
    if len(spec.inlets) >= len(spec.lanes):
        out.append(Violation("too many inlets", "inlets", "need N_in < N"))

    for i, j in sorted(spec.edges):
        if i not in lanes or j not in lanes:
            out.append(Violation("unknown lane", f"edge ({i},{j})", "edge endpoint is not a lane"))
        if i == j:
            out.append(Violation("self loop", f"edge ({i},{j})", "lane cannot feed itself"))
        if (j, i) in spec.edges and i < j:
            out.append(Violation("bidirectional edge", f"edge ({i},{j})", f"both ({i},{j}) and ({j},{i}) present"))
    for pair in spec.opposite_pairs:
        a, b = sorted(pair)
        if (a, b) in spec.edges or (b, a) in spec.edges:
            out.append(Violation("u-turn", f"lanes {a},{b}", "opposite lanes of one road cannot be connected"))

    owner: dict[int, str] = {}
    outlets = set(spec.outlets)
    for inter in spec.intersections:
        if inter.n_configs == 0:
            out.append(Violation("empty action set", f"intersection {inter.name}", "needs at least one configuration"))
        if len(inter.phases) != inter.n_configs:
            out.append(Violation("phase table", f"intersection {inter.name}", "one phase map per configuration required"))
        for lane in inter.lanes:
            if lane not in lanes:
                out.append(Violation("unknown lane", f"intersection {inter.name}", f"lane {lane} does not exist"))
            elif lane in owner:
                out.append(Violation("multiple controllers", f"lane {lane}", f"controlled by {owner[lane]} and {inter.name}"))
            owner.setdefault(lane, inter.name)
            if lane in outlets:
                out.append(Violation("controlled outlet", f"lane {lane}", "outlets must be uncontrolled"))
        for cname, phases in zip(inter.config_names, inter.phases):
            for lane in inter.lanes:
                where = f"intersection {inter.name} configuration {cname} lane {lane}"
                if lane not in phases:
                    out.append(Violation("phase table", where, "missing phase entry"))
                    continue
                out.extend(_check_phase(spec, lane, phases[lane], where))
            extra = set(phases) - set(inter.lanes)
            for lane in sorted(extra):
                out.append(Violation("phase table", f"intersection {inter.name} configuration {cname}", f"lane {lane} is not controlled here"))

    for lane, phase in spec.free_lanes.items():
        where = f"free lane {lane}"
        if lane in owner:
            out.append(Violation("multiple controllers", where, f"also controlled by {owner[lane]}"))
        out.extend(_check_phase(spec, lane, phase, where))
    for lane in spec.lanes:
        if lane not in owner and lane not in outlets and lane not in spec.free_lanes:
            out.append(Violation("uncontrolled lane", f"lane {lane}", "non-outlet lane has no light and no free phase"))

    if spec.d_min.shape != (spec.n_lanes,) or spec.d_max.shape != (spec.n_lanes,):
        out.append(Violation("disturbance box", "disturbance", "bounds must have length N"))
    else:
        for k in np.flatnonzero((spec.d_min > 0) | (spec.d_max < 0)):
            out.append(Violation("disturbance box", f"lane {spec.lanes[k]}", "need d_min <= 0 <= d_max"))
    return out


def _check_phase(spec: NetworkSpec, lane: int, phase: LanePhase, where: str) -> list[Violation]:
    out = []
    if not 0.0 <= phase.p <= 1.0:
        out.append(Violation("outflow fraction", where, f"p = {phase.p} outside [0, 1]"))
    for dest, q in phase.splits.items():
        if (lane, dest) not in spec.edges:
            out.append(Violation("split off edge", where, f"split toward {dest} but ({lane},{dest}) is not an edge"))
        if not 0.0 <= q <= 1.0:
            out.append(Violation("split fraction", where, f"q toward {dest} = {q} outside [0, 1]"))
    if not phase.green:
        if phase.p != 0.0 or any(q != 0.0 for q in phase.splits.values()):
            out.append(Violation("red lane releases", where, "red light requires p = 0 and zero splits"))
    elif spec.successors(lane):
        total = sum(phase.splits.values())
        if abs(total - 1.0) > _SUM_TOL:
            out.append(Violation("split fractions sum != 1", where, f"splits sum to {total:g}"))
    return out


def uniform_phase(spec_edges: Iterable[tuple[int, int]], lane: int, green: bool, p: float) -> LanePhase:
    """Green lanes split uniformly over their out-edges; red lanes release nothing."""
    if not green:
        return LanePhase(green=False)
    dests = sorted(j for (i, j) in spec_edges if i == lane)
    splits = {d: 1.0 / len(dests) for d in dests} if dests else {}
    return LanePhase(green=True, p=p, splits=splits)


def build_network(
    lanes: Sequence[int],
    inlets: Sequence[int],
    edges: Iterable[tuple[int, int]],
    intersections: Sequence[tuple[str, Sequence[int], Sequence[Sequence[int]]]],
    green_p: float = 0.6,
    outlet_p: float | None = None,
    d_min=0,
    d_max=0,
    opposite_pairs: Iterable[tuple[int, int]] = (),
) -> NetworkSpec:
    """Network with uniform phases.

    ``intersections`` lists ``(name, controlled lanes, configurations)`` where
    each configuration is the set of its green lanes. Uncontrolled lanes
    without out-edges release ``outlet_p`` (default ``green_p``) per period.
    """
    edges = [tuple(e) for e in edges]
    inters = []
    for name, ilanes, configs in intersections:
        phases = tuple({lane: uniform_phase(edges, lane, lane in set(green), green_p) for lane in ilanes} for green in configs)
        inters.append(Intersection(name, tuple(ilanes), tuple(f"c{c + 1}" for c in range(len(configs))), phases))
    controlled = {lane for _, ilanes, _ in intersections for lane in ilanes}
    sources = {i for i, _ in edges}
    p_out = green_p if outlet_p is None else outlet_p
    free = {lane: uniform_phase(edges, lane, True, p_out) for lane in lanes if lane not in controlled and lane not in sources}
    return NetworkSpec(
        lanes=tuple(lanes),
        inlets=tuple(inlets),
        edges=frozenset(edges),
        intersections=tuple(inters),
        free_lanes=free,
        d_min=np.asarray(d_min),
        d_max=np.asarray(d_max),
        opposite_pairs=frozenset(frozenset(p) for p in opposite_pairs),
    )
