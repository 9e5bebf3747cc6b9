"""Horizon predictions: disturbance-free traces and interval bands.

Every tendency matrix is elementwise nonnegative, so propagating the lower
and upper corners of a box through ``x -> A x + B U + d`` (or its rounded,
clamped version, which is monotone too) yields the exact band for the linear
model and a valid enclosure for the rounded one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .network import NetworkError, NetworkSpec, round_nonneg


@dataclass(frozen=True)
class PredictionTrace:
    """Disturbance-free states for k = 0..T_f, shape (T_f + 1, N)."""

    states: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, k):
        return self.states[k]


@dataclass(frozen=True)
class IntervalBand:
    """Per-step elementwise bounds, each of shape (T_f + 1, N)."""

    lower: np.ndarray
    upper: np.ndarray

    def __len__(self) -> int:
        return len(self.lower)

    def contains(self, k: int, x) -> bool:
        x = np.asarray(x)
        return bool(np.all(self.lower[k] <= x) and np.all(x <= self.upper[k]))


@dataclass(frozen=True)
class Containment:
    ok: bool
    step: int | None = None
    lane: int | None = None

    def __bool__(self) -> bool:
        return self.ok


def _inputs(spec: NetworkSpec, x0, actions, inflows):
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (spec.n_lanes,):
        raise NetworkError(f"initial state must have shape ({spec.n_lanes},)")
    inflows = np.asarray(inflows, dtype=float)
    if inflows.size == 0:
        inflows = inflows.reshape(len(inflows), spec.n_inlets)
    if len(actions) != len(inflows):
        raise NetworkError(f"plan length mismatch: {len(actions)} actions vs {len(inflows)} inflow vectors")
    if inflows.shape[1] != spec.n_inlets:
        raise NetworkError(f"inflow vectors must have length {spec.n_inlets}")
    As = [spec.tendency(spec.check_action(a)) for a in actions]
    bus = inflows @ spec.inlet_matrix.T
    return x0, As, bus


def linear_trace(As: Sequence[np.ndarray], bus: np.ndarray, x0: np.ndarray, offset=0.0) -> np.ndarray:
    """Iterate ``x <- A_k x + bu_k + offset``; returns shape (len(As) + 1, N)."""
    out = np.empty((len(As) + 1, len(x0)))
    out[0] = x0
    for k, A in enumerate(As):
        out[k + 1] = A @ out[k] + bus[k] + offset
    return out


def rounded_trace(As: Sequence[np.ndarray], bus: np.ndarray, x0: np.ndarray, offset=0) -> np.ndarray:
    """Iterate ``x <- max([A_k x + bu_k]_+ + offset, 0)``."""
    out = np.empty((len(As) + 1, len(x0)))
    out[0] = x0
    for k, A in enumerate(As):
        out[k + 1] = np.maximum(round_nonneg(A @ out[k] + bus[k]) + offset, 0.0)
    return out


def predict_linear(spec: NetworkSpec, x0, actions, inflows, with_disturbance: bool = False):
    """Linear-model prediction (non-integer, possibly negative values allowed).

    Returns a :class:`PredictionTrace` in disturbance-free mode, else an
    :class:`IntervalBand` with ``d_min``/``d_max`` added at every step.
    """
    x0, As, bus = _inputs(spec, x0, actions, inflows)
    if not with_disturbance:
        return PredictionTrace(linear_trace(As, bus, x0))
    return IntervalBand(
        lower=linear_trace(As, bus, x0, spec.d_min),
        upper=linear_trace(As, bus, x0, spec.d_max),
    )


def predict_rounded(spec: NetworkSpec, x0, actions, inflows, with_disturbance: bool = False):
    """Prediction through the rounded, clamped dynamics."""
    x0, As, bus = _inputs(spec, x0, actions, inflows)
    if not with_disturbance:
        return PredictionTrace(rounded_trace(As, bus, x0))
    return IntervalBand(
        lower=rounded_trace(As, bus, x0, spec.d_min),
        upper=rounded_trace(As, bus, x0, spec.d_max),
    )


def check_containment(band: IntervalBand, limits, labels: Sequence[int] | None = None) -> Containment:
    """Check ``upper(k) <= limits[k-1]`` for k = 1..T_f.

    ``limits`` is one per-lane vector (applied to every step) or an array of
    shape (T_f, N). The first violation is reported as (k, lane), with the
    lane given by label when ``labels`` is supplied and by position otherwise.
    """
    upper = np.asarray(band.upper)[1:]
    limits = np.asarray(limits, dtype=float)
    if limits.ndim <= 1:
        limits = np.broadcast_to(limits, upper.shape)
    if limits.shape != upper.shape:
        raise NetworkError(f"limits shape {limits.shape} does not match band steps {upper.shape}")
    bad = upper > limits
    if not bad.any():
        return Containment(True)
    k, i = np.argwhere(bad)[0]
    return Containment(False, int(k) + 1, labels[i] if labels is not None else int(i))


def affine_prediction(As: Sequence[np.ndarray], B_free: np.ndarray, bus_fixed: np.ndarray, x0: np.ndarray, offset=0.0):
    """Linear prediction as an affine map of the stacked free inflows.

    The free inflow vector stacks ``U_0, ..., U_{T-1}`` (each of width
    ``B_free.shape[1]``). Returns ``(c, M)`` with ``x(k) = c[k] + M[k] @ U``
    for k = 0..T, where ``bus_fixed[k]`` collects the inflow contribution
    that is not a decision variable.
    """
    T = len(As)
    n, m = B_free.shape
    c = np.empty((T + 1, n))
    M = np.zeros((T + 1, n, T * m))
    c[0] = x0
    for k, A in enumerate(As):
        c[k + 1] = A @ c[k] + bus_fixed[k] + offset
        M[k + 1] = A @ M[k]
        M[k + 1][:, k * m:(k + 1) * m] += B_free
    return c, M
