"""Bounded-integer convex QP for inflow plans.

Problems have the form::

    minimize    0.5 u'Hu + g'u + const
    subject to  G u <= h,   lo <= u <= hi,   u integer

with ``H`` positive semidefinite and ``G`` elementwise nonnegative. The sign
condition holds for every inflow problem built from the network (upper bands
grow with inflow) and makes the lower box corner the most permissive point,
so feasibility of any sub-box is decided by one evaluation.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np


class InfeasibleError(Exception):
    """No point satisfies the constraints in the requested box."""


@dataclass(frozen=True)
class InflowQP:
    H: np.ndarray
    g: np.ndarray
    G: np.ndarray
    h: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    const: float = 0.0
    horizon: int = 1
    # constraint row -> (prediction step k, lane position); for diagnostics
    rows: tuple = field(default=(), compare=False)

    def __post_init__(self) -> None:
        n = len(self.g)
        H = np.asarray(self.H, dtype=float).reshape(n, n)
        G = np.asarray(self.G, dtype=float).reshape(np.asarray(self.h).size, n)
        object.__setattr__(self, "H", 0.5 * (H + H.T))
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "g", np.asarray(self.g, dtype=float))
        object.__setattr__(self, "h", np.asarray(self.h, dtype=float).reshape(-1))
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        if np.any(G < 0):
            raise ValueError("constraint matrix must be elementwise nonnegative")
        if np.any(self.lo > self.hi):
            raise ValueError("empty box")

    @property
    def n(self) -> int:
        return len(self.g)

    def objective(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(0.5 * u @ self.H @ u + self.g @ u + self.const)

    def feasible(self, u, tol: float = 1e-9) -> bool:
        u = np.asarray(u, dtype=float)
        if np.any(u < self.lo - tol) or np.any(u > self.hi + tol):
            return False
        return bool(np.all(self.G @ u <= self.h + tol * (1.0 + np.abs(self.h))))


@dataclass
class Relaxation:
    u: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    working: tuple = ()  # final working set, reusable as a warm start


def _null_space(C: np.ndarray, n: int) -> np.ndarray:
    if len(C) == 0:
        return np.eye(n)
    _, s, vt = np.linalg.svd(C)
    rank = int(np.sum(s > 1e-12 * max(1.0, s[0])))
    return vt[rank:].T


def solve_qp_relaxation(qp: InflowQP, lo=None, hi=None, start=None, max_iter: int = 500, working=(), kkt: bool = True) -> Relaxation:
    """Primal active-set solve of the continuous relaxation over ``[lo, hi]``.

    Starts from ``start`` when it is feasible, else from the lower corner.
    Cap rows in ``working`` that are active at the start point join the
    initial working set, together with the active bounds. ``kkt=False``
    skips the residual computation (reported as NaN).

    Bounds in the working set fix coordinates; the step solves the KKT
    system of the free coordinates and the working cap rows. When that system
    is singular (zero-curvature directions) a null-space step is taken and
    flat descent directions are followed to the nearest blocking constraint,
    which the box always supplies.
    """
    lo = qp.lo if lo is None else np.asarray(lo, dtype=float)
    hi = qp.hi if hi is None else np.asarray(hi, dtype=float)
    n = qp.n
    H, g, G, h = qp.H, qp.g, qp.G, qp.h
    if np.any(lo > hi) or not _feasible_corner(qp, lo):
        raise InfeasibleError("sub-box infeasible")

    m = len(h)
    if start is not None:
        x = np.clip(np.asarray(start, dtype=float), lo, hi)
        if np.any(G @ x > h + 1e-12):
            x = lo.astype(float).copy()
    else:
        x = lo.astype(float).copy()
    # working set: coordinates fixed at a bound (+1 upper, -1 lower) and cap rows
    fix = np.where(x >= hi, 1, np.where(x <= lo, -1, 0))
    R: list[int] = []
    for r in working:
        if r < m and G[r] @ x >= h[r] - 1e-9 * (1.0 + abs(h[r])):
            R.append(int(r))
    if R and (not np.any(fix == 0) or np.linalg.matrix_rank(G[R][:, fix == 0]) < len(R)):
        R = []
    scale = max(1.0, float(np.abs(H).max(initial=0.0)))
    tol_p = 1e-11

    it = 0
    for it in range(1, max_iter + 1):
        grad = H @ x + g
        free = np.flatnonzero(fix == 0)
        p, mu_r, unbounded = _kkt_step(H, grad, G, R, free, fix, n, m, scale)
        if np.abs(p).max(initial=0.0) <= tol_p * (1.0 + np.abs(x).max(initial=0.0)):
            # multipliers: cap rows from the solve, bounds from the reduced gradient
            resid = grad + (G[R].T @ mu_r if R else 0.0)
            mult = np.where(fix == 1, -resid, np.where(fix == -1, resid, np.inf))
            mult[lo >= hi] = np.inf  # fixed by the box itself
            j_b = int(np.argmin(mult)) if n else -1
            j_r = int(np.argmin(mu_r)) if R else -1
            best_b = mult[j_b] if n else np.inf
            best_r = mu_r[j_r] if R else np.inf
            if min(best_b, best_r) >= -1e-10 * scale:
                break
            if best_r <= best_b:
                R.pop(j_r)
            else:
                fix[j_b] = 0
            continue
        # ratio test over caps not in the working set and over free bounds
        alpha, block = (np.inf if unbounded else 1.0), None
        if m:
            Gp = G @ p
            Gp[R] = 0.0
            rows = np.flatnonzero(Gp > 1e-14 * (1.0 + np.abs(G).sum(axis=1)))
            if len(rows):
                ratios = np.maximum(h[rows] - G[rows] @ x, 0.0) / Gp[rows]
                k = int(np.argmin(ratios))
                if ratios[k] < alpha:
                    alpha, block = ratios[k], ("row", int(rows[k]))
        up = np.flatnonzero((fix == 0) & (p > 1e-14))
        if len(up):
            ratios = np.maximum(hi[up] - x[up], 0.0) / p[up]
            k = int(np.argmin(ratios))
            if ratios[k] < alpha:
                alpha, block = ratios[k], ("hi", int(up[k]))
        dn = np.flatnonzero((fix == 0) & (p < -1e-14))
        if len(dn):
            ratios = np.maximum(x[dn] - lo[dn], 0.0) / -p[dn]
            k = int(np.argmin(ratios))
            if ratios[k] < alpha:
                alpha, block = ratios[k], ("lo", int(dn[k]))
        if not np.isfinite(alpha):
            raise RuntimeError("unbounded relaxation; box bounds must be finite")
        x = x + alpha * p
        if block is not None:
            kind, j = block
            if kind == "row":
                R.append(j)
            elif kind == "hi":
                x[j], fix[j] = hi[j], 1
            else:
                x[j], fix[j] = lo[j], -1
    x = np.clip(x, lo, hi)
    residual = _kkt_residual(qp, x, lo, hi) if kkt else float("nan")
    return Relaxation(x, qp.objective(x), residual, it, tuple(R))


def _kkt_step(H, grad, G, R, free, fix, n, m, scale):
    """Equality-constrained step: returns (p, cap multipliers, unbounded flag)."""
    p = np.zeros(n)
    nf, nr = len(free), len(R)
    if nf == 0:
        mu = np.linalg.lstsq(G[R].T, -grad, rcond=None)[0] if nr else np.zeros(0)
        return p, mu, False
    GR = G[R][:, free] if nr else np.zeros((0, nf))
    K = np.zeros((nf + nr, nf + nr))
    K[:nf, :nf] = H[np.ix_(free, free)]
    K[:nf, nf:] = GR.T
    K[nf:, :nf] = GR
    rhs = np.concatenate([-grad[free], np.zeros(nr)])
    try:
        L = np.linalg.cholesky(K[:nf, :nf])
        if np.min(np.diag(L)) ** 2 <= 1e-11 * scale:
            raise np.linalg.LinAlgError
        sol = np.linalg.solve(K, rhs)
        p[free] = sol[:nf]
        return p, sol[nf:], False
    except np.linalg.LinAlgError:
        pass
    # singular reduced Hessian: null space of the working constraints
    eye = np.eye(n)
    rows = [G[r] for r in R] + [eye[i] for i in np.flatnonzero(fix != 0)]
    Cw = np.array(rows).reshape(len(rows), n)
    Z = _null_space(Cw, n)
    Hr = Z.T @ H @ Z
    gr = Z.T @ grad
    unbounded = False
    if Z.shape[1]:
        evals, evecs = np.linalg.eigh(Hr)
        flat = evals <= 1e-11 * scale
        g_flat = evecs[:, flat] @ (evecs[:, flat].T @ gr)
        if np.linalg.norm(g_flat) > 1e-12 * (1.0 + np.linalg.norm(gr)):
            p, unbounded = -Z @ g_flat, True
        else:
            keep = ~flat
            p = -Z @ (evecs[:, keep] @ ((evecs[:, keep].T @ gr) / evals[keep]))
    if nr:
        # cap multipliers on the free coordinates: G_R[:, free]' mu = -(H p + grad)[free]
        mu = np.linalg.lstsq(GR.T, -(H @ p + grad)[free], rcond=None)[0]
    else:
        mu = np.zeros(0)
    return p, mu, unbounded


def _feasible_corner(qp: InflowQP, lo: np.ndarray) -> bool:
    return bool(np.all(qp.G @ lo <= qp.h + 1e-9 * (1.0 + np.abs(qp.h))))


def _kkt_residual(qp: InflowQP, x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> float:
    """Max of stationarity, primal, dual and complementarity violations."""
    n = qp.n
    eye = np.eye(n)
    C = np.vstack([qp.G, eye, -eye])
    d = np.concatenate([qp.h, hi, -lo])
    grad = qp.H @ x + qp.g
    slack = d - C @ x
    act = np.flatnonzero(slack <= 1e-9 * (1.0 + np.abs(d)))
    if len(act):
        mu_act = np.linalg.lstsq(C[act].T, -grad, rcond=None)[0]
        # drop multipliers of the wrong sign one at a time (degenerate vertices)
        while len(act) and mu_act.min() < -1e-10:
            act = np.delete(act, int(np.argmin(mu_act)))
            mu_act = np.linalg.lstsq(C[act].T, -grad, rcond=None)[0] if len(act) else np.zeros(0)
        stat = grad + C[act].T @ mu_act
        comp = np.abs(mu_act * slack[act]).max(initial=0.0)
        dual = max(0.0, -mu_act.min(initial=0.0))
    else:
        stat, comp, dual = grad, 0.0, 0.0
    primal = max(0.0, -slack.min(initial=0.0))
    return float(max(np.abs(stat).max(initial=0.0), primal, comp, dual))


@dataclass
class IntegerSolution:
    u: np.ndarray
    objective: float
    nodes: int
    relaxations: int


def _child_start(qp: InflowQP, x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """A feasible point of the child box near the parent optimum."""
    y = np.clip(x, lo, hi)
    if qp.feasible(y):
        return y
    # lowering coordinates never breaks a cap (nonnegative rows)
    y = np.clip(np.floor(x), lo, hi)
    return y if qp.feasible(y) else lo.copy()


def _better(obj: float, u: np.ndarray, best_obj: float, best_u, tol: float) -> bool:
    if best_u is None:
        return True
    gap = tol * max(1.0, abs(best_obj))
    if obj < best_obj - gap:
        return True
    return abs(obj - best_obj) <= gap and tuple(u) < tuple(best_u)


def solve_integer_qp(qp: InflowQP, tie_tol: float = 1e-9, int_tol: float = 1e-7) -> IntegerSolution:
    """Global integer minimizer by best-first branch-and-bound.

    Branches on the most fractional coordinate (lowest index on ties); among
    plans whose objectives agree within ``tie_tol`` (relative) the
    lexicographically smallest is returned.

    Node bounds add a rounding term to the relaxed optimum: with ``H >= lam I``
    and ``x`` optimal over the node's convex feasible set, every feasible ``u``
    has ``f(u) >= f(x) + lam/2 |u - x|^2``, and for integer ``u`` the distance
    is at least the per-coordinate distance of ``x`` to the integers.
    """
    lo = np.ceil(qp.lo - int_tol)
    hi = np.floor(qp.hi + int_tol)
    if not _feasible_corner(qp, lo):
        raise InfeasibleError("inflow problem infeasible at zero inflow")

    lam = max(0.0, float(np.linalg.eigvalsh(qp.H)[0])) if qp.n else 0.0
    slack = 1e-9 * max(1.0, float(np.abs(qp.H).max(initial=0.0)))

    def bound(rel: Relaxation) -> float:
        frac = np.abs(rel.u - np.round(rel.u))
        return rel.objective + max(0.0, 0.5 * lam * float(frac @ frac) - slack)

    best_u, best_obj = None, np.inf
    nodes = relaxations = 0
    counter = 0
    root = solve_qp_relaxation(qp, lo, hi)
    relaxations += 1
    # flooring a feasible point keeps it feasible (G >= 0): a cheap incumbent
    for cand in (np.round(root.u), np.floor(root.u + int_tol)):
        cand = np.clip(cand, lo, hi)
        if qp.feasible(cand):
            obj = qp.objective(cand)
            if _better(obj, cand, best_obj, best_u, tie_tol):
                best_u, best_obj = cand, obj
    limit = lambda: best_obj + tie_tol * max(1.0, abs(best_obj))  # noqa: E731
    # entries: (bound, tiebreak, lo, hi, relaxed point or None, working set, parent point)
    # children are queued with the parent's bound and relaxed only when popped
    heap = [(bound(root), counter, lo, hi, root.u, root.working, None)]
    while heap:
        lb, _, nlo, nhi, x, work, parent = heapq.heappop(heap)
        if best_u is not None and lb > limit():
            continue
        if x is None:
            rel = solve_qp_relaxation(qp, nlo, nhi, start=_child_start(qp, parent, nlo, nhi), working=work, kkt=False)
            relaxations += 1
            cand = np.clip(np.floor(rel.u + int_tol), nlo, nhi)
            if qp.feasible(cand):
                obj = qp.objective(cand)
                if _better(obj, cand, best_obj, best_u, tie_tol):
                    best_u, best_obj = cand, obj
            lb_child = bound(rel)
            if best_u is None or lb_child <= limit():
                counter += 1
                heapq.heappush(heap, (lb_child, counter, nlo, nhi, rel.u, rel.working, None))
            continue
        nodes += 1
        frac = np.abs(x - np.round(x))
        if frac.max() <= int_tol:
            cand = np.round(x)
            if not qp.feasible(cand):
                cand = np.floor(x + int_tol)
            obj = qp.objective(cand)
            if _better(obj, cand, best_obj, best_u, tie_tol):
                best_u, best_obj = cand, obj
            # no point of the node beats cand, but ties that are lexicographically
            # smaller may exist: they lie below cand in the first coordinate
            # where the node still has room, or agree with it there
            below = np.flatnonzero(nlo < cand)
            if len(below):
                i = int(below[0])
                for child in ("below", "equal"):
                    clo, chi = nlo.copy(), nhi.copy()
                    if child == "below":
                        chi[i] = cand[i] - 1
                    else:
                        clo[i] = chi[i] = cand[i]
                    counter += 1
                    if _feasible_corner(qp, clo):
                        heapq.heappush(heap, (lb, counter, clo, chi, None, work, x))
            continue
        i = int(np.argmax(frac))
        v = x[i]
        for child in ("down", "up"):
            clo, chi = nlo.copy(), nhi.copy()
            if child == "down":
                chi[i] = np.floor(v)
            else:
                clo[i] = np.ceil(v)
            if clo[i] > chi[i] or not _feasible_corner(qp, clo):
                continue
            counter += 1
            heapq.heappush(heap, (lb, counter, clo, chi, None, work, x))
    return IntegerSolution(best_u.astype(np.int64), best_obj, nodes, relaxations)
