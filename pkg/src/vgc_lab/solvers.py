"""Exact solvers and coordinate solution paths.

Internally every instance is maximized: costs of a minimization instance are
negated on entry (``orientation``), so ``Solution.value`` and path values are
in that canonical orientation.

Tie rules: a coordinate or candidate is activated only on strict
improvement, and among equal candidates the lowest index wins.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import ConfigError, SolverError, UnsupportedPathError
from .model import CoupledLP, Selection, WeaklyCoupledVars

FEAS_TOL = 1e-9
GAP_TOL = 1e-6
BREAK_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Solution:
    x: np.ndarray
    value: float
    dual: np.ndarray | None = None
    fractional_indices: tuple[int, ...] = ()


def _costs(instance, r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.shape != (instance.n,):
        raise ConfigError(f"cost vector has shape {r.shape}, expected ({instance.n},)")
    if not np.all(np.isfinite(r)):
        raise ConfigError("cost vector contains non-finite entries")
    return instance.orientation * r


def solve(instance, r) -> Solution:
    """Optimal plug-in decision for user-facing costs ``r``."""
    rc = _costs(instance, r)
    if isinstance(instance, Selection):
        x = (rc > 0).astype(float)
        return Solution(x, float(rc @ x))
    if isinstance(instance, WeaklyCoupledVars):
        return _solve_wcv(instance, rc)
    if isinstance(instance, CoupledLP):
        if instance.m == 1:
            return _solve_coupled_single(instance, rc)
        return _solve_coupled_multi(instance, rc)
    raise ConfigError(f"unsupported instance type {type(instance).__name__}")


# ---------------------------------------------------------------------------
# weakly coupled by variables


def _wcv_tables(inst: WeaklyCoupledVars, rc):
    """Per-binding totals, per-block best values and best candidate indices."""
    n0 = inst.binding.shape[0]
    fixed = inst.binding @ rc[inst.binding_index] if inst.binding_index.size else np.zeros(n0)
    best = np.empty((n0, inst.n_blocks))
    arg = np.empty((n0, inst.n_blocks), dtype=np.int64)
    rows = np.arange(n0)
    for k, (idx, pool, mask) in enumerate(zip(inst.blocks, inst.pools, inst.allowed)):
        vals = pool @ rc[idx]
        masked = np.where(mask, vals[None, :], -np.inf)
        arg[:, k] = masked.argmax(axis=1)
        best[:, k] = masked[rows, arg[:, k]]
    total = fixed + best.sum(axis=1)
    return total, best, arg


def _solve_wcv(inst: WeaklyCoupledVars, rc) -> Solution:
    total, _, arg = _wcv_tables(inst, rc)
    i = int(np.argmax(total))
    x = np.zeros(inst.n)
    x[inst.binding_index] = inst.binding[i]
    for k, (idx, pool) in enumerate(zip(inst.blocks, inst.pools)):
        x[idx] = pool[arg[i, k]]
    return Solution(x, float(rc @ x))


# ---------------------------------------------------------------------------
# weakly coupled by constraints


def dual_objective(instance: CoupledLP, r, lam) -> float:
    """``L(lam) = b.lam + (1/n) sum_j (r_j - A_j.lam)^+`` for user-facing ``r``."""
    rc = _costs(instance, r)
    return _dual_value(instance, rc, np.asarray(lam, dtype=float))


def _dual_value(inst: CoupledLP, rc, lam) -> float:
    reduced = rc - lam @ inst.A
    return float(inst.b @ lam + np.maximum(reduced, 0.0).sum() / inst.n)


def _dual_single_batch(R, a, b):
    """Smallest minimizer of the 1-D dual for each row of ``R`` and its value.

    ``L`` is convex piecewise linear in ``lam`` with kinks at ``r_j / a_j``;
    its right derivative starts at ``g0`` and increases by ``|a_j|/n`` at every
    positive kink, so the minimizer is the first point where it turns
    nonnegative.
    """
    T, n = R.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        kinks = np.where(a != 0, R / np.where(a != 0, a, 1.0), np.inf)
    kinks = np.where(kinks > 0, kinks, np.inf)
    active0 = (R > 0) | ((R == 0) & (a < 0))
    g0 = b - np.where(active0, a, 0.0).sum(axis=1) / n
    order = np.argsort(kinks, axis=1, kind="stable")
    ks = np.take_along_axis(kinks, order, axis=1)
    steps = np.take_along_axis(np.broadcast_to(np.abs(a) / n, (T, n)), order, axis=1)
    g = g0[:, None] + np.cumsum(steps, axis=1)
    tol = 1e-12 * (abs(b) + np.abs(a).sum() / n + 1.0)
    reach = g >= -tol
    idx = reach.argmax(axis=1)
    at_zero = g0 >= -tol
    lam = np.where(at_zero, 0.0, ks[np.arange(T), idx])
    bad = ~at_zero & (~reach.any(axis=1) | ~np.isfinite(lam))
    if np.any(bad):
        raise SolverError("dual is unbounded below: the coupling constraint is infeasible")
    values = b * lam + np.maximum(R - a * lam[:, None], 0.0).sum(axis=1) / n
    return lam, values


def _solve_coupled_single(inst: CoupledLP, rc) -> Solution:
    a, b, n = inst.A[0], float(inst.b[0]), inst.n
    lam_arr, dual_arr = _dual_single_batch(rc[None, :], a, b)
    lam, dual = float(lam_arr[0]), float(dual_arr[0])
    reduced = rc - a * lam
    tied_tol = FEAS_TOL * (1.0 + np.abs(rc))
    x = (reduced > tied_tol).astype(float)
    tied = np.flatnonzero(np.abs(reduced) <= tied_tol)
    need = n * b - a @ x
    if (need > 0 and lam > 0) or need < 0:
        # fill tied coordinates in index order toward the binding row
        for j in tied:
            if need == 0:
                break
            if a[j] != 0 and np.sign(a[j]) == np.sign(need):
                x[j] = min(1.0, need / a[j])
                need -= a[j] * x[j]
    frac = tuple(int(j) for j in np.flatnonzero((x > 0) & (x < 1)))
    return _certify(inst, rc, x, np.array([lam]), frac, n * dual)


def _solve_coupled_multi(inst: CoupledLP, rc) -> Solution:
    n = inst.n
    res = optimize.linprog(-rc, A_ub=inst.A / n, b_ub=inst.b, bounds=(0.0, 1.0), method="highs-ds")
    if res.status != 0:
        raise SolverError(f"LP solve failed: {res.message}")
    x = np.clip(res.x, 0.0, 1.0)
    x[np.abs(x) <= FEAS_TOL] = 0.0
    x[np.abs(x - 1.0) <= FEAS_TOL] = 1.0
    # rows were scaled by 1/n, so their multipliers are n * lam
    lam = np.maximum(-np.asarray(res.ineqlin.marginals, dtype=float), 0.0) / n
    frac = tuple(int(j) for j in np.flatnonzero((x > 0) & (x < 1)))
    return _certify(inst, rc, x, lam, frac, n * _dual_value(inst, rc, lam))


def _certify(inst, rc, x, lam, frac, dual_value) -> Solution:
    usage = inst.A @ x / inst.n
    if np.any(usage > inst.b + FEAS_TOL):
        raise SolverError(f"primal recovery violates the coupling rows by {np.max(usage - inst.b):.3g}")
    if len(frac) > inst.m:
        raise SolverError(f"{len(frac)} fractional components exceed m = {inst.m}")
    value = float(rc @ x)
    if abs(value - dual_value) > GAP_TOL * (1.0 + abs(value)):
        raise SolverError(f"duality gap {abs(value - dual_value):.3g} above tolerance")
    return Solution(x, value, lam, frac)


# ---------------------------------------------------------------------------
# batched optimal values


def objective_values(instance, R, chunk_elems: int = 4_000_000) -> np.ndarray:
    """Canonical optimal values for each row of user-facing cost matrix ``R``.

    Evaluated directly (no solution recovery); it serves as the sampling route
    for Monte Carlo estimates and as a cross-check of ``solve``.
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if R.shape[1] != instance.n:
        raise ConfigError(f"cost matrix has {R.shape[1]} columns, expected {instance.n}")
    R = instance.orientation * R
    if isinstance(instance, Selection):
        return np.maximum(R, 0.0).sum(axis=1)
    if isinstance(instance, CoupledLP):
        if instance.m == 1:
            out = np.empty(R.shape[0])
            step = max(1, chunk_elems // max(1, instance.n))
            for s in range(0, R.shape[0], step):
                _, vals = _dual_single_batch(R[s : s + step], instance.A[0], float(instance.b[0]))
                out[s : s + step] = instance.n * vals
            return out
        return np.array([solve(instance, instance.orientation * row).value for row in R])
    if isinstance(instance, WeaklyCoupledVars):
        width = instance.binding.shape[0] * max(p.shape[0] for p in instance.pools) if instance.pools else 1
        step = max(1, chunk_elems // max(1, width))
        out = np.empty(R.shape[0])
        for s in range(0, R.shape[0], step):
            out[s : s + step] = _wcv_values(instance, R[s : s + step])
        return out
    raise ConfigError(f"unsupported instance type {type(instance).__name__}")


def _wcv_values(inst: WeaklyCoupledVars, R) -> np.ndarray:
    tot = R[:, inst.binding_index] @ inst.binding.T if inst.binding_index.size else np.zeros((R.shape[0], inst.binding.shape[0]))
    for idx, pool, mask in zip(inst.blocks, inst.pools, inst.allowed):
        vals = R[:, idx] @ pool.T
        tot = tot + np.where(mask[None, :, :], vals[:, None, :], -np.inf).max(axis=2)
    return tot.max(axis=1)


# ---------------------------------------------------------------------------
# coordinate paths


@dataclass(frozen=True, eq=False)
class CoordinatePath:
    """``t -> V(z + t e_j)`` as a continuous piecewise-affine function.

    Interval ``i`` spans ``(edges[i], edges[i+1])``; on it the optimal
    ``x_j`` is ``x[i]`` and the canonical value is
    ``intercepts[i] + slopes[i] * t`` with ``slopes[i] = a * x[i]``.
    ``a`` is the canonical slope of ``r_j`` in ``z_j``.
    """

    j: int
    a: float
    breakpoints: np.ndarray
    intercepts: np.ndarray
    slopes: np.ndarray
    x: np.ndarray = field(repr=False)

    @property
    def edges(self) -> np.ndarray:
        return np.concatenate(([-np.inf], self.breakpoints, [np.inf]))

    @property
    def n_intervals(self) -> int:
        return self.slopes.size

    def interval(self, t):
        return np.searchsorted(self.breakpoints, t, side="right")

    def value(self, t):
        i = self.interval(t)
        return self.intercepts[i] + self.slopes[i] * np.asarray(t, dtype=float)

    def x_at(self, t):
        return self.x[self.interval(t)]


def upper_envelope(slopes, intercepts, tol: float = BREAK_TOL):
    """Upper envelope of lines ``c + s t``.

    Returns ``(breakpoints, slopes, intercepts)`` of the pieces in increasing
    ``t``. Among parallel lines the largest intercept is kept (lowest index
    on exact ties); breakpoints closer than ``tol`` are merged.
    """
    s = np.asarray(slopes, dtype=float)
    c = np.asarray(intercepts, dtype=float)
    order = np.lexsort((np.arange(s.size), -c, s))
    hull_s: list[float] = []
    hull_c: list[float] = []
    hull_t: list[float] = []  # hull_t[i] = where hull line i starts
    for i in order:
        si, ci = s[i], c[i]
        if hull_s and si == hull_s[-1]:
            continue  # parallel, lower or equal intercept
        while hull_s:
            t = (hull_c[-1] - ci) / (si - hull_s[-1])
            if len(hull_s) > 1 and t <= hull_t[-1] + tol * (1.0 + abs(t)):
                hull_s.pop(), hull_c.pop(), hull_t.pop()
                continue
            break
        hull_t.append((hull_c[-1] - ci) / (si - hull_s[-1]) if hull_s else -np.inf)
        hull_s.append(si)
        hull_c.append(ci)
    return np.array(hull_t[1:]), np.array(hull_s), np.array(hull_c)


def _path_from_lines(j, ac, slopes, intercepts) -> CoordinatePath:
    bps, sl, ic = upper_envelope(slopes, intercepts)
    return CoordinatePath(j, ac, bps, ic, sl, sl / ac)


def _path_from_steps(j, ac, breaks, xs, v0) -> CoordinatePath:
    """Path from ``x_j`` steps in ``t`` and the value at ``t = 0``."""
    breaks = np.asarray(breaks, dtype=float)
    xs = np.asarray(xs, dtype=float)
    slopes = ac * xs
    ic = np.empty_like(slopes)
    i0 = int(np.searchsorted(breaks, 0.0, side="right"))
    ic[i0] = v0
    for i in range(i0 + 1, slopes.size):
        ic[i] = ic[i - 1] + (slopes[i - 1] - slopes[i]) * breaks[i - 1]
    for i in range(i0 - 1, -1, -1):
        ic[i] = ic[i + 1] + (slopes[i + 1] - slopes[i]) * breaks[i]
    return CoordinatePath(j, ac, breaks, ic, slopes, xs)


class _PathBuilder:
    """Shared precomputation for all coordinate paths at one cost vector."""

    def __init__(self, instance, r):
        self.instance = instance
        self.rc = _costs(instance, r)
        inst = instance
        if isinstance(inst, Selection):
            self.v0 = float(np.maximum(self.rc, 0.0).sum())
        elif isinstance(inst, WeaklyCoupledVars):
            self.total, self.best, _ = _wcv_tables(inst, self.rc)
            self.v0 = float(self.total.max())
            self.where = {}
            for p, j in enumerate(inst.binding_index):
                self.where[int(j)] = (-1, p)
            for k, idx in enumerate(inst.blocks):
                for p, j in enumerate(idx):
                    self.where[int(j)] = (k, p)
        elif isinstance(inst, CoupledLP):
            if inst.m != 1 or np.any(inst.A[0] <= 0):
                raise UnsupportedPathError(
                    "coordinate paths for coupled LPs need m = 1 and strictly positive A"
                )
            self.v0 = solve(inst, inst.orientation * self.rc).value
            a = inst.A[0]
            self.cap = inst.n * float(inst.b[0])
            ratio = self.rc / a
            pos = np.flatnonzero(ratio > 0)
            order = pos[np.lexsort((pos, -ratio[pos]))]
            self.ratio_sorted = ratio[order]
            self.prefix = np.concatenate(([0.0], np.cumsum(a[order]))).tolist()
            self.position = np.full(inst.n, -1, dtype=np.int64)
            self.position[order] = np.arange(order.size)
        else:
            raise ConfigError(f"unsupported instance type {type(inst).__name__}")

    def path(self, j: int, a_j: float) -> CoordinatePath:
        if a_j == 0:
            raise ConfigError("coordinate paths need a nonzero slope a_j")
        inst = self.instance
        j = int(j)
        if not 0 <= j < inst.n:
            raise ConfigError(f"coordinate {j} out of range")
        ac = inst.orientation * float(a_j)
        if isinstance(inst, Selection):
            rest = self.v0 - max(self.rc[j], 0.0)
            return _path_from_lines(j, ac, [0.0, ac], [rest, rest + self.rc[j]])
        if isinstance(inst, WeaklyCoupledVars):
            return self._wcv_path(j, ac)
        return self._coupled_path(j, ac)

    def _wcv_path(self, j, ac) -> CoordinatePath:
        inst = self.instance
        k, p = self.where[j]
        if k < 0:
            return _path_from_lines(j, ac, ac * inst.binding[:, p], self.total)
        pool, mask = inst.pools[k], inst.allowed[k]
        base = self.total - self.best[:, k]
        vals = pool @ self.rc[inst.blocks[k]]
        icpt = np.where(mask, base[:, None] + vals[None, :], -np.inf)
        slope = np.broadcast_to(ac * pool[:, p], icpt.shape)
        keep = np.isfinite(icpt)
        return _path_from_lines(j, ac, slope[keep], icpt[keep])

    def _coupled_path(self, j, ac) -> CoordinatePath:
        inst = self.instance
        w = float(inst.A[0, j])
        cap = self.cap
        pre = self.prefix
        rs = self.ratio_sorted
        n_pos = rs.size
        p = int(self.position[j])
        n_oth = n_pos - 1 if p >= 0 else n_pos

        # prefix weights and ratios of the other coordinates, in ratio order
        def w_oth(i):
            return pre[i] if p < 0 or i <= p else pre[i + 1] - w

        def ratio_oth(i):
            return rs[i] if p < 0 or i < p else rs[i + 1]

        def count(thr, right):
            find = bisect.bisect_right if right else bisect.bisect_left
            if p < 0:
                return min(find(pre, thr), n_oth + 1)
            head = find(pre, thr, 0, p + 1)
            if head < p + 1:
                return head
            return p + 1 + find(pre, thr + w, p + 2, n_pos + 1) - (p + 2)

        def share(i):
            return min(1.0, max(0.0, (cap - w_oth(i)) / w))

        i_one = count(cap - w, right=True) - 1  # last state with x_j = 1
        i_zero = count(cap, right=False)  # first state with x_j = 0
        i_top = max(i_one, 0)
        i_bot = min(i_zero, n_oth)
        if i_zero > n_oth:
            xs, breaks = [0.0, share(n_oth)], [0.0]
        else:
            xs, breaks = [share(i_bot)], []
        for i in range(i_bot - 1, i_top - 1, -1):
            breaks.append(ratio_oth(i))
            xs.append(share(i))
        # merge zero-width states (tied ratios) and repeated shares
        mb, mx = [], [xs[0]]
        for bp, xv in zip(breaks, xs[1:]):
            if mb and bp <= mb[-1]:
                mx[-1] = xv
                continue
            if xv == mx[-1]:
                continue
            mb.append(bp)
            mx.append(xv)
        t = (np.asarray(mb) * w - self.rc[j]) / ac
        if ac < 0:
            t, mx = t[::-1], mx[::-1]
        return _path_from_steps(j, ac, t, mx, self.v0)


def coordinate_path(instance, r, j: int, a_j: float) -> CoordinatePath:
    """Exact path of ``t -> V(z + t e_j)`` where ``r_j`` moves by ``a_j t``."""
    return _PathBuilder(instance, r).path(j, a_j)


def coordinate_paths(instance, r, a, coords=None):
    """Yield paths for every coordinate in ``coords`` with ``a_j != 0``."""
    builder = _PathBuilder(instance, r)
    a = np.asarray(a, dtype=float)
    coords = range(instance.n) if coords is None else coords
    for j in coords:
        if a[j] != 0:
            yield builder.path(j, a[j])


def supports_paths(instance) -> bool:
    if isinstance(instance, CoupledLP):
        return instance.m == 1 and bool(np.all(instance.A[0] > 0))
    return isinstance(instance, (Selection, WeaklyCoupledVars))
