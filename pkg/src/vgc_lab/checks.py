"""Fast randomized invariant suite behind ``vgc-lab check``."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .estimators import gaussian_path_increments, vgc_bound, vgc_closed_form, vgc_mc
from .model import MAXIMIZE, MINIMIZE, CoupledLP, Observation, PerturbationSpec, Selection, WeaklyCoupledVars
from .policies import LINEAR_MODEL, AffinePolicyClass
from .solvers import Solution, coordinate_path, solve

TOL = 1e-9


@dataclass(frozen=True)
class CheckResult:
    name: str
    cases: int
    violations: int
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{self.name:<26}{self.cases:>6} cases {self.violations:>5} violations  {status}{extra}"


# ---------------------------------------------------------------------------
# random instances


def random_sense(rng) -> str:
    return MAXIMIZE if rng.random() < 0.5 else MINIMIZE


def random_selection(rng, n_max=8) -> Selection:
    return Selection(int(rng.integers(1, n_max + 1)), random_sense(rng))


def random_coupled(rng, n_max=8, m_max=2, positive=False) -> CoupledLP:
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    if positive:
        A = rng.uniform(0.2, 2.0, (m, n))
    else:
        A = rng.normal(size=(m, n))
    # keep x = 0 feasible and the rows somewhat tight
    b = rng.uniform(0.0, 0.6, m) * np.abs(A).sum(axis=1) / n
    return CoupledLP(A, b, random_sense(rng))


def random_wcv(rng, n_max=8) -> WeaklyCoupledVars:
    n = int(rng.integers(1, n_max + 1))
    perm = rng.permutation(n)
    n0 = int(rng.integers(0, min(2, n - 1) + 1)) if n > 1 else 0
    s0 = np.sort(perm[:n0])
    rest = perm[n0:]
    cuts = []
    if rest.size > 1:
        n_cuts = min(rest.size - 1, int(rng.integers(0, 3)))
        cuts = np.sort(rng.choice(np.arange(1, rest.size), size=n_cuts, replace=False))
    blocks = [np.sort(b) for b in np.split(rest, cuts) if b.size]
    rows = np.array(list(itertools.product((0.0, 1.0), repeat=n0))).reshape(2**n0, n0)
    keep = rng.random(rows.shape[0]) < 0.7
    keep[rng.integers(rows.shape[0])] = True
    rows = rows[keep]
    pools, masks = [], []
    for b in blocks:
        c = int(rng.integers(1, 5))
        pool = (rng.random((c, b.size)) < 0.5).astype(float)
        frac = rng.random((c, b.size)) < 0.2
        pool[frac] = rng.random(frac.sum())
        mask = rng.random((rows.shape[0], c)) < 0.6
        mask[np.arange(rows.shape[0]), rng.integers(c, size=rows.shape[0])] = True
        pools.append(pool)
        masks.append(mask)
    return WeaklyCoupledVars(n, s0, rows, tuple(blocks), tuple(pools), tuple(masks), random_sense(rng))


def random_path_instance(rng, n_max=8):
    """An instance for which exact coordinate paths exist."""
    kind = rng.integers(3)
    if kind == 0:
        return random_selection(rng, n_max)
    if kind == 1:
        return random_wcv(rng, n_max)
    return random_coupled(rng, n_max, m_max=1, positive=True)


def random_slope(rng) -> float:
    return float(rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 2.0))


# ---------------------------------------------------------------------------
# properties


def _tolerance_band_solve(instance, r) -> Solution:
    """Regressed selection rule that flips decisions within 0.05 of a tie."""
    if not isinstance(instance, Selection):
        return solve(instance, r)
    rc = instance.orientation * np.asarray(r, dtype=float)
    x = ((rc > 0) ^ (np.abs(rc) < 0.05)).astype(float)
    return Solution(x, float(rc @ x))


MUTATIONS = {"tiebreak": _tolerance_band_solve}


def check_monotonicity(rng, cases, solver=solve) -> CheckResult:
    """Optimal ``x_j`` along ``z + t e_j`` moves with ``sign(a_j)`` (max) or against it (min)."""
    bad = 0
    for _ in range(cases):
        inst = random_path_instance(rng)
        r = rng.normal(size=inst.n)
        j = int(rng.integers(inst.n))
        a = random_slope(rng)
        path = coordinate_path(inst, r, j, a)
        direction = np.sign(path.a)
        ok = np.all(np.diff(path.x) * direction >= -TOL)
        near = [path.breakpoints + d for d in (-0.03, -1e-3, 1e-3, 0.03)]
        ts = np.sort(np.concatenate([rng.normal(scale=3.0, size=12), *near]))
        xs = []
        for t in ts:
            rr = r.copy()
            rr[j] += a * t
            xs.append(solver(inst, rr).x[j])
        ok = ok and np.all(np.diff(xs) * direction >= -TOL)
        bad += not ok
    return CheckResult("path monotonicity", cases, bad)


def check_curvature(rng, cases) -> CheckResult:
    """Path slopes increase in the maximization orientation (value is convex)."""
    bad = 0
    for _ in range(cases):
        inst = random_path_instance(rng)
        r = rng.normal(size=inst.n)
        path = coordinate_path(inst, r, int(rng.integers(inst.n)), random_slope(rng))
        slopes_ok = np.all(np.diff(path.slopes) >= -TOL)
        bps = path.breakpoints
        left = path.intercepts[:-1] + path.slopes[:-1] * bps
        right = path.intercepts[1:] + path.slopes[1:] * bps
        cont = np.all(np.abs(left - right) <= TOL * (1 + np.abs(left)))
        danskin = np.allclose(path.slopes, path.a * path.x, rtol=0, atol=1e-12)
        bad += not (slopes_ok and cont and danskin)
    return CheckResult("value curvature", cases, bad)


def check_bracket(rng, cases) -> CheckResult:
    """``a x_j(z) t <= V(z + t e_j) - V(z) <= a x_j(z + t e_j) t`` (maximization orientation)."""
    bad = 0
    for _ in range(cases):
        kind = rng.integers(3)
        inst = random_selection(rng) if kind == 0 else random_wcv(rng) if kind == 1 else random_coupled(rng)
        r = rng.normal(size=inst.n)
        j = int(rng.integers(inst.n))
        a = random_slope(rng)
        t = float(rng.normal(scale=2.0))
        s0 = solve(inst, r)
        rr = r.copy()
        rr[j] += a * t
        s1 = solve(inst, rr)
        ac = inst.orientation * a
        dv = s1.value - s0.value
        tol = 1e-7 * (1 + abs(s0.value) + abs(s1.value))
        bad += not (ac * s0.x[j] * t - tol <= dv <= ac * s1.x[j] * t + tol)
    return CheckResult("subgradient bracket", cases, bad)


def check_duality(rng, cases) -> CheckResult:
    """Feasibility, fractional count and duality gap of coupled LP solves."""
    bad = 0
    for _ in range(cases):
        inst = random_coupled(rng)
        r = rng.normal(size=inst.n)
        sol = solve(inst, r)
        rc = inst.orientation * r
        lam = sol.dual
        dual = inst.b @ lam + np.maximum(rc - lam @ inst.A, 0.0).sum() / inst.n
        ok = (
            np.all(lam >= 0)
            and np.all(inst.A @ sol.x / inst.n <= inst.b + TOL)
            and np.all((sol.x >= 0) & (sol.x <= 1))
            and len(sol.fractional_indices) <= inst.m
            and abs(sol.value - inst.n * dual) <= 1e-6 * (1 + abs(sol.value))
            and abs(sol.value - rc @ sol.x) <= TOL
        )
        bad += not ok
    return CheckResult("strong duality", cases, bad)


def _random_nu(rng, n):
    nu = rng.uniform(0.1, 5.0, n)
    nu[rng.integers(n)] = rng.uniform(0.1, 0.99)
    return nu


def check_vgc_bound(rng, cases) -> CheckResult:
    """First-order components stay below ``sqrt(3) nu_min^(-3/4) h^(-1/2)``."""
    bad = 0
    for _ in range(cases):
        inst = random_path_instance(rng)
        nu = _random_nu(rng, inst.n)
        h = float(rng.uniform(0.01, 1 / np.e))
        obs = Observation(rng.normal(scale=2.0, size=inst.n), nu)
        d = vgc_closed_form(inst, AffinePolicyClass(), obs, PerturbationSpec(h, 1))
        bad += not np.all(np.abs(d.components) <= vgc_bound(nu.min(), h) * (1 + 1e-12))
    return CheckResult("first-order bound", cases, bad)


def check_zero_class(rng, cases) -> CheckResult:
    """Policies ignoring the data get a zero correction."""
    bad = 0
    for i in range(cases):
        inst = random_path_instance(rng)
        obs = Observation(rng.normal(size=inst.n), rng.uniform(0.2, 3.0, inst.n))
        w = rng.normal(size=(inst.n, 2))
        pol = AffinePolicyClass(LINEAR_MODEL, tuple(rng.normal(size=2)))
        pert = PerturbationSpec(float(rng.uniform(0.01, 0.9)), int(rng.integers(1, 3)), 4)
        d_cf = vgc_closed_form(inst, pol, obs, pert, covariates=w)
        d_mc = vgc_mc(inst, pol, obs, pert, seed=i, covariates=w)
        bad += not (np.all(d_cf.components == 0) and np.all(d_mc.components == 0))
    return CheckResult("zero correction class", cases, bad)


def check_sigma_identity(rng, cases) -> CheckResult:
    """Perturbation variance equals ``(1 + h sqrt(nu))^2 / nu - 1 / nu``."""
    bad = 0
    for _ in range(cases):
        nu = float(np.exp(rng.uniform(-5, 5)))
        h = float(rng.uniform(1e-4, 0.999))
        lhs = (1 + h * np.sqrt(nu)) ** 2 / nu
        rhs = 1 / nu + PerturbationSpec(h).sigma(nu) ** 2
        bad += not abs(lhs - rhs) <= 1e-12 * lhs
    return CheckResult("perturbation variance", cases, bad)


def quadrature_increment(path, sigma) -> float:
    """Adaptive quadrature of ``E[V(t) - V(0)]`` interval by interval."""
    v0 = float(path.value(0.0))
    edges = path.edges
    total = 0.0
    for i in range(path.n_intervals):
        lo, hi = edges[i], edges[i + 1]
        c, s = path.intercepts[i] - v0, path.slopes[i]

        def f(t, c=c, s=s):
            return (c + s * t) * np.exp(-0.5 * (t / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))

        val, _ = integrate.quad(f, lo, hi, epsabs=1e-12, epsrel=1e-12, limit=200)
        total += val
    return total


def check_quadrature(rng, cases) -> CheckResult:
    """Closed-form Gaussian increments match adaptive quadrature to 1e-6."""
    bad = 0
    worst = 0.0
    for _ in range(cases):
        inst = random_path_instance(rng)
        r = rng.normal(size=inst.n)
        path = coordinate_path(inst, r, int(rng.integers(inst.n)), random_slope(rng))
        sigma = float(rng.uniform(0.1, 2.0))
        exact = gaussian_path_increments([path], sigma)[0]
        err = abs(exact - quadrature_increment(path, sigma))
        worst = max(worst, err)
        bad += not err <= 1e-6
    return CheckResult("closed form vs quadrature", cases, bad, f"max error {worst:.1e}")


def run_checks(cases: int = 1000, seed: int = 0, mutation: str | None = None) -> list[CheckResult]:
    """Run every property; ``mutation`` swaps in a deliberately broken solver."""
    solver = solve if mutation is None else MUTATIONS[mutation]
    rng = np.random.default_rng(seed)
    return [
        check_monotonicity(rng, cases, solver),
        check_curvature(rng, cases),
        check_bracket(rng, cases),
        check_duality(rng, min(cases, 500)),
        check_vgc_bound(rng, cases),
        check_zero_class(rng, cases),
        check_sigma_identity(rng, cases),
        check_quadrature(rng, min(cases, 50)),
    ]

