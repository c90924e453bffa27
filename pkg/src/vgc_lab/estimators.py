"""Estimators of out-of-sample performance ``mu . x(z)``.

Values are reported in the user's orientation. The correction ``D`` is
orientation-invariant: for a maximization problem it is positive in
expectation (in-sample values are optimistic), for a minimization problem
it is negative. Estimators receive ``z``, precisions and covariates only;
the true means are never passed in except to ``oracle``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError
from .model import Observation, PerturbationSpec, Selection
from .policies import AffinePolicyClass
from .solvers import coordinate_paths, objective_values, solve, supports_paths
from .streams import as_key

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

MC1, MC2, CLOSED_FORM = "mc1", "mc2", "closed_form"


def _pdf(x):
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(x))


@dataclass(frozen=True, eq=False)
class VgcResult:
    components: np.ndarray
    method: str
    order: int
    h: float
    mc_std_err: np.ndarray | None = None

    @property
    def total(self) -> float:
        return float(self.components.sum())

    @property
    def total_std_err(self) -> float | None:
        if self.mc_std_err is None:
            return None
        return float(np.sqrt(np.sum(self.mc_std_err**2)))


@dataclass(frozen=True, eq=False)
class EstimatorReport:
    """All estimates for one (policy, observation) pair."""

    policy: str
    h: float
    in_sample: float
    oracle: float | None = None
    debiased: dict = field(default_factory=dict)
    corrections: dict = field(default_factory=dict)
    cv: dict = field(default_factory=dict)
    cv_oracle: dict = field(default_factory=dict)
    stein: float | None = None


# ---------------------------------------------------------------------------
# plain estimates


def _x(solution_or_x) -> np.ndarray:
    return np.asarray(getattr(solution_or_x, "x", solution_or_x), dtype=float)


def in_sample(x, z) -> float:
    """In-sample performance ``z . x``."""
    return float(np.asarray(z, dtype=float) @ _x(x))


def oracle(x, mu) -> float:
    """True performance ``mu . x``; only meaningful when ``mu`` is known."""
    return float(np.asarray(mu, dtype=float) @ _x(x))


def _precisions(obs: Observation, nu) -> np.ndarray:
    if nu is None:
        return obs.effective_nu
    nu = np.asarray(nu, dtype=float)
    if nu.shape != obs.z.shape:
        raise ConfigError(f"precision vector has shape {nu.shape}, expected {obs.z.shape}")
    if np.any(~np.isfinite(nu)) or np.any(nu <= 0):
        raise ConfigError("precisions must be finite and strictly positive")
    return nu


def _setup(instance, policy: AffinePolicyClass, obs: Observation, covariates, nu):
    if obs.n != instance.n:
        raise ConfigError(f"observation has {obs.n} coordinates, instance has {instance.n}")
    nu = _precisions(obs, nu)
    a, b = policy.coefficients(nu, covariates)
    return nu, a, a * obs.z + b


# ---------------------------------------------------------------------------
# variance gradient correction


def vgc_mc(
    instance,
    policy: AffinePolicyClass,
    obs: Observation,
    pert: PerturbationSpec,
    seed=0,
    covariates=None,
    nu=None,
) -> VgcResult:
    """Randomized finite-difference correction averaged over ``pert.draws`` draws.

    Coordinate ``j`` draws from its own substream ``seed/j``, so components do
    not depend on evaluation order. At order 2 the two step sizes share the
    same standard normal draws.
    """
    nu, a, r = _setup(instance, policy, obs, covariates, nu)
    key = as_key(seed)
    h, draws = pert.h, int(pert.draws)
    sig, sig2 = pert.sigma(nu), pert.sigma_double(nu)
    comps = np.zeros(instance.n)
    errs = np.zeros(instance.n)
    v0 = objective_values(instance, r)[0]
    o = instance.orientation
    base = np.broadcast_to(r, (draws, instance.n))
    for j in np.flatnonzero(a != 0):
        zeta = key.child(int(j)).generator().standard_normal(draws)
        R = base.copy()
        R[:, j] = r[j] + a[j] * sig[j] * zeta
        diff = objective_values(instance, R) - v0
        if pert.order == 1:
            samples = diff / (h * np.sqrt(nu[j]) * o * a[j])
        else:
            R[:, j] = r[j] + a[j] * sig2[j] * zeta
            diff2 = objective_values(instance, R) - v0
            samples = (4.0 * diff - diff2) / (2.0 * h * np.sqrt(nu[j]) * o * a[j])
        comps[j] = samples.mean()
        errs[j] = samples.std(ddof=1) / np.sqrt(draws) if draws > 1 else np.inf
    return VgcResult(comps, MC1 if pert.order == 1 else MC2, pert.order, h, errs)


def gaussian_path_increments(paths, sigma) -> np.ndarray:
    """``E[V(z + d e_j) - V(z)]`` for ``d ~ N(0, sigma_k^2)``, one per path.

    On an interval ``(lo, hi)`` where ``V = alpha + beta t`` the contribution
    is ``(alpha - V(0)) P(lo < d < hi) + beta E[d; lo < d < hi]``, with
    ``E[d; lo < d < hi] = sigma (phi(lo/sigma) - phi(hi/sigma))``.
    """
    paths = list(paths)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (len(paths),))
    if not paths:
        return np.zeros(0)
    sizes = np.array([p.n_intervals for p in paths])
    owner = np.repeat(np.arange(len(paths)), sizes)
    lo = np.concatenate([np.concatenate(([-np.inf], p.breakpoints)) for p in paths])
    hi = np.concatenate([np.concatenate((p.breakpoints, [np.inf])) for p in paths])
    alpha = np.concatenate([p.intercepts - p.value(0.0) for p in paths])
    beta = np.concatenate([p.slopes for p in paths])
    s = sigma[owner]
    u, v = lo / s, hi / s
    # upper-tail differences through the survival function to avoid 1 - 1
    mass = np.where(u > 0, ndtr(-u) - ndtr(-v), ndtr(v) - ndtr(u))
    moment = s * (_pdf(u) - _pdf(v))
    return np.bincount(owner, weights=alpha * mass + beta * moment, minlength=len(paths))


def vgc_closed_form(
    instance,
    policy: AffinePolicyClass,
    obs: Observation,
    pert: PerturbationSpec,
    covariates=None,
    nu=None,
) -> VgcResult:
    """Exact conditional expectation of the randomized finite difference."""
    nu, a, r = _setup(instance, policy, obs, covariates, nu)
    h = pert.h
    active = np.flatnonzero(a != 0)
    comps = np.zeros(instance.n)
    if active.size:
        paths = list(coordinate_paths(instance, r, a, active))
        slope = np.array([p.a for p in paths])
        scale = h * np.sqrt(nu[active]) * slope
        inc = gaussian_path_increments(paths, pert.sigma(nu)[active])
        if pert.order == 1:
            comps[active] = inc / scale
        else:
            inc2 = gaussian_path_increments(paths, pert.sigma_double(nu)[active])
            comps[active] = (4.0 * inc - inc2) / (2.0 * scale)
    return VgcResult(comps, CLOSED_FORM, pert.order, h)


def vgc_estimated_precision(
    instance,
    policy: AffinePolicyClass,
    obs: Observation,
    pert: PerturbationSpec,
    nu_hat,
    seed=0,
    covariates=None,
    method: str = CLOSED_FORM,
) -> VgcResult:
    """Correction with estimated precisions ``nu_hat`` used throughout."""
    if method == CLOSED_FORM:
        return vgc_closed_form(instance, policy, obs, pert, covariates, nu=nu_hat)
    if method in (MC1, MC2):
        return vgc_mc(instance, policy, obs, pert, seed, covariates, nu=nu_hat)
    raise ConfigError(f"unknown correction method {method!r}")


def vgc_fully_randomized(
    instance,
    policy: AffinePolicyClass,
    obs: Observation,
    pert: PerturbationSpec,
    seed=0,
    covariates=None,
    nu=None,
) -> VgcResult:
    """Monte Carlo average of the fully randomized first-order correction.

    Each draw uses ``delta_j x_j(z + U delta_j e_j) / (h sqrt(nu_j))`` with
    ``U`` uniform on [0, 1]; its conditional mean equals the first-order
    correction by the fundamental theorem of calculus along the path.
    """
    nu, a, r = _setup(instance, policy, obs, covariates, nu)
    key = as_key(seed)
    h, draws = pert.h, int(pert.draws)
    sig = pert.sigma(nu)
    comps = np.zeros(instance.n)
    errs = np.zeros(instance.n)
    active = np.flatnonzero(a != 0)
    paths = dict(zip(active, coordinate_paths(instance, r, a, active))) if supports_paths(instance) else None
    for j in active:
        rng = key.child(int(j)).generator()
        delta = sig[j] * rng.standard_normal(draws)
        u = rng.random(draws)
        if paths is not None:
            xj = paths[j].x_at(u * delta)
        else:
            xj = np.empty(draws)
            for i in range(draws):
                rr = r.copy()
                rr[j] += a[j] * u[i] * delta[i]
                xj[i] = solve(instance, rr).x[j]
        samples = delta * xj / (h * np.sqrt(nu[j]))
        comps[j] = samples.mean()
        errs[j] = samples.std(ddof=1) / np.sqrt(draws) if draws > 1 else np.inf
    return VgcResult(comps, "randomized", 1, h, errs)


def vgc_bound(nu_min: float, h: float) -> float:
    """Bound on each first-order component: ``sqrt(3) nu_min^(-3/4) h^(-1/2)``."""
    return float(np.sqrt(3.0) * nu_min**-0.75 / np.sqrt(h))


# ---------------------------------------------------------------------------
# baselines


def cv_folds(
    instance,
    policy: AffinePolicyClass,
    obs: Observation,
    folds: int,
    covariates=None,
):
    """Per-fold ``(weight, x, held-out mean)`` with sample ``i`` in fold ``i mod K``."""
    y = obs.raw_samples
    if y is None:
        raise ConfigError("cross-validation needs raw samples")
    s = y.shape[0]
    k = int(folds)
    if k < 2:
        raise ConfigError(f"cross-validation needs at least 2 folds, got {folds}")
    if k > s:
        raise ConfigError(f"{k} folds exceed the {s} available samples")
    assign = np.arange(s) % k
    out = []
    for f in range(k):
        test = assign == f
        n_test = int(test.sum())
        nu_train = obs.effective_nu * (s - n_test) / s
        r = policy.coefficients(nu_train, covariates)
        x = solve(instance, r[0] * y[~test].mean(axis=0) + r[1]).x
        out.append((n_test / s, x, y[test].mean(axis=0)))
    return out


def cross_validation(
    instance,
    policy: AffinePolicyClass,
    obs: Observation,
    folds: int,
    covariates=None,
) -> float:
    """K-fold estimate; folds are weighted by size so K = S is leave-one-out."""
    return float(sum(w * (test @ x) for w, x, test in cv_folds(instance, policy, obs, folds, covariates)))


def stein_correction(
    instance,
    policy: AffinePolicyClass,
    obs: Observation,
    h: float,
    covariates=None,
    nu=None,
) -> float:
    """Central-difference optimism ``sum_j (x_j(z+h e_j) - x_j(z-h e_j)) / (2 h nu_j)``."""
    if not h > 0:
        raise ConfigError(f"Stein step h must be positive, got {h}")
    nu, a, r = _setup(instance, policy, obs, covariates, nu)
    total = 0.0
    for j in np.flatnonzero(a != 0):
        up, down = r.copy(), r.copy()
        up[j] += a[j] * h
        down[j] -= a[j] * h
        total += (solve(instance, up).x[j] - solve(instance, down).x[j]) / (2.0 * h * nu[j])
    return float(total)


def stein_baseline(instance, policy, obs, h, covariates=None, nu=None) -> float:
    """In-sample value minus the central-difference optimism."""
    _, _, r = _setup(instance, policy, obs, covariates, nu)
    x = solve(instance, r).x
    return in_sample(x, obs.z) - stein_correction(instance, policy, obs, h, covariates, nu)


# ---------------------------------------------------------------------------
# combined report

VGC_ESTIMATORS = {
    "vgc_cf1": (CLOSED_FORM, 1),
    "vgc_cf2": (CLOSED_FORM, 2),
    "vgc_mc1": (MC1, 1),
    "vgc_mc2": (MC2, 2),
}
ESTIMATORS = ("in_sample", "oracle", *VGC_ESTIMATORS, "cv", "cv_oracle", "stein")


def correction(instance, policy, obs, h, name, draws=256, seed=0, covariates=None, nu=None) -> VgcResult:
    """Correction for a named variant such as ``vgc_cf2``."""
    if name not in VGC_ESTIMATORS:
        raise ConfigError(f"unknown correction {name!r}; expected one of {sorted(VGC_ESTIMATORS)}")
    method, order = VGC_ESTIMATORS[name]
    pert = PerturbationSpec(h, order, draws)
    if method == CLOSED_FORM:
        return vgc_closed_form(instance, policy, obs, pert, covariates, nu)
    return vgc_mc(instance, policy, obs, pert, seed, covariates, nu)


def evaluate(
    instance,
    policy: AffinePolicyClass,
    obs: Observation,
    h: float,
    estimators=ESTIMATORS,
    *,
    folds=(),
    draws: int = 256,
    seed=0,
    covariates=None,
    mu=None,
    stein_h: float | None = None,
) -> EstimatorReport:
    """Evaluate every requested estimator on one observation.

    ``mu`` is used for the oracle columns only. MC corrections draw from
    ``seed``; ``stein_h`` defaults to ``h``.
    """
    unknown = [e for e in estimators if e not in ESTIMATORS]
    if unknown:
        raise ConfigError(f"unknown estimator(s) {unknown}; expected names from {list(ESTIMATORS)}")
    if ("oracle" in estimators or "cv_oracle" in estimators) and mu is None:
        raise ConfigError("oracle estimates need the true means")
    _, _, r = _setup(instance, policy, obs, covariates, None)
    x = solve(instance, r).x
    ins = in_sample(x, obs.z)
    debiased, corrections = {}, {}
    for name in estimators:
        if name in VGC_ESTIMATORS:
            d = correction(instance, policy, obs, h, name, draws, seed, covariates)
            corrections[name] = d
            debiased[name] = ins - d.total
    cv, cv_or = {}, {}
    if "cv" in estimators or "cv_oracle" in estimators:
        for k in np.atleast_1d(folds):
            parts = cv_folds(instance, policy, obs, int(k), covariates)
            cv[int(k)] = float(sum(w * (t @ xf) for w, xf, t in parts))
            if mu is not None:
                cv_or[int(k)] = float(sum(w * (np.asarray(mu) @ xf) for w, xf, _ in parts))
    stein = None
    if "stein" in estimators:
        stein = ins - stein_correction(instance, policy, obs, h if stein_h is None else stein_h, covariates)
    return EstimatorReport(
        policy=policy.label,
        h=h,
        in_sample=ins,
        oracle=oracle(x, mu) if mu is not None else None,
        debiased=debiased,
        corrections=corrections,
        cv=cv,
        cv_oracle=cv_or,
        stein=stein,
    )


def select_policy(instance, policies, obs, h, name="vgc_cf2", covariates=None, **kw):
    """Grid member maximizing (or, for minimization, minimizing) the debiased estimate."""
    best, best_val = None, None
    for policy in policies:
        rep = evaluate(instance, policy, obs, h, ("in_sample", name), covariates=covariates, **kw)
        val = instance.orientation * rep.debiased[name]
        if best_val is None or val > best_val:
            best, best_val = policy, val
    return best, instance.orientation * best_val


# ---------------------------------------------------------------------------
# batched kernels for selection problems


def selection_increment(rc, ac, sigma) -> np.ndarray:
    """``E[(rc + ac d)^+ - rc^+]`` for ``d ~ N(0, sigma^2)``, elementwise."""
    s = np.abs(ac) * sigma
    q = np.abs(rc)
    return s * _pdf(rc / s) - q * ndtr(-q / s)


def selection_batch(
    instance: Selection,
    policy: AffinePolicyClass,
    z,
    nu,
    h: float,
    estimators=ESTIMATORS,
    *,
    samples=None,
    folds=(),
    covariates=None,
    mu=None,
    stein_h: float | None = None,
) -> dict:
    """Estimates for a batch of observations of a selection problem.

    ``z`` is ``B x n`` and ``samples`` (for CV) is ``B x S x n``. Returns a
    dict of length-``B`` arrays keyed by estimator (``cv`` and ``cv_oracle``
    keyed as ``("cv", K)``). Monte Carlo corrections are not batched.
    """
    if not isinstance(instance, Selection):
        raise ConfigError("batched kernels cover selection problems only")
    mc = [e for e in estimators if e in ("vgc_mc1", "vgc_mc2")]
    if mc:
        raise ConfigError(f"batched kernels do not cover {mc}")
    z = np.atleast_2d(np.asarray(z, dtype=float))
    nu = np.asarray(nu, dtype=float)
    o = instance.orientation
    a, b = policy.coefficients(nu, covariates)
    rc = o * (a * z + b)
    x = (rc > 0).astype(float)
    out = {}
    ins = (z * x).sum(axis=1)
    if "in_sample" in estimators:
        out["in_sample"] = ins
    if "oracle" in estimators:
        out["oracle"] = x @ np.asarray(mu, dtype=float)
    active = a != 0
    ac = np.where(active, o * a, 1.0)
    scale = h * np.sqrt(nu) * ac
    pert = PerturbationSpec(h)
    for name in ("vgc_cf1", "vgc_cf2"):
        if name not in estimators:
            continue
        inc = selection_increment(rc, ac, pert.sigma(nu))
        if name == "vgc_cf1":
            d = inc / scale
        else:
            d = (4.0 * inc - selection_increment(rc, ac, pert.sigma_double(nu))) / (2.0 * scale)
        out[name] = ins - np.where(active, d, 0.0).sum(axis=1)
    if "stein" in estimators:
        step = h if stein_h is None else stein_h
        up = (rc + ac * step > 0).astype(float)
        down = (rc - ac * step > 0).astype(float)
        opt = np.where(active, (up - down) / (2.0 * step * nu), 0.0).sum(axis=1)
        out["stein"] = ins - opt
    if "cv" in estimators or "cv_oracle" in estimators:
        y = np.asarray(samples, dtype=float)
        s = y.shape[1]
        for k in np.atleast_1d(folds):
            k = int(k)
            if k < 2 or k > s:
                raise ConfigError(f"invalid fold count {k} for {s} samples")
            assign = np.arange(s) % k
            cv = np.zeros(z.shape[0])
            cvo = np.zeros(z.shape[0])
            for f in range(k):
                test = assign == f
                w = test.sum() / s
                at, bt = policy.coefficients(nu * (s - test.sum()) / s, covariates)
                xf = (o * (at * y[:, ~test].mean(axis=1) + bt) > 0).astype(float)
                cv += w * (xf * y[:, test].mean(axis=1)).sum(axis=1)
                if mu is not None:
                    cvo += w * (xf @ np.asarray(mu, dtype=float))
            if "cv" in estimators:
                out[("cv", k)] = cv
            if "cv_oracle" in estimators:
                out[("cv_oracle", k)] = cvo
    return out
