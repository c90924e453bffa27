"""Synthetic scenarios and the seeded replication engine.

Replication ``r`` draws everything from substreams of ``(seed, r)``, and
replications are processed in fixed-size chunks whose statistics are merged
in chunk order. Results therefore do not depend on the worker count.
"""

from __future__ import annotations

import itertools
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, VgcLabError
from .estimators import ESTIMATORS, VGC_ESTIMATORS, evaluate, selection_batch
from .model import (
    MAXIMIZE,
    MINIMIZE,
    CoupledLP,
    DataSpec,
    Selection,
    WeaklyCoupledVars,
    compute_snr,
    default_h,
    generate_observation,
)
from .policies import SAA, AffinePolicyClass, PolicyGrid
from .streams import DATA, INSTANCE, VGC_MC, StreamKey

CHUNK = 512
ENUMERATION_CAP = 1_000_000


# ---------------------------------------------------------------------------
# streaming statistics


@dataclass
class Moments:
    """Count, mean and sum of squared deviations, mergeable in any grouping."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, values) -> Moments:
        v = np.asarray(values, dtype=float)
        if v.size == 0:
            return cls()
        mean = float(v.mean())
        return cls(v.size, mean, float(np.sum((v - mean) ** 2)))

    def merge(self, other: Moments) -> Moments:
        if other.count == 0:
            return Moments(self.count, self.mean, self.m2)
        if self.count == 0:
            return Moments(other.count, other.mean, other.m2)
        n = self.count + other.count
        d = other.mean - self.mean
        mean = self.mean + d * other.count / n
        m2 = self.m2 + other.m2 + d * d * self.count * other.count / n
        return Moments(n, mean, m2)

    @property
    def variance(self) -> float:
        """Population variance (ddof = 0)."""
        return self.m2 / self.count if self.count else math.nan

    @property
    def std_err(self) -> float:
        """Standard error of the mean, from the ddof = 1 sample deviation."""
        if self.count < 2:
            return math.nan
        return math.sqrt(self.m2 / (self.count - 1) / self.count)


@dataclass(frozen=True)
class EstimatorStats:
    mean: float
    bias: float
    variance: float
    rmse: float
    std_err: float
    bias_std_err: float
    oracle_mean: float
    replications: int


@dataclass
class AggregateStats:
    """Per ``(policy index, estimator)`` moments of estimates and their errors.

    The error of a replication is its estimate minus the oracle value of the
    same replication's policy; ``variance`` is the population variance of the
    error so that ``rmse**2 = bias**2 + variance``.
    """

    values: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)
    oracles: dict = field(default_factory=dict)

    def add(self, key, values, oracle) -> None:
        values = np.asarray(values, dtype=float)
        oracle = np.asarray(oracle, dtype=float)
        self._merge_into(key, Moments.of(values), Moments.of(values - oracle), Moments.of(oracle))

    def _merge_into(self, key, v, e, o) -> None:
        self.values[key] = self.values.get(key, Moments()).merge(v)
        self.errors[key] = self.errors.get(key, Moments()).merge(e)
        self.oracles[key] = self.oracles.get(key, Moments()).merge(o)

    def merge(self, other: AggregateStats) -> AggregateStats:
        out = AggregateStats(dict(self.values), dict(self.errors), dict(self.oracles))
        for key in other.values:
            out._merge_into(key, other.values[key], other.errors[key], other.oracles[key])
        return out

    def keys(self):
        return sorted(self.values)

    def stats(self, key) -> EstimatorStats:
        v, e, o = self.values[key], self.errors[key], self.oracles[key]
        return EstimatorStats(
            mean=v.mean,
            bias=e.mean,
            variance=e.variance,
            rmse=math.sqrt(e.mean**2 + e.variance),
            std_err=v.std_err,
            bias_std_err=e.std_err,
            oracle_mean=o.mean,
            replications=v.count,
        )

    def __getitem__(self, key) -> EstimatorStats:
        return self.stats(key)


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class Scenario:
    """Everything needed to reproduce a replication study.

    ``kind`` selects the instance generator (``toy``, ``coupled_lp`` or
    ``drone``) and ``params`` its keyword arguments. ``h`` overrides
    ``h_rule``; ``nu_scale`` multiplies every precision.
    """

    name: str
    kind: str = "toy"
    n: int = 100
    s_samples: int | None = 3
    params: dict = field(default_factory=dict)
    policy: PolicyGrid = field(default_factory=lambda: PolicyGrid(SAA))
    estimators: tuple = ("in_sample", "oracle", "vgc_cf2", "cv", "cv_oracle")
    h: float | None = None
    h_rule: str = "n^-1/6"
    draws: int = 256
    folds: int | None = None
    replications: int = 1000
    seed: int = 0
    nu_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in BUILDERS:
            raise ConfigError(f"unknown scenario kind {self.kind!r}; expected one of {sorted(BUILDERS)}")
        if int(self.replications) < 1:
            raise ConfigError("replications must be at least 1")
        if int(self.n) < 1:
            raise ConfigError("n must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not self.nu_scale > 0:
            raise ConfigError("nu_scale must be positive")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ConfigError(f"unknown estimator(s) {unknown}; expected names from {list(ESTIMATORS)}")
        if any(e in ("cv", "cv_oracle") for e in self.estimators):
            if self.s_samples is None:
                raise ConfigError("cross-validation needs s_samples")
            if not 2 <= self.cv_folds <= self.s_samples:
                raise ConfigError(f"folds must lie in [2, s_samples = {self.s_samples}]")
        self.step()

    @property
    def cv_folds(self) -> int:
        """Fold count; leave-one-out when unset."""
        if self.folds is not None:
            return int(self.folds)
        return int(self.s_samples or 0)

    def step(self) -> float:
        h = self.h if self.h is not None else default_h(self.n, self.h_rule)
        if not 0 < h < 1:
            raise ConfigError(f"step size h must lie in (0, 1), got {h}")
        return float(h)

    def build(self):
        """``(instance, DataSpec)``, deterministic given the scenario."""
        rng = StreamKey(int(self.seed), (2**64 - 1, INSTANCE)).generator()
        kw = dict(self.params)
        if self.kind == "toy":
            kw.setdefault("s_samples", self.s_samples or 3)
        instance, spec = BUILDERS[self.kind](self.n, rng, **kw)
        if self.nu_scale != 1.0:
            spec = spec.with_nu(spec.nu * self.nu_scale)
        return instance, spec


def build_toy(n: int, rng=None, positive_share: float = 0.14, sample_variance: float = 2.0, s_samples: int = 3):
    """Selection toy: the first ``round(0.14 n)`` means are +1, the rest -1.

    The precision of a mean of ``s_samples`` draws with per-draw variance
    ``sample_variance`` is ``s_samples / sample_variance``.
    """
    k = int(round(positive_share * n))
    mu = np.where(np.arange(n) < k, 1.0, -1.0)
    nu = np.full(n, s_samples / sample_variance)
    return Selection(n), DataSpec(mu, nu, np.ones((n, 1)))


def build_coupled_lp(
    n: int,
    rng,
    a_range=(0.5, 1.5),
    mu_mean: float = 0.5,
    mu_sd: float = 1.0,
    nu_range=(0.5, 2.0),
    active_share: float = 0.5,
):
    """Single-row knapsack LP with capacity set so that the best ``active_share``
    of coordinates by true ratio ``mu_j / A_j`` fills it."""
    a = rng.uniform(*a_range, size=n)
    mu = rng.normal(mu_mean, mu_sd, size=n)
    nu = rng.uniform(*nu_range, size=n)
    top = np.argsort(-mu / a, kind="stable")[: max(1, int(round(active_share * n)))]
    top = top[mu[top] > 0]
    b = a[top].sum() / n
    return CoupledLP(a[None, :], [b], MAXIMIZE), DataSpec(mu, nu, np.ones((n, 1)))


def build_drone_like_instance(
    n_depots: int,
    n_locations: int,
    budget: int,
    seed=0,
    nu_range=(0.5, 2.0),
    cap: int = ENUMERATION_CAP,
    ambulance_base: float = 0.6,
    drone_speed: float = 1.5,
    proxy_noise: float = 0.2,
):
    """Depot-opening problem with per-location response choices (minimize).

    Coordinates are grouped by location: ``(ambulance, depot 1..L)``. The
    binding decision is a set of at most ``budget`` open depots; a location may
    use the ambulance or a drone from any open depot. Response times come from
    random planar positions; covariates are ``[proxy, 1]`` where the proxy is
    a noisy version of the true time.
    """
    L, K, B = int(n_depots), int(n_locations), int(budget)
    if L < 1 or K < 1 or not 0 <= B <= L:
        raise ConfigError("need n_depots >= 1, n_locations >= 1 and 0 <= budget <= n_depots")
    count = sum(math.comb(L, i) for i in range(B + 1))
    if count > cap:
        raise ConfigError(f"{count} depot sets exceed the enumeration cap {cap}")
    rng = seed if isinstance(seed, np.random.Generator) else StreamKey(int(seed), (INSTANCE,)).generator()
    depots = rng.random((L, 2))
    sites = rng.random((K, 2))
    dist = np.linalg.norm(sites[:, None, :] - depots[None, :, :], axis=2)
    ambulance = ambulance_base + 0.4 * np.linalg.norm(sites - 0.5, axis=1) + 0.1 * rng.random(K)
    times = np.column_stack([ambulance, 0.1 + dist / drone_speed])
    mu = times.reshape(-1)
    n = mu.size
    nu = rng.uniform(*nu_range, size=n)
    proxy = mu * (1.0 + proxy_noise * rng.standard_normal(n))
    subsets = [s for i in range(B + 1) for s in itertools.combinations(range(L), i)]
    allowed = np.zeros((len(subsets), L + 1), dtype=bool)
    allowed[:, 0] = True
    for i, s in enumerate(subsets):
        allowed[i, [l + 1 for l in s]] = True
    blocks = tuple(np.arange(k * (L + 1), (k + 1) * (L + 1)) for k in range(K))
    eye = np.eye(L + 1)
    inst = WeaklyCoupledVars(
        n,
        np.zeros(0, dtype=np.int64),
        np.zeros((len(subsets), 0)),
        blocks,
        tuple(eye for _ in range(K)),
        tuple(allowed for _ in range(K)),
        MINIMIZE,
        labels=tuple(subsets),
    )
    return inst, DataSpec(mu, nu, np.column_stack([proxy, np.ones(n)]))


def _build_drone(n: int, rng, n_depots: int = 6, budget: int = 2, **kw):
    per = n_depots + 1
    if n % per:
        raise ConfigError(f"drone scenarios need n divisible by n_depots + 1 = {per}")
    return build_drone_like_instance(n_depots, n // per, budget, rng, **kw)


BUILDERS = {"toy": build_toy, "coupled_lp": build_coupled_lp, "drone": _build_drone}


# ---------------------------------------------------------------------------
# replication engine


@dataclass(frozen=True)
class _Context:
    scenario: Scenario
    instance: object
    spec: DataSpec
    policies: tuple
    h: float


def _context(scenario: Scenario) -> _Context:
    instance, spec = scenario.build()
    policies = tuple(scenario.policy.members())
    scenario.policy.validate(spec.nu, spec.covariates)
    return _Context(scenario, instance, spec, policies, scenario.step())


def _observations(ctx: _Context, reps):
    sc = ctx.scenario
    return [generate_observation(ctx.spec, sc.s_samples, StreamKey(sc.seed, (int(r), DATA))) for r in reps]


def _batched(ctx: _Context) -> bool:
    sc = ctx.scenario
    return isinstance(ctx.instance, Selection) and not any(e in ("vgc_mc1", "vgc_mc2") for e in sc.estimators)


def run_chunk(ctx: _Context, reps, batched: bool | None = None) -> AggregateStats:
    """Statistics of the replications ``reps``."""
    sc = ctx.scenario
    reps = list(reps)
    obs = _observations(ctx, reps)
    mu = ctx.spec.mu
    cov = ctx.spec.covariates
    batched = _batched(ctx) if batched is None else batched
    stats = AggregateStats()
    for p, policy in enumerate(ctx.policies):
        if batched:
            z = np.stack([o.z for o in obs])
            y = np.stack([o.raw_samples for o in obs]) if sc.s_samples is not None else None
            out = selection_batch(
                ctx.instance, policy, z, ctx.spec.nu, ctx.h, (*sc.estimators, "oracle"),
                samples=y, folds=(sc.cv_folds,) if y is not None else (), covariates=cov, mu=mu,
            )
            ref = out["oracle"]
            cols = {e: out[(e, sc.cv_folds)] if e in ("cv", "cv_oracle") else out[e] for e in sc.estimators}
        else:
            cols = {e: np.empty(len(reps)) for e in sc.estimators}
            ref = np.empty(len(reps))
            for i, (r, o) in enumerate(zip(reps, obs)):
                try:
                    rep = evaluate(
                        ctx.instance, policy, o, ctx.h, (*sc.estimators, "oracle"),
                        folds=(sc.cv_folds,) if sc.s_samples is not None else (),
                        draws=sc.draws, seed=StreamKey(sc.seed, (int(r), VGC_MC)),
                        covariates=cov, mu=mu,
                    )
                except VgcLabError as exc:
                    raise type(exc)(f"replication {r}, policy {policy.label}: {exc}") from exc
                ref[i] = rep.oracle
                for e in sc.estimators:
                    cols[e][i] = _pick(rep, e, sc.cv_folds)
        for e in sc.estimators:
            stats.add((p, e), cols[e], ref)
    return stats


def _pick(rep, name, folds):
    if name == "in_sample":
        return rep.in_sample
    if name == "oracle":
        return rep.oracle
    if name in VGC_ESTIMATORS:
        return rep.debiased[name]
    if name == "cv":
        return rep.cv[folds]
    if name == "cv_oracle":
        return rep.cv_oracle[folds]
    return rep.stein


def chunks(scenario: Scenario, size: int = CHUNK):
    """Replication index ranges in processing order."""
    R = int(scenario.replications)
    return [range(s, min(s + size, R)) for s in range(0, R, size)]


@dataclass(frozen=True)
class RunResult:
    scenario: Scenario
    stats: AggregateStats
    h: float
    policies: tuple
    runtime_ms: float


def run_replications(scenario: Scenario, workers: int = 1, chunk_size: int = CHUNK) -> RunResult:
    """Run all replications; identical output for any worker count."""
    if int(workers) < 1:
        raise ConfigError("workers must be at least 1")
    start = time.perf_counter()
    ctx = _context(scenario)
    parts = chunks(scenario, chunk_size)
    if workers == 1 or len(parts) == 1:
        results = [run_chunk(ctx, c) for c in parts]
    else:
        with ThreadPoolExecutor(max_workers=int(workers)) as pool:
            results = list(pool.map(lambda c: run_chunk(ctx, c), parts))
    stats = AggregateStats()
    for part in results:
        stats = stats.merge(part)
    elapsed = 1000.0 * (time.perf_counter() - start)
    return RunResult(scenario, stats, ctx.h, ctx.policies, elapsed)


SWEEP_AXES = ("h", "n", "folds", "snr")


def sweep_scenarios(scenario: Scenario, axis: str, grid) -> list:
    """One scenario per grid value; all share the master seed."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    grid = list(grid)
    if not grid:
        raise ConfigError("sweep grid is empty")
    out = []
    for v in grid:
        if axis == "h":
            out.append(replace(scenario, h=float(v)))
        elif axis == "n":
            if float(v) != int(v):
                raise ConfigError(f"n grid values must be integers, got {v}")
            out.append(replace(scenario, n=int(v)))
        elif axis == "folds":
            if float(v) != int(v):
                raise ConfigError(f"fold counts must be integers, got {v}")
            out.append(replace(scenario, folds=int(v)))
        else:
            # rescale precisions so the scenario reaches the requested SNR
            if not float(v) > 0:
                raise ConfigError(f"SNR values must be positive, got {v}")
            _, spec = replace(scenario, nu_scale=1.0).build()
            out.append(replace(scenario, nu_scale=float(v) / compute_snr(spec)))
    return out


def sweep(scenario: Scenario, axis: str, grid, workers: int = 1) -> list:
    """``[(grid value, RunResult), ...]`` over the grid."""
    grid = list(grid)
    return [(v, run_replications(s, workers)) for v, s in zip(grid, sweep_scenarios(scenario, axis, grid))]
