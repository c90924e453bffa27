"""Stochastic data model, observations and problem instances.

All containers are immutable after construction: numpy arrays are copied and
flagged read-only so instances can be shared across worker threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from .errors import ConfigError
from .streams import StreamKey, as_key

MAXIMIZE = "maximize"
MINIMIZE = "minimize"


def _frozen(values, dtype=float, ndim=1, name="array") -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    if arr.ndim != ndim:
        raise ConfigError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if dtype is float and not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True, eq=False)
class DataSpec:
    """Ground-truth means ``mu``, precisions ``nu`` and optional covariates.

    ``nu`` is the inverse variance of a prediction ``z_j``.
    """

    mu: np.ndarray
    nu: np.ndarray
    covariates: np.ndarray | None = None

    def __post_init__(self):
        mu = _frozen(self.mu, name="mu")
        nu = _frozen(self.nu, name="nu")
        if mu.size < 1:
            raise ConfigError("mu must have at least one entry")
        if nu.shape != mu.shape:
            raise ConfigError(f"nu has length {nu.size}, expected {mu.size}")
        if np.any(nu <= 0):
            raise ConfigError("precisions nu must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "nu", nu)
        if self.covariates is not None:
            w = _frozen(self.covariates, ndim=2, name="covariates")
            if w.shape[0] != mu.size:
                raise ConfigError(f"covariates have {w.shape[0]} rows, expected {mu.size}")
            object.__setattr__(self, "covariates", w)

    @property
    def n(self) -> int:
        return self.mu.size

    def with_nu(self, nu) -> DataSpec:
        return DataSpec(self.mu, nu, self.covariates)


@dataclass(frozen=True, eq=False)
class Observation:
    """Realized predictions ``z`` with the precision they carry.

    When ``raw_samples`` (S x n) are present, ``z`` is their column mean.
    """

    z: np.ndarray
    effective_nu: np.ndarray
    raw_samples: np.ndarray | None = None

    def __post_init__(self):
        z = _frozen(self.z, name="z")
        nu = _frozen(self.effective_nu, name="effective_nu")
        if nu.shape != z.shape:
            raise ConfigError("effective_nu must match z in length")
        if np.any(nu <= 0):
            raise ConfigError("effective precisions must be strictly positive")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "effective_nu", nu)
        if self.raw_samples is not None:
            y = _frozen(self.raw_samples, ndim=2, name="raw_samples")
            if y.shape[1] != z.size:
                raise ConfigError("raw_samples must have one column per coordinate")
            if not np.allclose(y.mean(axis=0), z, rtol=0.0, atol=1e-12):
                raise ConfigError("z must equal the column means of raw_samples")
            object.__setattr__(self, "raw_samples", y)

    @property
    def n(self) -> int:
        return self.z.size

    @property
    def s_samples(self) -> int | None:
        return None if self.raw_samples is None else self.raw_samples.shape[0]


def generate_observation(
    spec: DataSpec, s_samples: int | None = None, seed: int | StreamKey | np.random.Generator = 0
) -> Observation:
    """Draw predictions ``z_j ~ N(mu_j, 1/nu_j)``, independent across ``j``.

    With ``s_samples`` the draw is made as S raw samples per coordinate with
    variance ``S/nu_j`` each, so that their mean again has precision ``nu_j``.
    """
    if s_samples is not None and int(s_samples) < 1:
        raise ConfigError(f"s_samples must be a positive integer, got {s_samples}")
    rng = seed if isinstance(seed, np.random.Generator) else as_key(seed).generator()
    sd = 1.0 / np.sqrt(spec.nu)
    if s_samples is None:
        z = spec.mu + sd * rng.standard_normal(spec.n)
        return Observation(z, spec.nu)
    s = int(s_samples)
    y = spec.mu + np.sqrt(s) * sd * rng.standard_normal((s, spec.n))
    return Observation(y.mean(axis=0), spec.nu, y)


def compute_snr(spec: DataSpec) -> float:
    """Signal-to-noise ratio ``Var(mu_pi) / Var(Z_pi)`` for a uniform index pi."""
    if spec.n < 2:
        raise ConfigError("the signal-to-noise ratio needs at least two coordinates")
    signal = np.mean((spec.mu - spec.mu.mean()) ** 2)
    noise = np.mean(1.0 / spec.nu)
    return float(signal / noise)


# ---------------------------------------------------------------------------
# perturbations


@dataclass(frozen=True)
class PerturbationSpec:
    """Step size ``h``, finite-difference order and Monte Carlo draw count."""

    h: float
    order: int = 2
    draws: int = 256

    def __post_init__(self):
        if not 0.0 < self.h < 1.0:
            raise ConfigError(f"step size h must lie in (0, 1), got {self.h}")
        if self.order not in (1, 2):
            raise ConfigError(f"finite-difference order must be 1 or 2, got {self.order}")
        if int(self.draws) < 1:
            raise ConfigError("draws must be a positive integer")

    def sigma(self, nu) -> np.ndarray:
        """Standard deviation of the step-h perturbation, per coordinate."""
        nu = np.asarray(nu, dtype=float)
        if np.any(nu <= 0):
            raise ConfigError("precisions must be strictly positive")
        h = self.h
        return np.sqrt(h * h + 2.0 * h / np.sqrt(nu))

    def sigma_double(self, nu) -> np.ndarray:
        """Standard deviation of the step-2h perturbation used at order 2."""
        nu = np.asarray(nu, dtype=float)
        if np.any(nu <= 0):
            raise ConfigError("precisions must be strictly positive")
        h = self.h
        return np.sqrt(4.0 * h * h + 4.0 * h / np.sqrt(nu))


def default_h(n: int, rule: str = "n^-1/6") -> float:
    """Step size from a named rule of the problem dimension."""
    exponents = {"n^-1/6": 1 / 6, "n^-1/3": 1 / 3, "n^-1/4": 1 / 4}
    if rule not in exponents:
        raise ConfigError(f"unknown h rule {rule!r}; expected one of {sorted(exponents)}")
    return float(n) ** -exponents[rule]


# ---------------------------------------------------------------------------
# problem instances


def _check_sense(sense: str) -> None:
    if sense not in (MAXIMIZE, MINIMIZE):
        raise ConfigError(f"sense must be {MAXIMIZE!r} or {MINIMIZE!r}, got {sense!r}")


class _Instance:
    sense: str

    @property
    def orientation(self) -> float:
        """+1 for maximization, -1 for minimization (costs are negated internally)."""
        return 1.0 if self.sense == MAXIMIZE else -1.0


@dataclass(frozen=True, eq=False)
class Selection(_Instance):
    """``max / min r.x`` over ``x in {0,1}^n``."""

    n: int
    sense: str = MAXIMIZE

    def __post_init__(self):
        _check_sense(self.sense)
        if int(self.n) < 1:
            raise ConfigError("n must be positive")

    variant = "Selection"


@dataclass(frozen=True, eq=False)
class CoupledLP(_Instance):
    """LP over ``[0,1]^n`` with ``m`` coupling rows ``(1/n) sum_j A_j x_j <= b``.

    ``A`` is stored as an ``m x n`` matrix (column ``j`` is ``A_j``).
    """

    A: np.ndarray
    b: np.ndarray
    sense: str = MAXIMIZE

    variant = "CoupledLP"

    def __post_init__(self):
        _check_sense(self.sense)
        a = _frozen(np.atleast_2d(np.asarray(self.A, dtype=float)), ndim=2, name="A")
        b = _frozen(np.atleast_1d(np.asarray(self.b, dtype=float)), name="b")
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise ConfigError("A must have at least one row and one column")
        if b.size != a.shape[0]:
            raise ConfigError(f"b has {b.size} entries, expected m = {a.shape[0]}")
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "b", b)
        self._check_feasible()

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def _check_feasible(self) -> None:
        low = np.minimum(self.A, 0.0).sum(axis=1) / self.n
        if np.any(low > self.b + 1e-12):
            raise ConfigError("coupling constraints are infeasible over [0,1]^n")
        if self.m == 1:
            return
        # per-row slack is necessary but not sufficient once rows interact
        res = optimize.linprog(
            np.zeros(self.n), A_ub=self.A / self.n, b_ub=self.b, bounds=(0.0, 1.0), method="highs"
        )
        if res.status != 0:
            raise ConfigError("coupling constraints are infeasible over [0,1]^n")


@dataclass(frozen=True, eq=False)
class WeaklyCoupledVars(_Instance):
    """Problem that decouples into blocks once binding variables are fixed.

    ``binding_index`` is the coordinate set S_0 and ``binding`` lists the
    allowed binding decisions (0/1 rows over S_0; S_0 may be empty, in which
    case rows are told apart by position only). Block ``k`` has coordinates
    ``blocks[k]``, a pool of candidate points ``pools[k]`` (rows in [0,1]) and
    a mask ``allowed[k]`` of shape ``(len(binding), len(pools[k]))`` saying
    which candidates are feasible under each binding decision. Candidate order
    in the pool is the tie-breaking order.
    """

    n: int
    binding_index: np.ndarray
    binding: np.ndarray
    blocks: tuple
    pools: tuple
    allowed: tuple
    sense: str = MAXIMIZE
    labels: tuple | None = field(default=None)

    variant = "WeaklyCoupledVars"

    def __post_init__(self):
        _check_sense(self.sense)
        n = int(self.n)
        s0 = _frozen(np.asarray(self.binding_index, dtype=np.int64).reshape(-1), dtype=np.int64, name="binding_index")
        x0 = np.asarray(self.binding, dtype=float)
        if x0.ndim == 1:
            x0 = x0.reshape(-1, s0.size)
        x0 = _frozen(x0, ndim=2, name="binding")
        if x0.shape[0] < 1:
            raise ConfigError("at least one binding decision is required")
        if x0.shape[1] != s0.size:
            raise ConfigError("binding rows must have one entry per binding coordinate")
        if not np.all((x0 == 0) | (x0 == 1)):
            raise ConfigError("binding decisions must be 0/1 vectors")
        blocks = tuple(_frozen(np.asarray(b, dtype=np.int64).reshape(-1), dtype=np.int64, name="block") for b in self.blocks)
        if not (len(blocks) == len(self.pools) == len(self.allowed)):
            raise ConfigError("blocks, pools and allowed must have equal length")
        seen = np.concatenate([s0, *blocks]) if blocks else s0
        if seen.size != n or not np.array_equal(np.sort(seen), np.arange(n)):
            raise ConfigError("binding_index and blocks must partition range(n)")
        pools, masks = [], []
        for k, (idx, pool, mask) in enumerate(zip(blocks, self.pools, self.allowed)):
            pool = _frozen(np.asarray(pool, dtype=float).reshape(-1, idx.size), ndim=2, name=f"pools[{k}]")
            if np.any(pool < 0) or np.any(pool > 1):
                raise ConfigError(f"candidates of block {k} must lie in [0,1]")
            mask = np.array(mask, dtype=bool).reshape(x0.shape[0], pool.shape[0])
            if not np.all(mask.any(axis=1)):
                raise ConfigError(f"block {k} has an empty candidate list for some binding decision")
            mask.setflags(write=False)
            pools.append(pool)
            masks.append(mask)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "binding_index", s0)
        object.__setattr__(self, "binding", x0)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "pools", tuple(pools))
        object.__setattr__(self, "allowed", tuple(masks))

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @classmethod
    def from_candidate_lists(
        cls,
        n: int,
        binding_index: Sequence[int],
        binding: Sequence[Sequence[int]],
        blocks: Sequence[Sequence[int]],
        candidates: Sequence[Sequence[Sequence[Sequence[float]]]],
        sense: str = MAXIMIZE,
    ) -> WeaklyCoupledVars:
        """Build from explicit lists ``candidates[k][i]`` for binding decision ``i``.

        The pool of block ``k`` is the union of its lists in first-seen order;
        within a list, earlier entries win ties.
        """
        pools, masks = [], []
        for k, per_binding in enumerate(candidates):
            if len(per_binding) != len(binding):
                raise ConfigError(f"block {k} needs one candidate list per binding decision")
            pool: list[tuple] = []
            for lst in per_binding:
                for c in lst:
                    c = tuple(float(v) for v in c)
                    if c not in pool:
                        pool.append(c)
            mask = np.zeros((len(binding), len(pool)), dtype=bool)
            for i, lst in enumerate(per_binding):
                order = [pool.index(tuple(float(v) for v in c)) for c in lst]
                if order != sorted(order):
                    raise ConfigError(
                        f"block {k}: candidate lists must respect a common order for consistent tie-breaking"
                    )
                mask[i, order] = True
            pools.append(np.array(pool, dtype=float).reshape(len(pool), len(blocks[k])))
            masks.append(mask)
        return cls(n, np.asarray(binding_index, dtype=np.int64), np.asarray(binding, dtype=float).reshape(len(binding), len(binding_index)),
                   tuple(blocks), tuple(pools), tuple(masks), sense)


ProblemInstance = Selection | CoupledLP | WeaklyCoupledVars
