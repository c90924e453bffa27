"""Affine plug-in policy classes ``r_j(z, theta) = a_j(theta) z + b_j(theta)``."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

SAA = "SAA"
LINEAR_MODEL = "LinearModel"
MIXED_EFFECTS = "MixedEffects"
CLASS_IDS = (SAA, LINEAR_MODEL, MIXED_EFFECTS)


@dataclass(frozen=True)
class AffinePolicyClass:
    """One member ``theta`` of an affine plug-in family.

    * ``SAA``: theta is empty, ``r = z``.
    * ``LinearModel``: theta is the regression vector beta, ``r_j = W_j . beta``.
    * ``MixedEffects``: theta is ``(tau, beta...)`` and ``r_j`` shrinks ``z_j``
      toward ``W_j . beta`` with weight ``tau / (nu_j + tau)``.
    """

    class_id: str = SAA
    theta: tuple[float, ...] = ()

    def __post_init__(self):
        if self.class_id not in CLASS_IDS:
            raise ConfigError(f"unknown policy class {self.class_id!r}; expected one of {CLASS_IDS}")
        theta = tuple(float(t) for t in self.theta)
        if not all(np.isfinite(theta)):
            raise ConfigError("policy parameters must be finite")
        if self.class_id == SAA and theta:
            raise ConfigError("SAA takes no parameters")
        if self.class_id == LINEAR_MODEL and not theta:
            raise ConfigError("LinearModel needs a coefficient vector")
        if self.class_id == MIXED_EFFECTS:
            if len(theta) < 2:
                raise ConfigError("MixedEffects needs theta = (tau, beta_1, ..., beta_p)")
            if theta[0] < 0:
                raise ConfigError("MixedEffects shrinkage tau must be nonnegative")
        object.__setattr__(self, "theta", theta)

    @property
    def needs_covariates(self) -> bool:
        return self.class_id != SAA

    @property
    def label(self) -> str:
        if not self.theta:
            return self.class_id
        return f"{self.class_id}({', '.join(f'{t:g}' for t in self.theta)})"

    def coefficients(self, nu, covariates=None) -> tuple[np.ndarray, np.ndarray]:
        """Slopes ``a(theta)`` and offsets ``b(theta)`` for precisions ``nu``."""
        nu = np.asarray(nu, dtype=float)
        n = nu.size
        if self.class_id == SAA:
            return np.ones(n), np.zeros(n)
        if covariates is None:
            raise ConfigError(f"{self.class_id} policies need covariates")
        w = np.asarray(covariates, dtype=float)
        beta = np.asarray(self.theta if self.class_id == LINEAR_MODEL else self.theta[1:])
        if w.shape != (n, beta.size):
            raise ConfigError(f"covariates must have shape ({n}, {beta.size}), got {w.shape}")
        prior = w @ beta
        if self.class_id == LINEAR_MODEL:
            return np.zeros(n), prior
        tau = self.theta[0]
        weight = nu / (nu + tau)
        return weight, (1.0 - weight) * prior


def plugin_costs(policy: AffinePolicyClass, z, nu, covariates=None) -> np.ndarray:
    """Plug-in costs ``r_j = a_j z_j + b_j`` (coordinatewise in ``z``)."""
    z = np.asarray(z, dtype=float)
    a, b = policy.coefficients(nu, covariates)
    if a.shape[-1] != z.shape[-1]:
        raise ConfigError(f"z has {z.shape[-1]} coordinates, policy was built for {a.size}")
    return a * z + b


@dataclass(frozen=True)
class PolicyGrid:
    """A finite grid of members of one policy class.

    ``a_min`` is the smallest admissible nonzero ``|a_j|``; ``validate`` checks
    it over the whole grid for given precisions.
    """

    class_id: str
    thetas: tuple[tuple[float, ...], ...] = ((),)
    a_min: float = 1e-8

    def __post_init__(self):
        members = tuple(tuple(float(v) for v in t) for t in self.thetas)
        if not members:
            raise ConfigError("a policy grid needs at least one parameter vector")
        object.__setattr__(self, "thetas", members)
        for t in members:
            AffinePolicyClass(self.class_id, t)

    @classmethod
    def product(cls, class_id: str, tau=None, beta=None, a_min: float = 1e-8) -> PolicyGrid:
        """Cartesian grid over ``tau`` values and ``beta`` vectors."""
        if class_id == SAA:
            return cls(SAA, ((),), a_min)
        betas = [tuple(np.atleast_1d(b)) for b in (beta or [])]
        if not betas:
            raise ConfigError(f"{class_id} grid needs at least one beta vector")
        if class_id == LINEAR_MODEL:
            return cls(class_id, tuple(betas), a_min)
        taus = list(tau if tau is not None else [0.0])
        return cls(class_id, tuple((t, *b) for t, b in itertools.product(taus, betas)), a_min)

    def members(self) -> list[AffinePolicyClass]:
        return [AffinePolicyClass(self.class_id, t) for t in self.thetas]

    def validate(self, nu, covariates=None) -> None:
        for policy in self.members():
            a, b = policy.coefficients(nu, covariates)
            nz = a[a != 0]
            if nz.size and np.min(np.abs(nz)) < self.a_min:
                raise ConfigError(
                    f"{policy.label}: nonzero slope {np.min(np.abs(nz)):.3g} below a_min = {self.a_min:g}"
                )
            if not np.all(np.isfinite(b)):
                raise ConfigError(f"{policy.label}: non-finite offsets")
