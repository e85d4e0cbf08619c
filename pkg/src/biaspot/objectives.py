"""Convex training objectives in coefficient space and their gradients.

Gradients are returned in the functional convention: for coefficient j the
returned value is m times the ordinary partial derivative, i.e. the L2(rho_0)
gradient.  A plain descent step is therefore ``a - eta * g``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateWeightsWarning, InvalidArgumentError
from .measures import (
    Grid, GridDensity, SampleSet, design_matrix, gibbs_on_grid, potential_on_grid,
)
from .model import FeatureSet, Potential


@dataclass(frozen=True, eq=False)
class Target:
    """What the model is trained against: a grid density or a sample set."""

    density: GridDensity | None = None
    samples: SampleSet | None = None
    reference: Potential | None = None

    def __post_init__(self):
        if (self.density is None) == (self.samples is None):
            raise InvalidArgumentError("a target is either a density or a sample set")

    @classmethod
    def population(cls, density: GridDensity, reference: Potential | None = None) -> "Target":
        return cls(density=density, reference=reference)

    @classmethod
    def empirical(cls, samples: SampleSet, reference: Potential | None = None) -> "Target":
        if samples.n == 0:
            raise InvalidArgumentError("empty sample set")
        return cls(samples=samples, reference=reference)

    @property
    def kind(self) -> str:
        return "population" if self.density is not None else "empirical"

    @property
    def d(self) -> int:
        return self.density.grid.d if self.density is not None else self.samples.d

    def check(self, features: FeatureSet, grid: Grid) -> None:
        if features.d != grid.d or self.d != grid.d:
            raise InvalidArgumentError(
                f"dimension mismatch: features d={features.d}, grid d={grid.d}, target d={self.d}")
        if self.density is not None and self.density.grid.n_cells != grid.n_cells:
            raise InvalidArgumentError("target density lives on a different grid")

    def support(self, features: FeatureSet, cache: bool = True):
        """Feature matrix on the target's support and the matching probability weights.

        Pass ``cache=False`` for throwaway feature sets so they do not evict
        long-lived design matrices.
        """
        if self.density is not None:
            grid = self.density.grid
            phi = design_matrix(features, grid) if cache else features.transform(grid.nodes)
            return phi, self.density.mass
        return features.transform(self.samples.points), np.full(self.samples.n, 1.0 / self.samples.n)

    def feature_means(self, features: FeatureSet, cache: bool = True) -> np.ndarray:
        """E_target[sigma(w_j . x~)] for every feature."""
        phi, weights = self.support(features, cache)
        return phi.T @ weights


def population_target(pot: Potential, grid: Grid) -> Target:
    from .measures import density_from_potential
    return Target.population(density_from_potential(pot, grid), reference=pot)


def loss_backward(pot: Potential, target: Target, grid: Grid) -> float:
    """L-(V) = E_target[V] + log E_P[e^{-V}]."""
    target.check(pot.features, grid)
    s = target.feature_means(pot.features)
    _, _, log_z = gibbs_on_grid(potential_on_grid(pot, grid))
    return float(s @ pot.coeffs / pot.m + log_z)


def grad_backward(pot: Potential, target: Target, grid: Grid) -> np.ndarray:
    """g_j = E_target[sigma_j] - E_Q[sigma_j] with Q the model density on the grid."""
    target.check(pot.features, grid)
    phi = design_matrix(pot.features, grid)
    q, _, _ = gibbs_on_grid(phi @ pot.coeffs / pot.m)
    return target.feature_means(pot.features) - phi.T @ q


def _biased_weights(values: np.ndarray, weights: np.ndarray):
    """Self-normalized e^V reweighting of the target, and log E_target[e^V]."""
    with np.errstate(divide="ignore"):
        log_w = values + np.log(weights)
    lse = logsumexp(log_w)
    return np.exp(log_w - lse), float(lse)


def loss_forward(pot: Potential, target: Target, grid: Grid) -> float:
    """L+(V) = -E_P[V] + log E_target[e^V]."""
    target.check(pot.features, grid)
    phi_t, w_t = target.support(pot.features)
    _, log_mean = _biased_weights(phi_t @ pot.coeffs / pot.m, w_t)
    return float(-potential_on_grid(pot, grid).mean() + log_mean)


def grad_forward(pot: Potential, target: Target, grid: Grid) -> np.ndarray:
    """g_j = E_{P*}[sigma_j] - E_P[sigma_j] with P* the e^V-reweighted target.

    Emits DegenerateWeightsWarning when the reweighted sample has an effective
    size below 2.
    """
    target.check(pot.features, grid)
    phi_t, w_t = target.support(pot.features)
    biased, _ = _biased_weights(phi_t @ pot.coeffs / pot.m, w_t)
    if target.kind == "empirical":
        ess = 1.0 / np.sum(biased ** 2)
        if ess < 2.0:
            warnings.warn(f"effective sample size {ess:.3g} after e^V reweighting",
                          DegenerateWeightsWarning, stacklevel=2)
    return phi_t.T @ biased - design_matrix(pot.features, grid).mean(axis=0)


class BackwardProblem:
    """Precomputed pieces of L- for repeated evaluation along a trajectory."""

    def __init__(self, features: FeatureSet, target: Target, grid: Grid):
        target.check(features, grid)
        self.m = features.m
        self.phi = design_matrix(features, grid)
        self.target_means = target.feature_means(features)

    def state(self, a: np.ndarray):
        """(loss, grad, mass, log_mass) at coefficients ``a``."""
        mass, log_mass, log_z = gibbs_on_grid(self.phi @ a / self.m)
        loss = float(self.target_means @ a / self.m + log_z)
        return loss, self.target_means - self.phi.T @ mass, mass, log_mass


class ForwardProblem:
    """Same as BackwardProblem for L+."""

    def __init__(self, features: FeatureSet, target: Target, grid: Grid):
        target.check(features, grid)
        self.m = features.m
        self.phi = design_matrix(features, grid)
        self.base_means = self.phi.mean(axis=0)
        self.phi_t, self.w_t = target.support(features)

    def state(self, a: np.ndarray):
        values = self.phi @ a / self.m
        biased, log_mean = _biased_weights(self.phi_t @ a / self.m, self.w_t)
        loss = float(-values.mean() + log_mean)
        mass, log_mass, _ = gibbs_on_grid(values)
        return loss, self.phi_t.T @ biased - self.base_means, mass, log_mass


def make_problem(objective: str, features: FeatureSet, target: Target, grid: Grid):
    if objective == "backward":
        return BackwardProblem(features, target, grid)
    if objective == "forward":
        return ForwardProblem(features, target, grid)
    raise InvalidArgumentError(f"unknown objective {objective!r}")
