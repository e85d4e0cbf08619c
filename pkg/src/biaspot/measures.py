"""Discrete probability measures on [-1, 1]^d.

Absolutely continuous measures live on a tensor grid of cell centers
(midpoint quadrature); empirical measures are plain point sets.  The base
distribution P is the uniform mass vector on the grid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidArgumentError, NumericError
from .model import FeatureSet, Potential

# points per axis used when the caller does not choose one
DEFAULT_POINTS_PER_DIM = {1: 1024, 2: 128, 3: 48, 4: 20, 5: 12}


def default_points_per_dim(d: int) -> int:
    try:
        return DEFAULT_POINTS_PER_DIM[d]
    except KeyError:
        raise InvalidArgumentError(f"no default grid resolution for d={d}") from None


@dataclass(frozen=True, eq=False)
class Grid:
    d: int
    p: int

    def __post_init__(self):
        if self.d < 1 or self.p < 1:
            raise InvalidArgumentError(f"grid needs d >= 1 and p >= 1, got d={self.d}, p={self.p}")

    @classmethod
    def default(cls, d: int) -> "Grid":
        return cls(d, default_points_per_dim(d))

    @property
    def axis(self) -> np.ndarray:
        return -1.0 + (2.0 * np.arange(self.p) + 1.0) / self.p

    @property
    def n_cells(self) -> int:
        return self.p ** self.d

    @property
    def cell_width(self) -> float:
        return 2.0 / self.p

    @property
    def cell_volume(self) -> float:
        return self.cell_width ** self.d

    @property
    def nodes(self) -> np.ndarray:
        return _grid_nodes(self)

    def cell_index(self, x) -> np.ndarray:
        """Flat index of the cell containing each point (row-major, last axis fastest)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ij = np.clip(np.floor((x + 1.0) / self.cell_width).astype(int), 0, self.p - 1)
        return np.ravel_multi_index(tuple(ij.T), (self.p,) * self.d)


@lru_cache(maxsize=16)
def _grid_nodes(grid: Grid) -> np.ndarray:
    mesh = np.meshgrid(*([grid.axis] * grid.d), indexing="ij")
    nodes = np.stack(mesh, axis=-1).reshape(-1, grid.d)
    nodes.setflags(write=False)
    return nodes


@lru_cache(maxsize=8)
def design_matrix(features: FeatureSet, grid: Grid) -> np.ndarray:
    """sigma(w_j . x~_i) on every grid node, shape (n_cells, m).  Cached per (features, grid)."""
    if features.d != grid.d:
        raise InvalidArgumentError(f"features have d={features.d}, grid has d={grid.d}")
    phi = features.transform(grid.nodes)
    phi.setflags(write=False)
    return phi


def _as_mass(mass, n: int, name: str) -> np.ndarray:
    mass = np.array(mass, dtype=float).reshape(-1)
    if mass.shape[0] != n:
        raise InvalidArgumentError(f"{name} has {mass.shape[0]} entries for {n} cells")
    mass.setflags(write=False)
    return mass


@dataclass(frozen=True, eq=False)
class GridDensity:
    grid: Grid
    mass: np.ndarray

    def __post_init__(self):
        mass = _as_mass(self.mass, self.grid.n_cells, "mass")
        if not np.all(np.isfinite(mass)) or mass.min() < 0:
            raise InvalidArgumentError("density mass must be finite and nonnegative")
        if abs(mass.sum() - 1.0) > 1e-10:
            raise InvalidArgumentError(f"density mass sums to {mass.sum():.15g}, not 1")
        object.__setattr__(self, "mass", mass)

    @classmethod
    def uniform(cls, grid: Grid) -> "GridDensity":
        return cls(grid, np.full(grid.n_cells, 1.0 / grid.n_cells))

    @classmethod
    def from_log_weights(cls, grid: Grid, log_w) -> "GridDensity":
        return cls(grid, _softmax(np.asarray(log_w, dtype=float))[0])

    def __sub__(self, other):
        return signed_difference(self, other)


@dataclass(frozen=True, eq=False)
class SampleSet:
    points: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2:
            raise InvalidArgumentError(f"sample points must be (n, d), got {pts.shape}")
        if pts.size and (np.abs(pts).max() > 1.0 or not np.all(np.isfinite(pts))):
            raise InvalidArgumentError("sample coordinates must lie in [-1, 1]")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __sub__(self, other):
        return signed_difference(self, other)


@dataclass(frozen=True, eq=False)
class SignedGridMeasure:
    """A finite signed measure: grid masses plus optional weighted atoms."""

    grid: Grid
    mass: np.ndarray
    atoms: np.ndarray | None = None
    atom_weights: np.ndarray | None = None

    def __post_init__(self):
        mass = _as_mass(self.mass, self.grid.n_cells, "mass")
        if not np.all(np.isfinite(mass)):
            raise InvalidArgumentError("signed measure must be finite")
        object.__setattr__(self, "mass", mass)
        if self.atoms is not None:
            atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
            weights = np.asarray(self.atom_weights, dtype=float).reshape(-1)
            if atoms.shape[0] != weights.shape[0]:
                raise InvalidArgumentError("atoms and atom_weights disagree in length")
            object.__setattr__(self, "atoms", atoms)
            object.__setattr__(self, "atom_weights", weights)


def signed_difference(mu, nu) -> SignedGridMeasure:
    """mu - nu for any pair of GridDensity / SampleSet / SignedGridMeasure."""
    grid = next((g.grid for g in (mu, nu) if hasattr(g, "grid")), None)
    if grid is None:
        raise InvalidArgumentError("at least one operand must live on a grid")
    mass = np.zeros(grid.n_cells)
    atoms, weights = [], []
    for measure, sign in ((mu, 1.0), (nu, -1.0)):
        if isinstance(measure, SampleSet):
            atoms.append(measure.points)
            weights.append(np.full(measure.n, sign / measure.n))
            continue
        if measure.grid is not grid and (measure.grid.d, measure.grid.p) != (grid.d, grid.p):
            raise InvalidArgumentError("grid measures live on different grids")
        mass = mass + sign * measure.mass
        if isinstance(measure, SignedGridMeasure) and measure.atoms is not None:
            atoms.append(measure.atoms)
            weights.append(sign * measure.atom_weights)
    if atoms:
        return SignedGridMeasure(grid, mass, np.vstack(atoms), np.concatenate(weights))
    return SignedGridMeasure(grid, mass)


def _softmax(log_w: np.ndarray):
    """Normalized weights, their logs, and logsumexp of the input."""
    lse = logsumexp(log_w)
    log_q = log_w - lse
    return np.exp(log_q), log_q, lse


def gibbs_on_grid(values: np.ndarray):
    """Density e^{-V}/Z from node values of V.

    Returns ``(mass, log_mass, log_z)`` with log_z = log((1/N) sum_i e^{-V_i}).
    """
    if not np.all(np.isfinite(values)):
        raise NumericError("potential is not finite on the grid")
    mass, log_mass, lse = _softmax(-values)
    log_z = lse - np.log(values.shape[0])
    if not np.isfinite(log_z):
        raise NumericError("partition function overflowed")
    return mass, log_mass, log_z


def potential_on_grid(pot: Potential, grid: Grid) -> np.ndarray:
    return design_matrix(pot.features, grid) @ pot.coeffs / pot.m


def density_from_potential(pot: Potential, grid: Grid) -> GridDensity:
    mass, _, _ = gibbs_on_grid(potential_on_grid(pot, grid))
    return GridDensity(grid, mass)


def log_partition(pot: Potential, grid: Grid) -> float:
    """log E_P[e^{-V}] by midpoint quadrature, P uniform on the box."""
    return float(gibbs_on_grid(potential_on_grid(pot, grid))[2])


def kl_divergence(p: GridDensity, q: GridDensity) -> float:
    """sum_i p_i log(p_i / q_i); +inf when p charges a cell where q has no mass."""
    if p.grid.n_cells != q.grid.n_cells:
        raise InvalidArgumentError("densities live on different grids")
    return kl_from_log(p.mass, np.log(p.mass, where=p.mass > 0, out=np.zeros_like(p.mass)),
                       q.mass, None)


def kl_from_log(p_mass: np.ndarray, p_log: np.ndarray, q_mass, q_log) -> float:
    """KL with precomputed logs; ``q_log`` may be None to take logs of ``q_mass``."""
    support = p_mass > 0
    if q_log is None:
        if np.any(q_mass[support] <= 0):
            return float("inf")
        q_log = np.zeros_like(q_mass)
        np.log(q_mass, where=support, out=q_log)
    return float(np.sum(p_mass[support] * (p_log[support] - q_log[support])))


def _node_values(f, grid: Grid) -> np.ndarray:
    if callable(f):
        return np.asarray(f(grid.nodes), dtype=float).reshape(-1)
    return np.asarray(f, dtype=float).reshape(-1)


def expectation_on_grid(f, q: GridDensity) -> float:
    """sum_i q_i f(x_i); ``f`` is a vectorized callable on (N, d) arrays or node values."""
    return float(q.mass @ _node_values(f, q.grid))


def expectation_on_samples(f, s: SampleSet) -> float:
    if s.n == 0:
        raise InvalidArgumentError("empty sample set")
    return float(np.mean(np.asarray(f(s.points), dtype=float).reshape(-1)))


def mean_embedding(measure, features: FeatureSet) -> np.ndarray:
    """(E_mu[sigma(w_j . x~)])_j for a grid density, sample set or signed measure."""
    if isinstance(measure, SampleSet):
        return features.transform(measure.points).mean(axis=0)
    emb = design_matrix(features, measure.grid).T @ measure.mass
    if isinstance(measure, SignedGridMeasure) and measure.atoms is not None:
        emb = emb + features.transform(measure.atoms).T @ measure.atom_weights
    return emb


def mmd_sq(mu, features: FeatureSet, nu=None) -> float:
    """||mu - nu||_k^2 under the empirical feature kernel, via mean embeddings.

    ``mu`` alone may be a SignedGridMeasure; otherwise any two of GridDensity
    and SampleSet are compared, with atoms used exactly.
    """
    if nu is None:
        diff = mean_embedding(mu, features)
    else:
        diff = mean_embedding(mu, features) - mean_embedding(nu, features)
    return float(diff @ diff / features.m)


def log_partition_lipschitz_check(v1: Potential, v2: Potential, grid: Grid):
    """Both sides of |log E_P e^{-V1} - log E_P e^{-V2}| <= ||V1 - V2||_inf on the grid."""
    if v1.d != v2.d:
        raise InvalidArgumentError("potentials have different dimensions")
    g1, g2 = potential_on_grid(v1, grid), potential_on_grid(v2, grid)
    gap = abs(gibbs_on_grid(g1)[2] - gibbs_on_grid(g2)[2])
    return float(gap), float(np.max(np.abs(g1 - g2)))


# file formats

def write_samples_csv(samples: SampleSet, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{i}" for i in range(samples.d)])
        for row in samples.points:
            writer.writerow([repr(float(v)) for v in row])


def read_samples_csv(path, seed=None) -> SampleSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or any(h != f"x{i}" for i, h in enumerate(header)):
            raise InvalidArgumentError(f"{path}: expected header x0,...,x{{d-1}}")
        rows = [[float(v) for v in row] for row in reader if row]
    return SampleSet(np.asarray(rows, dtype=float).reshape(-1, len(header)), seed)


def write_density_csv(q: GridDensity, path) -> None:
    nodes = q.grid.nodes
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cell_index"] + [f"x{i}" for i in range(q.grid.d)] + ["mass"])
        for i, (node, mass) in enumerate(zip(nodes, q.mass)):
            writer.writerow([i] + [repr(float(v)) for v in node] + [repr(float(mass))])


def read_density_csv(path) -> GridDensity:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    d = data.shape[1] - 2
    p = round(len(data) ** (1.0 / d))
    if p ** d != len(data):
        raise InvalidArgumentError(f"{path}: {len(data)} cells is not a square tensor grid")
    return GridDensity(Grid(d, p), data[:, -1])


__all__ = [
    "DEFAULT_POINTS_PER_DIM", "Grid", "GridDensity", "SampleSet", "SignedGridMeasure",
    "default_points_per_dim", "design_matrix", "density_from_potential", "log_partition",
    "kl_divergence", "expectation_on_grid", "expectation_on_samples", "mean_embedding",
    "mmd_sq", "log_partition_lipschitz_check", "signed_difference", "gibbs_on_grid",
    "potential_on_grid", "write_samples_csv", "read_samples_csv", "write_density_csv",
    "read_density_csv", "kl_from_log",
]
