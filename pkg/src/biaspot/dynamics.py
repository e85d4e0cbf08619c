"""Measure dynamics dQ/dt = vbar(Q) Q driven by the empirical feature kernel.

With v(x; Q) = E_{(Q' - Q)(x')}[k(x, x')] and vbar = v - E_Q[v], the squared
MMD ||Q_t - Q'||_k^2 is a Lyapunov function of the flow.  All kernel sums go
through mean embeddings, so a step costs O(m * cells) and atomic targets are
used exactly.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .measures import Grid, GridDensity, design_matrix, gibbs_on_grid
from .model import FeatureSet
from .objectives import Target

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MeasureFlowConfig:
    dt: float = 1.0
    steps: int = 1000
    record_every: int = 1
    dt_policy: str = "adaptive"
    # adaptive steps satisfy dt * max|vbar| <= dt_cap
    dt_cap: float = 0.5
    snapshot_every: int | None = None
    max_halvings: int = 60

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidArgumentError("dt must be positive")
        if self.steps < 1 or self.record_every < 1:
            raise InvalidArgumentError("steps and record_every must be >= 1")
        if self.dt_policy not in ("fixed", "adaptive"):
            raise InvalidArgumentError(f"unknown dt policy {self.dt_policy!r}")


@dataclass
class MeasureFlow:
    steps: list = field(default_factory=list)
    times: list = field(default_factory=list)
    mmd_sq: list = field(default_factory=list)
    min_mass: list = field(default_factory=list)
    max_vbar: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    final: GridDensity | None = None
    rejected_steps: int = 0
    max_drift: float = 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "mmd_sq", "min_mass", "max_vbar"])
            for row in zip(self.steps, self.mmd_sq, self.min_mass, self.max_vbar):
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _target_embedding(target: Target, features: FeatureSet, grid: Grid) -> np.ndarray:
    target.check(features, grid)
    return target.feature_means(features)


def _vbar(phi: np.ndarray, mass: np.ndarray, emb_target: np.ndarray, m: int):
    diff = emb_target - phi.T @ mass
    v = phi @ diff / m
    return v - mass @ v, diff


def velocity_field(q: GridDensity, target: Target, features: FeatureSet) -> np.ndarray:
    """Centered velocity vbar(x_i; Q) at every grid node."""
    phi = design_matrix(features, q.grid)
    emb = _target_embedding(target, features, q.grid)
    return _vbar(phi, q.mass, emb, features.m)[0]


def raw_velocity_field(q: GridDensity, target: Target, features: FeatureSet) -> np.ndarray:
    """Uncentered v(x_i; Q) = E_{(Q' - Q)(x')}[k(x_i, x')]."""
    phi = design_matrix(features, q.grid)
    emb = _target_embedding(target, features, q.grid)
    return phi @ (emb - phi.T @ q.mass) / features.m


def evolve_measure(q0: GridDensity, target: Target, features: FeatureSet,
                   cfg: MeasureFlowConfig = MeasureFlowConfig()) -> MeasureFlow:
    """Multiplicative forward Euler: mass_i <- mass_i (1 + dt vbar_i).

    Steps that would create negative mass are retried with dt halved.  Under
    the adaptive policy dt is also capped at ``dt_cap / max|vbar|`` and a step
    that would raise the MMD is halved as well, so the recorded MMD curve is
    nonincreasing.
    """
    grid, m = q0.grid, features.m
    phi = design_matrix(features, grid)
    emb_t = _target_embedding(target, features, grid)
    mass = np.array(q0.mass, dtype=float)
    vbar, diff = _vbar(phi, mass, emb_t, m)
    mmd = float(diff @ diff / m)
    flow = MeasureFlow()
    t = 0.0

    def record(step):
        flow.steps.append(step)
        flow.times.append(t)
        flow.mmd_sq.append(mmd)
        flow.min_mass.append(float(mass.min()))
        flow.max_vbar.append(float(np.abs(vbar).max()))

    record(0)
    for step in range(1, cfg.steps + 1):
        top = float(np.abs(vbar).max())
        dt = cfg.dt
        if cfg.dt_policy == "adaptive" and top > 0:
            dt = min(dt, cfg.dt_cap / top)
        for _ in range(cfg.max_halvings):
            new = mass * (1.0 + dt * vbar)
            if new.min() < 0:
                flow.rejected_steps += 1
                log.debug("step %d: negative mass at dt=%g, halving", step, dt)
                dt *= 0.5
                continue
            new_vbar, new_diff = _vbar(phi, new, emb_t, m)
            new_mmd = float(new_diff @ new_diff / m)
            if cfg.dt_policy == "adaptive" and new_mmd > mmd:
                flow.rejected_steps += 1
                dt *= 0.5
                continue
            break
        drift = abs(new.sum() - 1.0)
        flow.max_drift = max(flow.max_drift, drift)
        if drift > 1e-12:
            new /= new.sum()
            new_vbar, new_diff = _vbar(phi, new, emb_t, m)
            new_mmd = float(new_diff @ new_diff / m)
        mass, vbar, mmd = new, new_vbar, new_mmd
        t += dt
        if step % cfg.record_every == 0 or step == cfg.steps:
            record(step)
        if cfg.snapshot_every and step % cfg.snapshot_every == 0:
            flow.snapshots[step] = mass.copy()
    flow.final = GridDensity(grid, mass / mass.sum())
    return flow


def local_mass(q: GridDensity, points, radius_cells: int) -> np.ndarray:
    """Mass within ``radius_cells`` cells (per axis) of each point."""
    grid = q.grid
    idx = np.atleast_2d(np.clip(np.floor((np.atleast_2d(points) + 1.0) / grid.cell_width),
                                0, grid.p - 1).astype(int))
    cube = q.mass.reshape((grid.p,) * grid.d)
    out = np.empty(idx.shape[0])
    for k, ij in enumerate(idx):
        sl = tuple(slice(max(i - radius_cells, 0), i + radius_cells + 1) for i in ij)
        out[k] = cube[sl].sum()
    return out


def mass_near_atoms(q: GridDensity, atoms, radius_cells: int = 2) -> float:
    """Total mass of the cells within ``radius_cells`` of any atom (cells counted once)."""
    grid = q.grid
    idx = np.clip(np.floor((np.atleast_2d(atoms) + 1.0) / grid.cell_width), 0, grid.p - 1).astype(int)
    keep = np.zeros((grid.p,) * grid.d, dtype=bool)
    for ij in idx:
        keep[tuple(slice(max(i - radius_cells, 0), i + radius_cells + 1) for i in ij)] = True
    return float(q.mass.reshape(keep.shape)[keep].sum())


@dataclass
class FixedPointReport:
    max_vbar: float
    mmd: float
    min_atom_mass: float | None

    @property
    def consistent(self) -> bool:
        """Not near-stationary, or stationary at the target, or missing part of its support."""
        if self.max_vbar > 1e-9:
            return True
        return self.mmd <= 1e-6 or (self.min_atom_mass is not None and self.min_atom_mass <= 1e-6)


def fixed_point_report(q: GridDensity, target: Target, features: FeatureSet,
                       radius_cells: int = 0) -> FixedPointReport:
    phi = design_matrix(features, q.grid)
    emb_t = _target_embedding(target, features, q.grid)
    vbar, diff = _vbar(phi, q.mass, emb_t, features.m)
    atom_mass = None
    if target.samples is not None:
        atom_mass = float(local_mass(q, target.samples.points, radius_cells).min())
    # the local mass only matters where Q actually moves mass (support of Q)
    top = float(np.abs(vbar[q.mass > 0]).max()) if np.any(q.mass > 0) else 0.0
    return FixedPointReport(top, float(np.sqrt(max(diff @ diff / features.m, 0.0))), atom_mass)


def potential_flow_equivalence_check(features: FeatureSet, grid: Grid, target: Target,
                                     step_size: float, steps: int, coeffs0=None) -> float:
    """Max deviation between coefficient-space gd and the direct potential-space flow.

    The coefficient run iterates a <- a - eta (E_{Q'}[sigma] - E_Q[sigma]); the
    potential run iterates V <- V + dt E_{(Q - Q')(x')}[k(., x')] on the grid
    with dt = eta.  Both potentials are centered to mean zero under P before
    comparison, at every step.
    """
    phi = design_matrix(features, grid)
    m = features.m
    emb_t = _target_embedding(target, features, grid)
    a = np.zeros(m) if coeffs0 is None else np.array(coeffs0, dtype=float)
    v = phi @ a / m
    worst = 0.0
    for _ in range(steps):
        q_a = gibbs_on_grid(phi @ a / m)[0]
        a = a - step_size * (emb_t - phi.T @ q_a)
        q_v = gibbs_on_grid(v)[0]
        v = v + step_size * (phi @ (phi.T @ q_v - emb_t)) / m
        va = phi @ a / m
        worst = max(worst, float(np.max(np.abs((va - va.mean()) - (v - v.mean())))))
    return worst
