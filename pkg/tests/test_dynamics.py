import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biaspot.dynamics import (
    FixedPointReport, MeasureFlowConfig, evolve_measure, fixed_point_report, local_mass,
    mass_near_atoms, potential_flow_equivalence_check, raw_velocity_field, velocity_field,
)
from biaspot.errors import InvalidArgumentError
from biaspot.measures import Grid, GridDensity, SampleSet, density_from_potential
from biaspot.model import Potential, empirical_kernel, sample_features
from biaspot.objectives import Target, population_target

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def atoms_target(n, seed, d=1):
    return Target.empirical(SampleSet(np.random.default_rng(seed).uniform(-1, 1, (n, d))))


def random_density(grid, seed, scale=1.0):
    return GridDensity.from_log_weights(grid, np.random.default_rng(seed).standard_normal(grid.n_cells) * scale)


def test_velocity_vanishes_at_target():
    grid = Grid(1, 64)
    feats = sample_features(1, 50, 0)
    q = density_from_potential(Potential(feats, np.full(50, 30.0)), grid)
    assert np.max(np.abs(raw_velocity_field(q, Target.population(q), feats))) < 1e-15
    assert np.max(np.abs(velocity_field(q, Target.population(q), feats))) < 1e-15


@given(seed=seeds)
@settings(max_examples=30, deadline=None)
def test_velocity_centered(seed):
    grid = Grid(1, 64)
    feats = sample_features(1, 40, seed)
    q = random_density(grid, seed, 2.0)
    v = velocity_field(q, atoms_target(7, seed), feats)
    assert abs(float(q.mass @ v)) <= 1e-12


def test_velocity_matches_double_sum():
    grid = Grid(1, 8)
    feats = sample_features(1, 30, 2)
    q = random_density(grid, 3)
    atoms = np.array([[-0.37], [0.61]])
    v = raw_velocity_field(q, Target.empirical(SampleSet(atoms)), feats)
    nodes = grid.nodes
    for i, x in enumerate(nodes):
        brute = sum(empirical_kernel(feats, x, a) for a in atoms) / 2
        brute -= sum(q.mass[j] * empirical_kernel(feats, x, y) for j, y in enumerate(nodes))
        assert v[i] == pytest.approx(brute, abs=1e-10)


def test_trajectory_constant_at_target():
    grid = Grid(1, 64)
    feats = sample_features(1, 40, 1)
    q = random_density(grid, 1)
    flow = evolve_measure(q, Target.population(q), feats, MeasureFlowConfig(steps=50))
    assert np.array_equal(flow.final.mass, q.mass)
    assert max(flow.mmd_sq) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_mmd_nonincreasing_and_mass_conserved(seed):
    grid = Grid(1, 128)
    feats = sample_features(1, 100, seed)
    if seed % 2:
        target = atoms_target(25, seed)
    else:
        target = Target.population(random_density(grid, seed + 50, 3.0))
    flow = evolve_measure(GridDensity.uniform(grid), target, feats,
                          MeasureFlowConfig(steps=300, snapshot_every=1))
    assert np.all(np.diff(flow.mmd_sq) <= 1e-12)
    assert flow.mmd_sq[-1] < flow.mmd_sq[0]
    for mass in flow.snapshots.values():
        assert abs(mass.sum() - 1.0) <= 1e-12
        assert mass.min() >= 0


def test_fixed_policy_halves_on_negative_mass():
    grid = Grid(1, 64)
    feats = sample_features(1, 50, 4)
    flow = evolve_measure(GridDensity.uniform(grid), atoms_target(3, 4), feats,
                          MeasureFlowConfig(dt=1e4, steps=20, dt_policy="fixed"))
    assert flow.rejected_steps > 0
    assert min(flow.min_mass) >= 0


def test_support_monotonicity():
    # |sigma| <= 1 on the box for l1-sphere features, so ||k|| <= 1
    grid = Grid(1, 128)
    feats = sample_features(1, 100, 5)
    q0 = GridDensity.uniform(grid)
    flow = evolve_measure(q0, atoms_target(25, 5), feats, MeasureFlowConfig(steps=2000, record_every=100))
    horizon = flow.times[-1]
    alive = q0.mass >= 1e-6
    assert np.all(flow.final.mass[alive] >= q0.mass[alive] * np.exp(-4 * horizon))


def test_fixed_point_characterization():
    grid = Grid(1, 64)
    feats = sample_features(1, 60, 6)
    q = random_density(grid, 6)
    assert fixed_point_report(q, Target.population(q), feats).consistent
    # a point mass away from the atoms is stationary (vbar is zero on its support)
    mass = np.zeros(64)
    mass[3] = 1.0
    atoms = SampleSet(np.array([[0.5], [0.8]]))
    rep = fixed_point_report(GridDensity(grid, mass), Target.empirical(atoms), feats)
    assert rep.max_vbar <= 1e-9
    assert rep.mmd > 1e-6 and rep.min_atom_mass <= 1e-6
    assert rep.consistent
    assert not FixedPointReport(0.0, 0.5, 0.3).consistent


def test_local_mass_and_atom_mass():
    grid = Grid(1, 10)
    q = GridDensity.uniform(grid)
    assert local_mass(q, np.array([[0.05]]), 1)[0] == pytest.approx(0.3)
    assert local_mass(q, np.array([[-0.99]]), 2)[0] == pytest.approx(0.3)
    assert mass_near_atoms(q, np.array([[0.05], [0.25]]), 1) == pytest.approx(0.4)


def test_single_step_equivalence():
    grid = Grid(1, 256)
    feats = sample_features(1, 200, 7)
    assert potential_flow_equivalence_check(feats, grid, atoms_target(25, 7), 0.5, 1) <= 1e-12


def test_equivalence_constant_at_zero_gap():
    grid = Grid(1, 64)
    feats = sample_features(1, 30, 8)
    target = Target.population(GridDensity.uniform(grid))
    assert potential_flow_equivalence_check(feats, grid, target, 0.5, 20) <= 1e-14


def test_equivalence_200_steps():
    grid = Grid(1, 256)
    feats = sample_features(1, 500, 9)
    dev = potential_flow_equivalence_check(feats, grid, atoms_target(25, 9), 8.0, 200)
    assert dev <= 1e-6


def test_equivalence_from_nonzero_start():
    grid = Grid(2, 16)
    feats = sample_features(2, 100, 10)
    target = population_target(Potential(feats, np.full(100, 20.0)), grid)
    coeffs = np.random.default_rng(0).standard_normal(100) * 5
    assert potential_flow_equivalence_check(feats, grid, target, 1.0, 50, coeffs) <= 1e-9


def test_flow_csv(tmp_path):
    grid = Grid(1, 32)
    flow = evolve_measure(GridDensity.uniform(grid), atoms_target(4, 0), sample_features(1, 20, 0),
                          MeasureFlowConfig(steps=10, record_every=5))
    flow.to_csv(tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "step,mmd_sq,min_mass,max_vbar"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["0", "5", "10"]


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        MeasureFlowConfig(dt=0)
    with pytest.raises(InvalidArgumentError):
        MeasureFlowConfig(dt_policy="rk4")
