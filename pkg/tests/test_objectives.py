import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biaspot.errors import DegenerateWeightsWarning, InvalidArgumentError
from biaspot.measures import Grid, GridDensity, SampleSet, density_from_potential, kl_divergence
from biaspot.model import RELU, FeatureSet, Potential, sample_features
from biaspot.objectives import (
    Target, grad_backward, grad_forward, loss_backward, loss_forward, make_problem,
    population_target,
)
from biaspot.sampling import sample_grid_oracle

seeds = st.integers(min_value=0, max_value=2**32 - 1)
CONST = FeatureSet(np.array([[0.0, 1.0]]), RELU)


def random_setup(seed, d=1, m=20, p=64, scale=5.0, n=30):
    rng = np.random.default_rng(seed)
    feats = sample_features(d, m, seed)
    grid = Grid(d, p)
    pot = Potential(feats, rng.standard_normal(m) * scale)
    star = Potential(feats, rng.standard_normal(m) * scale)
    samples = SampleSet(rng.uniform(-1, 1, (n, d)))
    return feats, grid, pot, star, samples


def fd_relative_error(loss, grad, pot, h=1e-5):
    """max_j |m * central difference - g_j| / max_j |g_j|."""
    errs = []
    for j in range(pot.m):
        e = np.zeros(pot.m)
        e[j] = h
        fd = (loss(pot.with_coeffs(pot.coeffs + e)) - loss(pot.with_coeffs(pot.coeffs - e))) / (2 * h)
        errs.append(abs(fd * pot.m - grad[j]))
    return max(errs) / np.max(np.abs(grad))


@pytest.mark.parametrize("kind", ["population", "empirical"])
def test_zero_and_constant_potential_losses(kind):
    feats, grid, _, star, samples = random_setup(0)
    target = population_target(star, grid) if kind == "population" else Target.empirical(samples)
    assert loss_backward(Potential(feats, np.zeros(20)), target, grid) == pytest.approx(0.0, abs=1e-14)
    assert loss_forward(Potential(feats, np.zeros(20)), target, grid) == pytest.approx(0.0, abs=1e-14)
    c = Potential(CONST, np.array([4.2]))
    assert loss_backward(c, target, grid) == pytest.approx(0.0, abs=1e-13)
    assert loss_forward(c, target, grid) == pytest.approx(0.0, abs=1e-13)


@given(seed=seeds)
@settings(max_examples=20, deadline=None)
def test_loss_excess_equals_kl(seed):
    _, grid, pot, star, _ = random_setup(seed, scale=20.0)
    target = population_target(star, grid)
    excess = loss_backward(pot, target, grid) - loss_backward(star, target, grid)
    kl = kl_divergence(target.density, density_from_potential(pot, grid))
    assert excess == pytest.approx(kl, abs=1e-8)


def test_gradient_vanishes_at_target():
    _, grid, _, star, _ = random_setup(1)
    assert np.max(np.abs(grad_backward(star, population_target(star, grid), grid))) < 1e-14


def test_forward_gradient_vanishes_for_uniform_target():
    feats, grid, _, _, _ = random_setup(2)
    g = grad_forward(Potential(feats, np.zeros(20)), Target.population(GridDensity.uniform(grid)), grid)
    assert np.max(np.abs(g)) < 1e-15


def test_forward_gradient_with_unit_weights():
    feats, grid, _, _, samples = random_setup(3)
    target = Target.empirical(samples)
    g = grad_forward(Potential(feats, np.zeros(20)), target, grid)
    expected = feats.transform(samples.points).mean(axis=0) - feats.transform(grid.nodes).mean(axis=0)
    assert np.allclose(g, expected, atol=1e-15)


def test_gradient_shift_invariance():
    feats = sample_features(1, 10, 4)
    grid = Grid(1, 64)
    pot = Potential(feats, np.random.default_rng(0).standard_normal(10) * 5)
    target = Target.empirical(SampleSet(np.linspace(-0.9, 0.9, 7)))
    g1 = grad_backward(pot, target, grid)
    g2 = grad_backward(pot.shifted(3.3), target, grid)[:10]
    assert np.allclose(g1, g2, atol=1e-14)


@pytest.mark.parametrize("seed", range(20))
def test_grad_backward_finite_differences(seed):
    _, grid, pot, star, samples = random_setup(seed, d=1 + seed % 2, p=32)
    target = population_target(star, grid) if seed % 3 else Target.empirical(samples)
    g = grad_backward(pot, target, grid)
    assert fd_relative_error(lambda q: loss_backward(q, target, grid), g, pot) < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_grad_forward_finite_differences(seed):
    _, grid, pot, star, samples = random_setup(seed, d=1 + seed % 2, p=32, scale=2.0)
    target = population_target(star, grid) if seed % 3 else Target.empirical(samples)
    g = grad_forward(pot, target, grid)
    assert fd_relative_error(lambda q: loss_forward(q, target, grid), g, pot) < 1e-5


@given(seed=seeds, lam=st.sampled_from([0.25, 0.5, 0.75]))
@settings(max_examples=30, deadline=None)
def test_objectives_convex(seed, lam):
    feats, grid, a1, a2, samples = random_setup(seed, scale=20.0)
    for loss in (loss_backward, loss_forward):
        for target in (Target.empirical(samples), population_target(a2, grid)):
            mid = Potential(feats, lam * a1.coeffs + (1 - lam) * a2.coeffs)
            lhs = loss(mid, target, grid)
            rhs = lam * loss(a1, target, grid) + (1 - lam) * loss(a2, target, grid)
            assert lhs <= rhs + 1e-10


@given(seed=seeds)
@settings(max_examples=30, deadline=None)
def test_gradient_norm_at_most_two(seed):
    _, grid, pot, star, samples = random_setup(seed, d=2, p=16, scale=50.0)
    for target in (Target.empirical(samples), population_target(star, grid)):
        g = grad_backward(pot, target, grid)
        assert np.sqrt(np.mean(g ** 2)) <= 2.0


def test_population_empirical_consistency():
    feats, grid, pot, star, _ = random_setup(7, scale=10.0, p=256)
    target = population_target(star, grid)
    samples = sample_grid_oracle(target.density, 100_000, seed=11)
    pop = loss_backward(pot, target, grid)
    emp = loss_backward(pot, Target.empirical(samples), grid)
    values = pot(samples.points)
    stderr = values.std() / np.sqrt(samples.n)
    assert abs(pop - emp) <= 5 * stderr


def test_degenerate_weights_warning():
    feats = FeatureSet(np.array([[1.0, 0.0]]), RELU)
    pot = Potential(feats, np.array([500.0]))
    target = Target.empirical(SampleSet(np.array([[-0.9], [-0.5], [0.95]])))
    with pytest.warns(DegenerateWeightsWarning):
        grad_forward(pot, target, Grid(1, 16))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        grad_forward(Potential(feats, np.array([0.1])), target, Grid(1, 16))


def test_problem_state_matches_functions():
    feats, grid, pot, star, samples = random_setup(5)
    for objective, lf, gf in (("backward", loss_backward, grad_backward),
                              ("forward", loss_forward, grad_forward)):
        target = Target.empirical(samples)
        loss, g, mass, _ = make_problem(objective, feats, target, grid).state(pot.coeffs)
        assert loss == pytest.approx(lf(pot, target, grid), abs=1e-13)
        assert np.allclose(g, gf(pot, target, grid), atol=1e-13)
        assert mass.sum() == pytest.approx(1.0, abs=1e-12)


def test_target_validation():
    with pytest.raises(InvalidArgumentError):
        Target()
    with pytest.raises(InvalidArgumentError):
        Target.empirical(SampleSet(np.zeros((0, 1))))
    feats, grid, pot, _, _ = random_setup(0)
    with pytest.raises(InvalidArgumentError):
        loss_backward(pot, Target.empirical(SampleSet(np.zeros((3, 2)))), grid)
    with pytest.raises(InvalidArgumentError):
        make_problem("sideways", feats, Target.empirical(SampleSet(np.zeros((3, 1)))), grid)
