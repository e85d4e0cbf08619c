"""Drawing sample sets from a bias-potential density."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NumericError
from .measures import GridDensity, SampleSet
from .model import Potential


@dataclass(frozen=True)
class LangevinConfig:
    step: float = 1e-3
    burn_in: int = 5000
    thinning: int = 10
    chains: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.step > 0:
            raise InvalidArgumentError("Langevin step must be positive")
        if self.burn_in < 1 or self.thinning < 1 or self.chains < 1:
            raise InvalidArgumentError("burn_in, thinning and chains must be >= 1")


def chain_rngs(seed: int, chains: int) -> list[np.random.Generator]:
    """One independent stream per chain, keyed by (seed, chain index)."""
    return [np.random.default_rng([seed, c]) for c in range(chains)]


def sample_langevin(pot: Potential, n: int, cfg: LangevinConfig = LangevinConfig()) -> SampleSet:
    """Projected Langevin Monte Carlo targeting e^{-V} on [-1, 1]^d.

    Each chain iterates x <- clip(x - eta grad V(x) + sqrt(2 eta) xi) from a
    uniform start.  After burn-in every ``thinning``-th state is kept; states are
    collected round-robin over chains (chain order fixed) until n are gathered.
    """
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    d, C = pot.d, cfg.chains
    per_chain = -(-n // C)
    iters = cfg.burn_in + cfg.thinning * per_chain
    rngs = chain_rngs(cfg.seed, C)
    x = np.stack([r.uniform(-1.0, 1.0, size=d) for r in rngs])
    noise = np.stack([r.standard_normal((iters, d)) for r in rngs], axis=1)
    scale = np.sqrt(2.0 * cfg.step)
    kept = []
    for it in range(1, iters + 1):
        x = np.clip(x - cfg.step * pot.grad_x(x) + scale * noise[it - 1], -1.0, 1.0)
        if it > cfg.burn_in and (it - cfg.burn_in) % cfg.thinning == 0:
            if not np.all(np.isfinite(x)):
                raise NumericError("Langevin state became non-finite")
            kept.append(x.copy())
    points = np.stack(kept).reshape(-1, d)[:n]
    return SampleSet(points, cfg.seed)


def sample_grid_oracle(q: GridDensity, n: int, seed: int) -> SampleSet:
    """Exact draws from the piecewise-constant density: pick a cell, then a uniform point in it."""
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    rng = np.random.default_rng(seed)
    cells = rng.choice(q.grid.n_cells, size=n, p=q.mass)
    jitter = (rng.random((n, q.grid.d)) - 0.5) * q.grid.cell_width
    points = np.clip(q.grid.nodes[cells] + jitter, -1.0, 1.0)
    return SampleSet(points, seed)


def histogram_tv(a: SampleSet, b: SampleSet, bins: int = 32) -> float:
    """Largest total-variation distance between per-axis marginal histograms of two sample sets."""
    if a.d != b.d:
        raise InvalidArgumentError("sample sets have different dimensions")
    edges = np.linspace(-1.0, 1.0, bins + 1)
    tv = 0.0
    for k in range(a.d):
        ha, _ = np.histogram(a.points[:, k], bins=edges)
        hb, _ = np.histogram(b.points[:, k], bins=edges)
        tv = max(tv, 0.5 * float(np.abs(ha / a.n - hb / b.n).sum()))
    return tv
