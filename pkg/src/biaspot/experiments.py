"""Experiment drivers: sample-complexity exponents, memorization curves,
Monte-Carlo approximation rate, and the bound checks that go with them.

Every random draw is keyed by integers derived from one master seed, and
results are written in a canonical order, so CSV outputs do not depend on the
number of worker processes.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar
from threadpoolctl import threadpool_limits

from .errors import InvalidArgumentError, NumericError
from .measures import (
    Grid, GridDensity, SampleSet, default_points_per_dim, density_from_potential,
    design_matrix, gibbs_on_grid, kl_from_log, write_density_csv,
)
from .model import RELU, Activation, FeatureSet, Potential, rkhs_norm, sample_features
from .objectives import Target
from .sampling import LangevinConfig, sample_grid_oracle, sample_langevin
from .training import TrainConfig, early_stop_select, train


def derive_seed(*keys: int) -> int:
    """A 63-bit seed that depends only on the integer keys."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint64)[0] >> 1)


# regression

def fit_power_law(xs, ys) -> tuple[float, float, float]:
    """OLS of log y on log x; returns (slope, intercept, slope standard error)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise InvalidArgumentError("xs and ys must be 1-d arrays of equal length")
    if xs.size < 3:
        raise InvalidArgumentError("a power-law fit needs at least 3 points")
    if np.any(xs <= 0) or np.any(ys <= 0) or not np.all(np.isfinite(xs) & np.isfinite(ys)):
        raise InvalidArgumentError("power-law fit needs finite positive inputs")
    lx, ly = np.log(xs), np.log(ys)
    if np.ptp(lx) == 0:
        raise InvalidArgumentError("power-law fit needs at least two distinct x values")
    mx, my = lx.mean(), ly.mean()
    sxx = float(((lx - mx) ** 2).sum())
    slope = float(((lx - mx) * (ly - my)).sum() / sxx)
    intercept = float(my - slope * mx)
    resid = ly - (intercept + slope * lx)
    dof = xs.size - 2
    stderr = float(math.sqrt((resid @ resid) / dof / sxx)) if dof > 0 else 0.0
    return slope, intercept, stderr


# bounds

def trainability_bound(a_star, a0, t) -> np.ndarray:
    """||a_* - a_0||^2 / (2t) for the population gradient flow."""
    gap = rkhs_norm(np.asarray(a_star, float) - np.asarray(a0, float)) ** 2
    with np.errstate(divide="ignore"):
        return gap / (2.0 * np.asarray(t, dtype=float))


def sampling_gap_bound(n: int, d: int, delta: float) -> float:
    """4 sqrt(2 log(2d) / n) + sqrt(2 log(2/delta) / n)."""
    if n < 1 or not 0 < delta < 1:
        raise InvalidArgumentError("need n >= 1 and 0 < delta < 1")
    return 4.0 * math.sqrt(2.0 * math.log(2 * d) / n) + math.sqrt(2.0 * math.log(2.0 / delta) / n)


def _generalization_terms(norm_sq: float, n: int, d: int, delta: float):
    """(A, C) such that the bound reads A / t + C t."""
    return norm_sq / 2.0, 2.0 * sampling_gap_bound(n, d, delta)


def generalization_bound(a_star, a0, t, n: int, d: int, delta: float) -> np.ndarray:
    """||a_* - a_0||^2 / (2t) + 2 (4 sqrt(2 log 2d) + sqrt(2 log(2/delta))) t / sqrt(n)."""
    gap = rkhs_norm(np.asarray(a_star, float) - np.asarray(a0, float)) ** 2
    A, C = _generalization_terms(gap, n, d, delta)
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        return A / t + C * t


def optimal_stopping_time(norm: float, n: int, d: int, delta: float) -> float:
    """Closed-form minimizer sqrt(A / C) of A / t + C t."""
    A, C = _generalization_terms(norm ** 2, n, d, delta)
    return math.sqrt(A / C)


def approximation_bound(norm: float, m, lipschitz: float = 1.0, radius: float = 1.0,
                        r: float = 1.0) -> np.ndarray:
    """||V||_H / sqrt(m) * 2 sqrt(3) * Lip(sigma) * sqrt(R^2 + 1) * r."""
    return norm / np.sqrt(np.asarray(m, dtype=float)) * 2.0 * math.sqrt(3.0) * lipschitz \
        * math.sqrt(radius ** 2 + 1.0) * r


# shared setup

def _grid(d: int, points_per_dim) -> Grid:
    if points_per_dim is None:
        return Grid.default(d)
    if isinstance(points_per_dim, dict):
        return Grid(d, int(points_per_dim.get(d, default_points_per_dim(d))))
    return Grid(d, int(points_per_dim))


@lru_cache(maxsize=4)
def _target_setup(d: int, m: int, feature_seed: int, a_star_value: float, p: int, act_tag: str):
    features = sample_features(d, m, feature_seed, Activation.parse(act_tag))
    pot = Potential(features, np.full(m, float(a_star_value)))
    grid = Grid(d, p)
    return pot, grid, density_from_potential(pot, grid)


def draw_samples(pot: Potential, density: GridDensity, n: int, seed: int, sampler: str,
                 langevin: LangevinConfig | None = None) -> SampleSet:
    if sampler == "oracle":
        return sample_grid_oracle(density, n, seed)
    if sampler == "langevin":
        cfg = replace(langevin or LangevinConfig(), seed=seed)
        return sample_langevin(pot, n, cfg)
    raise InvalidArgumentError(f"unknown sampler {sampler!r}")


def _pool_map(fn, tasks: list, jobs: int) -> list:
    """Map in a bounded pool; results come back in task order."""
    if jobs <= 1 or len(tasks) <= 1:
        with threadpool_limits(1):
            return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_single_thread) as pool:
        return list(pool.map(fn, tasks, chunksize=1))


_LIMITER = None


def _single_thread():
    # keep BLAS reductions single-threaded so sums are bitwise reproducible
    global _LIMITER
    _LIMITER = threadpool_limits(1)


# sample-complexity exponents

# gd step on the functional gradient for the rate study; see README for the choice
RATE_STEP_SIZE = 8.0


def default_rate_train() -> TrainConfig:
    return TrainConfig(optimizer="gd", step_size=RATE_STEP_SIZE, steps=20000, schedule="log")


@dataclass(frozen=True)
class RateExperimentConfig:
    dims: tuple = (1, 2)
    ns: tuple = (25, 50, 100, 200)
    trials: int = 20
    m: int = 500
    a_star_value: float = 50.0
    train: TrainConfig = field(default_factory=default_rate_train)
    master_seed: int = 0
    sampler: str = "oracle"
    regression: str = "averaged"
    points_per_dim: dict | int | None = None
    activation: str = "relu"
    # a trial stops once step > patience * T_o + patience_min
    patience: float | None = 3.0
    patience_min: int = 200

    def __post_init__(self):
        if self.trials < 2:
            raise InvalidArgumentError("trials must be >= 2")
        if len(set(self.ns)) < 3:
            raise InvalidArgumentError("ns needs at least 3 distinct sample sizes")
        if min(self.ns) < 1 or min(self.dims) < 1 or self.m < 1:
            raise InvalidArgumentError("dims, ns and m must be positive")
        if self.sampler not in ("oracle", "langevin"):
            raise InvalidArgumentError(f"unknown sampler {self.sampler!r}")
        if self.regression not in ("averaged", "pooled"):
            raise InvalidArgumentError(f"unknown regression mode {self.regression!r}")


@dataclass(frozen=True)
class RateResultRow:
    d: int
    n: int
    trial: int
    seed: int
    T_o: int
    L_o: float
    status: str = "ok"


@dataclass(frozen=True)
class RegressionRow:
    d: int
    alpha: float
    alpha_stderr: float
    t_exponent: float
    t_exponent_stderr: float
    excluded_trials: int


@dataclass
class RateExperimentResult:
    rows: list
    regression: list
    failed: bool = False
    message: str = ""


def _rate_trial(task) -> RateResultRow:
    cfg, d, n, trial = task
    p = _grid(d, cfg.points_per_dim).p
    pot_star, grid, q_star = _target_setup(d, cfg.m, derive_seed(cfg.master_seed, d), cfg.a_star_value,
                                           p, cfg.activation)
    seed = derive_seed(cfg.master_seed, d, n, trial)
    try:
        samples = draw_samples(pot_star, q_star, n, seed, cfg.sampler)
        tcfg = replace(cfg.train, reference=Target.population(q_star), seed=seed,
                       patience=cfg.patience, patience_min=cfg.patience_min)
        pot0 = Potential(pot_star.features, np.zeros(cfg.m))
        traj = train(pot0, Target.empirical(samples), grid, tcfg)
    except NumericError:
        return RateResultRow(d, n, trial, seed, 1, math.inf, "diverged")
    if traj.status != "ok":
        return RateResultRow(d, n, trial, seed, 1, math.inf, traj.status)
    t_o, l_o = early_stop_select(traj)
    status = "ok" if l_o > 0 else "zero-loss"
    return RateResultRow(d, n, trial, seed, max(int(t_o), 1), float(l_o), status)


def regress_rows(rows: list, mode: str = "averaged") -> list:
    """Per-d fits of log L_o and log T_o against log n over the usable rows."""
    out = []
    for d in sorted({r.d for r in rows}):
        mine = [r for r in rows if r.d == d]
        good = [r for r in mine if r.status == "ok"]
        excluded = len(mine) - len(good)
        if mode == "pooled":
            xs = [r.n for r in good]
            ls = [r.L_o for r in good]
            ts = [r.T_o for r in good]
        else:
            xs, ls, ts = [], [], []
            for n in sorted({r.n for r in good}):
                at_n = [r for r in good if r.n == n]
                xs.append(n)
                ls.append(math.exp(np.mean([math.log(r.L_o) for r in at_n])))
                ts.append(math.exp(np.mean([math.log(r.T_o) for r in at_n])))
        if len(set(xs)) < 3:
            out.append(RegressionRow(d, math.nan, math.nan, math.nan, math.nan, excluded))
            continue
        slope, _, se = fit_power_law(xs, ls)
        t_slope, _, t_se = fit_power_law(xs, ts)
        out.append(RegressionRow(d, -slope, se, t_slope, t_se, excluded))
    return out


def run_rate_experiment(cfg: RateExperimentConfig, jobs: int = 1) -> RateExperimentResult:
    """Train on (d, n, trial) grids of empirical targets and fit the sample-complexity exponents."""
    tasks = [(cfg, d, n, t) for d in cfg.dims for n in cfg.ns for t in range(cfg.trials)]
    rows = _pool_map(_rate_trial, tasks, jobs)
    rows.sort(key=lambda r: (r.d, r.n, r.trial))
    regression = regress_rows(rows, cfg.regression)
    bad = sum(r.status != "ok" for r in rows)
    failed = bad > 0.1 * len(rows)
    msg = f"{bad} of {len(rows)} trials diverged" if bad else ""
    return RateExperimentResult(rows, regression, failed, msg)


def write_rate_results(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["d", "n", "trial", "seed", "T_o", "L_o", "status"])
        for r in rows:
            w.writerow([r.d, r.n, r.trial, r.seed, r.T_o, repr(float(r.L_o)), r.status])


def write_rate_regression(regression: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["d", "alpha", "alpha_stderr", "t_exponent", "t_exponent_stderr", "excluded_trials"])
        for r in regression:
            w.writerow([r.d, repr(r.alpha), repr(r.alpha_stderr), repr(r.t_exponent),
                        repr(r.t_exponent_stderr), r.excluded_trials])


def read_rate_results(path) -> list:
    with open(path, newline="") as fh:
        return [RateResultRow(int(r["d"]), int(r["n"]), int(r["trial"]), int(r["seed"]), int(r["T_o"]),
                              float(r["L_o"]), r["status"]) for r in csv.DictReader(fh)]


# memorization

@dataclass(frozen=True)
class MemorizationConfig:
    d: int = 1
    n: int = 25
    m: int = 500
    a_star_value: float = 50.0
    steps: int = 100_000
    optimizer: str = "adam"
    learning_rate: float = 0.1
    snapshot_steps: tuple = (160, 1000, 10_000, 100_000)
    master_seed: int = 0
    sampler: str = "oracle"
    points_per_dim: int | None = None
    control: bool = True
    # the control run is the population-target gradient flow
    control_optimizer: str = "gd"
    control_step_size: float = 0.5

    def __post_init__(self):
        if self.d < 1 or self.n < 1 or self.m < 1 or self.steps < 1:
            raise InvalidArgumentError("d, n, m and steps must be positive")


@dataclass
class MemorizationResult:
    steps: np.ndarray
    test_kl: np.ndarray
    rkhs_norms: np.ndarray
    T_o: int
    L_o: float
    norm_at_T_o: float
    snapshots: dict
    grid: Grid
    status: str
    control_steps: np.ndarray | None = None
    control_kl: np.ndarray | None = None

    @property
    def final_kl(self) -> float:
        return float(self.test_kl[-1])

    @property
    def final_norm(self) -> float:
        return float(self.rkhs_norms[-1])

    def control_monotone(self, tol: float = 1e-12) -> bool:
        if self.control_kl is None:
            return False
        return bool(np.all(np.diff(self.control_kl) <= tol))


def run_memorization_experiment(cfg: MemorizationConfig) -> MemorizationResult:
    """Long training on one empirical target with a log checkpoint schedule."""
    grid = _grid(cfg.d, cfg.points_per_dim)
    with threadpool_limits(1):
        pot_star, grid, q_star = _target_setup(cfg.d, cfg.m, derive_seed(cfg.master_seed, cfg.d),
                                               cfg.a_star_value, grid.p, "relu")
        seed = derive_seed(cfg.master_seed, cfg.d, cfg.n, 0)
        samples = draw_samples(pot_star, q_star, cfg.n, seed, cfg.sampler)
        pot0 = Potential(pot_star.features, np.zeros(cfg.m))
        reference = Target.population(q_star)
        tcfg = TrainConfig(optimizer=cfg.optimizer, step_size=cfg.learning_rate, steps=cfg.steps,
                           schedule="log", reference=reference, seed=seed,
                           snapshot_steps=tuple(s for s in cfg.snapshot_steps if s <= cfg.steps))
        traj = train(pot0, Target.empirical(samples), grid, tcfg)
        t_o, l_o = early_stop_select(traj)
        norm_at = float(traj.rkhs_norms[list(traj.steps).index(t_o)])
        snaps = {s: density_from_potential(Potential(pot_star.features, a), grid)
                 for s, a in traj.snapshots.items()}
        result = MemorizationResult(traj.steps, traj.test_kl, traj.rkhs_norms, int(t_o), float(l_o),
                                    norm_at, snaps, grid, traj.status)
        if cfg.control:
            ccfg = TrainConfig(optimizer=cfg.control_optimizer, step_size=cfg.control_step_size,
                               steps=cfg.steps, schedule="log", reference=reference, seed=seed)
            ctraj = train(pot0, reference, grid, ccfg)
            result.control_steps, result.control_kl = ctraj.steps, ctraj.test_kl
    return result


def write_memorization_outputs(result: MemorizationResult, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [directory / "memorize_curve.csv"]
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "test_kl", "rkhs_norm"])
        for s, k, r in zip(result.steps, result.test_kl, result.rkhs_norms):
            w.writerow([int(s), repr(float(k)), repr(float(r))])
    if result.control_kl is not None:
        paths.append(directory / "memorize_control.csv")
        with open(paths[-1], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "test_kl"])
            for s, k in zip(result.control_steps, result.control_kl):
                w.writerow([int(s), repr(float(k))])
    for step, q in sorted(result.snapshots.items()):
        paths.append(directory / f"snapshot_{step}.csv")
        write_density_csv(q, paths[-1])
    return paths


# Monte-Carlo approximation rate

@dataclass(frozen=True)
class ApproximationConfig:
    d: int = 1
    m_ref: int = 10_000
    ms: tuple = (16, 32, 64, 128, 256, 512, 1024, 2048, 4096)
    resamples: int = 10
    a_value: float = 50.0
    master_seed: int = 0
    points_per_dim: int | None = None

    def __post_init__(self):
        if self.m_ref < 1 or self.resamples < 1 or min(self.ms) < 1:
            raise InvalidArgumentError("m_ref, resamples and ms must be positive")


@dataclass
class ApproximationResult:
    ms: np.ndarray
    kl: np.ndarray          # (len(ms), resamples)
    bound: np.ndarray       # per m
    slope: float
    intercept: float
    slope_stderr: float
    reference_norm: float

    @property
    def mean_kl(self) -> np.ndarray:
        return self.kl.mean(axis=1)

    def bound_fraction(self) -> np.ndarray:
        """Fraction of resamples per m whose KL is within the explicit bound."""
        return (self.kl <= self.bound[:, None]).mean(axis=1)


def run_approximation_experiment(cfg: ApproximationConfig) -> ApproximationResult:
    """KL(Q || Q_m) for m features resampled (with replacement) from a reference potential."""
    grid = _grid(cfg.d, cfg.points_per_dim)
    with threadpool_limits(1):
        features = sample_features(cfg.d, cfg.m_ref, derive_seed(cfg.master_seed, cfg.d))
        coeffs = np.full(cfg.m_ref, float(cfg.a_value))
        phi = features.transform(grid.nodes)
        full = np.arange(cfg.m_ref)
        # same indexing path as the resamples so the full draw reproduces the reference bit for bit
        ref_mass, ref_log, _ = gibbs_on_grid(phi[:, full] @ coeffs[full] / cfg.m_ref)
        rng = np.random.default_rng(derive_seed(cfg.master_seed, cfg.d, cfg.m_ref))
        kl = np.empty((len(cfg.ms), cfg.resamples))
        for i, m in enumerate(cfg.ms):
            for r in range(cfg.resamples):
                if m == cfg.m_ref and r == 0:
                    idx = full
                else:
                    idx = rng.integers(0, cfg.m_ref, size=m)
                q_mass, q_log, _ = gibbs_on_grid(phi[:, idx] @ coeffs[idx] / m)
                kl[i, r] = max(kl_from_log(ref_mass, ref_log, q_mass, q_log), 0.0)
    norm = rkhs_norm(coeffs)
    ms = np.asarray(cfg.ms, dtype=float)
    mean = kl.mean(axis=1)
    usable = mean > 0
    if usable.sum() >= 3:
        slope, intercept, se = fit_power_law(ms[usable], mean[usable])
    else:
        slope = intercept = se = math.nan
    bound = approximation_bound(norm, ms, radius=math.sqrt(cfg.d))
    return ApproximationResult(ms.astype(int), kl, bound, slope, intercept, se, norm)


def write_approximation_results(result: ApproximationResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["m", "resample", "kl"])
        for m, row in zip(result.ms, result.kl):
            for r, v in enumerate(row):
                w.writerow([int(m), r, repr(float(v))])


# generalization bound

@dataclass(frozen=True)
class GeneralizationConfig:
    d: int = 1
    n: int = 50
    trials: int = 50
    m: int = 500
    a_star_value: float = 50.0
    step_size: float = 0.5
    steps: int = 2000
    delta: float = 0.1
    master_seed: int = 0
    sampler: str = "oracle"
    points_per_dim: int | None = None


@dataclass
class GeneralizationReport:
    times: np.ndarray            # checkpoint flow times (shared across trials)
    bound: np.ndarray            # bound at each checkpoint time
    test_kl: np.ndarray          # (trials, checkpoints)
    satisfied: np.ndarray        # per trial: bound held at every checkpoint with t > 0
    closed_form_T: float
    numeric_T: float

    @property
    def fraction(self) -> float:
        return float(self.satisfied.mean())


def _generalization_trial(task):
    cfg, trial = task
    pot_star, grid, q_star = _target_setup(cfg.d, cfg.m, derive_seed(cfg.master_seed, cfg.d),
                                           cfg.a_star_value, _grid(cfg.d, cfg.points_per_dim).p, "relu")
    seed = derive_seed(cfg.master_seed, cfg.d, cfg.n, trial)
    samples = draw_samples(pot_star, q_star, cfg.n, seed, cfg.sampler)
    tcfg = TrainConfig(step_size=cfg.step_size, steps=cfg.steps, schedule="log",
                       reference=Target.population(q_star), seed=seed)
    traj = train(Potential(pot_star.features, np.zeros(cfg.m)), Target.empirical(samples), grid, tcfg)
    return traj.times, traj.test_kl


def check_generalization_bound(cfg: GeneralizationConfig, jobs: int = 1) -> GeneralizationReport:
    """Empirical runs from a_0 = 0 checked against the early-stopping bound at every checkpoint."""
    results = _pool_map(_generalization_trial, [(cfg, t) for t in range(cfg.trials)], jobs)
    times = results[0][0]
    kl = np.array([r[1] for r in results])
    a_star = np.full(cfg.m, cfg.a_star_value)
    a0 = np.zeros(cfg.m)
    bound = generalization_bound(a_star, a0, times, cfg.n, cfg.d, cfg.delta)
    positive = times > 0
    ok = np.all(kl[:, positive] <= bound[positive], axis=1)
    norm = rkhs_norm(a_star - a0)
    closed = optimal_stopping_time(norm, cfg.n, cfg.d, cfg.delta)
    f = lambda lt: float(generalization_bound(a_star, a0, math.exp(lt), cfg.n, cfg.d, cfg.delta))
    res = minimize_scalar(f, bounds=(math.log(1e-6), math.log(1e8)), method="bounded",
                          options={"xatol": 1e-10})
    return GeneralizationReport(times, bound, kl, ok, closed, math.exp(res.x))


# sampling gap

def estimate_sampling_gap(samples: SampleSet, population: GridDensity, features: FeatureSet,
                          fresh: int = 5000, seed: int = 0) -> float:
    """max_w E_{Q_* - Q_*^(n)}[sigma(w . x~)] over realized, coordinate and fresh directions."""
    d = population.grid.d
    if samples.d != d or features.d != d:
        raise InvalidArgumentError("samples, density and features must share d")
    dirs = [features.weights, np.eye(d + 1), -np.eye(d + 1)]
    if fresh > 0:
        dirs.append(sample_features(d, fresh, seed, features.activation).weights)
    probe = FeatureSet(np.vstack(dirs), features.activation)
    pop = Target.population(population).feature_means(probe, cache=False)
    emp = np.zeros(probe.m)
    # chunked so that very large sample sets never materialize an (n, m) matrix
    for start in range(0, samples.n, 50_000):
        emp += probe.transform(samples.points[start:start + 50_000]).sum(axis=0)
    return float(np.max(pop - emp / samples.n))


__all__ = [
    "ApproximationConfig", "ApproximationResult", "GeneralizationConfig", "GeneralizationReport",
    "MemorizationConfig", "MemorizationResult", "RateExperimentConfig", "RateExperimentResult",
    "RateResultRow", "RegressionRow", "RATE_STEP_SIZE", "approximation_bound",
    "check_generalization_bound", "default_rate_train", "derive_seed", "draw_samples",
    "estimate_sampling_gap", "fit_power_law", "generalization_bound", "optimal_stopping_time",
    "read_rate_results", "regress_rows", "run_approximation_experiment",
    "run_memorization_experiment", "run_rate_experiment", "sampling_gap_bound",
    "trainability_bound", "write_approximation_results", "write_memorization_outputs",
    "write_rate_regression", "write_rate_results",
]
