"""Gradient-flow training of bias potentials, with test-KL logging and early stopping."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, NumericError
from .measures import Grid, gibbs_on_grid, kl_from_log
from .model import Potential, TwoLayerNet, augment, rkhs_norm, save_potential
from .objectives import Target, make_problem

OPTIMIZERS = ("gd", "sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "gd"
    step_size: float = 0.5
    steps: int = 1000
    eval_every: int = 1
    # "every": checkpoint each eval_every steps; "log": every step up to 100, then x1.1
    schedule: str = "every"
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    projection_radius: float | None = None
    reference: Target | None = None
    objective: str = "backward"
    snapshot_steps: tuple = ()
    # stop once step > patience * (best test-KL step) + patience_min; needs a reference
    patience: float | None = None
    patience_min: int = 50

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise InvalidArgumentError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.step_size > 0:
            raise InvalidArgumentError("step_size must be positive")
        if self.steps < 1 or self.eval_every < 1:
            raise InvalidArgumentError("steps and eval_every must be >= 1")
        if self.schedule not in ("every", "log"):
            raise InvalidArgumentError(f"unknown checkpoint schedule {self.schedule!r}")
        if self.projection_radius is not None and not self.projection_radius > 0:
            raise InvalidArgumentError("projection radius must be positive")
        if self.reference is not None and self.reference.kind != "population":
            raise InvalidArgumentError("test-KL reference must be a population target")
        if self.patience is not None and self.reference is None:
            raise InvalidArgumentError("patience-based stopping needs a reference target")


def checkpoint_schedule(steps: int, schedule: str = "every", eval_every: int = 1) -> list[int]:
    """Sorted checkpoint steps in [0, steps], always including both ends."""
    if schedule == "every":
        pts = set(range(0, steps + 1, eval_every))
    else:
        pts = set(range(0, min(steps, 100) + 1))
        t = 100.0
        while t < steps:
            t *= 1.1
            pts.add(min(int(round(t)), steps))
    pts.add(steps)
    return sorted(pts)


@dataclass
class Checkpoint:
    step: int
    train_loss: float
    test_kl: float | None
    rkhs_norm: float
    wall_time: float


@dataclass
class Trajectory:
    checkpoints: list[Checkpoint]
    final_coeffs: np.ndarray
    step_size: float
    snapshots: dict = field(default_factory=dict)
    status: str = "ok"
    flags: list = field(default_factory=list)

    @property
    def steps(self) -> np.ndarray:
        return np.array([c.step for c in self.checkpoints])

    @property
    def train_loss(self) -> np.ndarray:
        return np.array([c.train_loss for c in self.checkpoints])

    @property
    def test_kl(self) -> np.ndarray:
        return np.array([np.nan if c.test_kl is None else c.test_kl for c in self.checkpoints])

    @property
    def rkhs_norms(self) -> np.ndarray:
        return np.array([c.rkhs_norm for c in self.checkpoints])

    @property
    def times(self) -> np.ndarray:
        """Flow time t = step * step_size."""
        return self.steps * self.step_size

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "train_loss", "test_kl", "rkhs_norm", "status"])
            for c in self.checkpoints:
                kl = "" if c.test_kl is None else repr(c.test_kl)
                writer.writerow([c.step, repr(c.train_loss), kl, repr(c.rkhs_norm), self.status])

    def write_snapshots(self, directory, features) -> list[Path]:
        out = []
        for step, coeffs in sorted(self.snapshots.items()):
            path = Path(directory) / f"snap_{step}.json"
            save_potential(Potential(features, coeffs), path)
            out.append(path)
        return out


class Adam:
    """Adam on a flat parameter array; bias-corrected moments, fixed learning rate."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _make_stepper(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.step_size, cfg.beta1, cfg.beta2, cfg.adam_eps).step
    return lambda params, grad: params - cfg.step_size * grad


def project_to_ball(a: np.ndarray, radius: float | None) -> np.ndarray:
    """Radial projection onto {rkhs_norm(a) <= radius}."""
    if radius is None:
        return a
    norm = rkhs_norm(a)
    return a * (radius / norm) if norm > radius else a


def _reference_logs(cfg: TrainConfig):
    if cfg.reference is None:
        return None
    mass = cfg.reference.density.mass
    log_mass = np.zeros_like(mass)
    np.log(mass, where=mass > 0, out=log_mass)
    return mass, log_mass


class _Recorder:
    """Shared checkpoint/patience bookkeeping for the training loops."""

    def __init__(self, cfg: TrainConfig, watch_monotone: bool = False):
        self.cfg = cfg
        # gd on a population target with step <= 0.5 should never raise the loss
        self.watch_monotone = (watch_monotone and cfg.optimizer == "gd" and cfg.step_size <= 0.5
                               and cfg.projection_radius is None)
        self.schedule = set(checkpoint_schedule(cfg.steps, cfg.schedule, cfg.eval_every))
        self.snap_steps = set(cfg.snapshot_steps)
        self.ref = _reference_logs(cfg)
        self.checkpoints: list[Checkpoint] = []
        self.snapshots: dict = {}
        self.flags: list[str] = []
        self.best = (np.inf, 0)
        self.t0 = time.perf_counter()

    def record(self, step, loss, mass, log_mass, norm, params):
        if step in self.snap_steps:
            self.snapshots[step] = np.array(params, copy=True)
        if step not in self.schedule:
            return
        kl = None
        if self.ref is not None:
            kl = max(kl_from_log(self.ref[0], self.ref[1], mass, log_mass), 0.0)
            if step > 0 and kl < self.best[0]:
                self.best = (kl, step)
        if (self.watch_monotone and self.checkpoints
                and loss > self.checkpoints[-1].train_loss + 1e-12):
            self.flags.append(f"train loss increased at step {step}")
        self.checkpoints.append(Checkpoint(step, loss, kl, norm, time.perf_counter() - self.t0))

    def exhausted(self, step) -> bool:
        cfg = self.cfg
        return cfg.patience is not None and step > cfg.patience * self.best[1] + cfg.patience_min


def train(pot: Potential, target: Target, grid: Grid, cfg: TrainConfig) -> Trajectory:
    """Descend the objective in coefficient space from ``pot.coeffs``; ``pot`` is not modified."""
    if cfg.optimizer == "sgd" and target.kind != "empirical":
        raise InvalidArgumentError("sgd needs an empirical target")
    problem = make_problem(cfg.objective, pot.features, target, grid)
    rec = _Recorder(cfg, watch_monotone=target.kind == "population")
    stepper = _make_stepper(cfg)
    rng = np.random.default_rng(cfg.seed)
    batch_phi = pot.features.transform(target.samples.points) if cfg.optimizer == "sgd" else None
    a = np.array(pot.coeffs, dtype=float)
    status = "ok"
    for step in range(cfg.steps + 1):
        try:
            loss, g, mass, log_mass = problem.state(a)
        except NumericError:
            status = "diverged"
            break
        if not (np.isfinite(loss) and np.all(np.isfinite(g))):
            status = "diverged"
            break
        rec.record(step, loss, mass, log_mass, rkhs_norm(a), a)
        if step == cfg.steps or rec.exhausted(step):
            break
        if batch_phi is not None:
            g = _minibatch_grad(problem, cfg, batch_phi, a, mass, rng)
        a = project_to_ball(stepper(a, g), cfg.projection_radius)
    return Trajectory(rec.checkpoints, a, cfg.step_size, rec.snapshots, status, rec.flags)


def _minibatch_grad(problem, cfg, batch_phi, a, mass, rng):
    idx = rng.integers(0, batch_phi.shape[0], size=cfg.batch_size)
    phi_b = batch_phi[idx]
    if cfg.objective == "backward":
        return phi_b.mean(axis=0) - problem.phi.T @ mass
    v = phi_b @ a / problem.m
    w = np.exp(v - v.max())
    return phi_b.T @ (w / w.sum()) - problem.base_means


def train_projected(pot: Potential, target: Target, grid: Grid, cfg: TrainConfig) -> Trajectory:
    """Training constrained to the ball of radius ``cfg.projection_radius``."""
    if cfg.projection_radius is None:
        raise InvalidArgumentError("train_projected needs cfg.projection_radius")
    return train(pot, target, grid, cfg)


def two_layer_velocity(particles: np.ndarray, activation, target: Target, grid: Grid):
    """Per-particle gradient m * dL-/d(a_j, w_j, b_j) and the model density.

    Returns ``(grad, loss, mass, log_mass)``; grad has shape (m, d+2).
    """
    a, weights = particles[:, 0], particles[:, 1:]
    m = a.shape[0]
    x_grid = augment(grid.nodes, grid.d)
    z = x_grid @ weights.T
    values = activation(z) @ a / m
    mass, log_mass, log_z = gibbs_on_grid(values)
    if target.density is not None:
        x_t, w_t = x_grid, target.density.mass
        z_t = z
    else:
        x_t = augment(target.samples.points, grid.d)
        w_t = np.full(x_t.shape[0], 1.0 / x_t.shape[0])
        z_t = x_t @ weights.T
    sig_t = activation(z_t)
    loss = float(w_t @ (sig_t @ a) / m + log_z)
    grad_a = sig_t.T @ w_t - activation(z).T @ mass
    dsig_t, dsig = activation.derivative(z_t), activation.derivative(z)
    grad_w = a[:, None] * ((dsig_t * w_t[:, None]).T @ x_t - (dsig * mass[:, None]).T @ x_grid)
    return np.column_stack([grad_a, grad_w]), loss, mass, log_mass


def two_layer_loss(particles: np.ndarray, activation, target: Target, grid: Grid) -> float:
    return two_layer_velocity(particles, activation, target, grid)[1]


def train_two_layer(net: TwoLayerNet, target: Target, grid: Grid, cfg: TrainConfig) -> Trajectory:
    """Euler steps on all particle coordinates; ``final_coeffs`` holds the (m, d+2) particles."""
    if not net.activation.smooth:
        raise InvalidArgumentError("two-layer training requires a smooth activation")
    target.check(net.as_potential().features, grid)
    if cfg.optimizer == "sgd":
        raise InvalidArgumentError("two-layer training supports gd and adam")
    rec = _Recorder(cfg)
    stepper = _make_stepper(cfg)
    theta = net.particles
    status = "ok"
    for step in range(cfg.steps + 1):
        try:
            grad, loss, mass, log_mass = two_layer_velocity(theta, net.activation, target, grid)
        except NumericError:
            status = "diverged"
            break
        rec.record(step, loss, mass, log_mass, rkhs_norm(theta[:, 0]), theta)
        if step == cfg.steps or rec.exhausted(step):
            break
        theta = stepper(theta, grad)
        if not np.all(np.isfinite(theta)) or np.abs(theta).max() > 1e6:
            status = "diverged"
            break
    return Trajectory(rec.checkpoints, theta, cfg.step_size, rec.snapshots, status, rec.flags)


def early_stop_select(traj: Trajectory) -> tuple[int, float]:
    """(T_o, L_o): the checkpoint with the smallest test KL, earliest on ties, ignoring step 0."""
    cps = [c for c in traj.checkpoints if c.test_kl is not None]
    if not cps:
        raise InvalidArgumentError("trajectory has no test-KL checkpoints")
    later = [c for c in cps if c.step > 0]
    cps = later or cps
    best = min(cps, key=lambda c: (c.test_kl, c.step))
    return best.step, best.test_kl


@dataclass
class DeviationReport:
    steps: np.ndarray
    times: np.ndarray
    deviation: np.ndarray
    eps_features: float
    eps_with_coordinates: float

    @property
    def bound(self) -> np.ndarray:
        return self.eps_features * self.times


def trajectory_deviation_check(target_pop: Target, target_emp: Target, grid: Grid,
                               cfg: TrainConfig, pot0: Potential) -> DeviationReport:
    """Twin gd runs from ``pot0`` on the population and empirical targets.

    Reports ||a_t - a_t^(n)|| at every checkpoint next to the measured gradient
    gap max_j |E_{Q* - Q*^(n)}[sigma_j]|.
    """
    if cfg.optimizer != "gd":
        raise InvalidArgumentError("trajectory deviation is defined for plain gradient descent")
    steps = checkpoint_schedule(cfg.steps, cfg.schedule, cfg.eval_every)
    cfg = replace(cfg, snapshot_steps=tuple(steps), reference=None, patience=None)
    pop = train(pot0, target_pop, grid, cfg)
    emp = train(pot0, target_emp, grid, cfg)
    shared = sorted(set(pop.snapshots) & set(emp.snapshots))
    dev = np.array([rkhs_norm(pop.snapshots[s] - emp.snapshots[s]) for s in shared])
    feats = pot0.features
    gap = target_pop.feature_means(feats) - target_emp.feature_means(feats)
    coord = _coordinate_gap(target_pop, target_emp, feats.activation, grid.d)
    eps = float(np.max(np.abs(gap)))
    return DeviationReport(np.array(shared), np.array(shared) * cfg.step_size, dev, eps,
                           max(eps, coord))


def _coordinate_gap(target_pop: Target, target_emp: Target, activation, d: int) -> float:
    from .model import FeatureSet
    dirs = np.vstack([np.eye(d + 1), -np.eye(d + 1)])
    feats = FeatureSet(dirs, activation)
    gap = target_pop.feature_means(feats, cache=False) - target_emp.feature_means(feats, cache=False)
    return float(np.max(np.abs(gap)))
