"""Random-feature potentials on [-1, 1]^d.

A potential is V(x) = (1/m) sum_j a_j sigma(w_j . x + b_j) with the features
(w_j, b_j) drawn once and held fixed.  Features are stored as rows of an
(m, d+1) array whose last column is the bias, so that with the augmented
point x~ = (x, 1) the pre-activation is simply ``x~ @ weights.T``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import InvalidArgumentError

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Activation:
    """ReLU, or its softplus mollification (1/beta) log(1 + exp(beta z))."""

    name: str = "relu"
    beta: float | None = None

    def __post_init__(self):
        if self.name not in ("relu", "smoothed-relu"):
            raise InvalidArgumentError(f"unknown activation {self.name!r}")
        if self.name == "smoothed-relu" and not (self.beta and self.beta > 0):
            raise InvalidArgumentError("smoothed-relu needs beta > 0")

    def __call__(self, z):
        if self.name == "relu":
            return np.maximum(z, 0.0)
        return np.logaddexp(0.0, self.beta * z) / self.beta

    def derivative(self, z):
        # subgradient convention for ReLU: sigma'(0) = 0
        if self.name == "relu":
            return (z > 0).astype(float)
        return expit(self.beta * z)

    @property
    def smooth(self) -> bool:
        return self.name == "smoothed-relu"

    @property
    def tag(self) -> str:
        if self.name == "relu":
            return "relu"
        return f"smoothed-relu({self.beta!r})"

    @classmethod
    def parse(cls, tag: str) -> "Activation":
        if tag == "relu":
            return RELU
        match = re.fullmatch(r"smoothed-relu\(([^)]+)\)", tag.strip())
        if not match:
            raise InvalidArgumentError(f"cannot parse activation tag {tag!r}")
        return cls("smoothed-relu", float(match.group(1)))


RELU = Activation()


def smoothed_relu(beta: float) -> Activation:
    return Activation("smoothed-relu", float(beta))


def augment(x, d: int) -> np.ndarray:
    """Append the constant coordinate: (N, d) -> (N, d+1).  Accepts a single point."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 and d == 1:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(1, -1) if x.shape[0] == d else x.reshape(-1, 1) if d == 1 else x
    if x.ndim != 2 or x.shape[1] != d:
        raise InvalidArgumentError(f"expected points of dimension {d}, got shape {np.shape(x)}")
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _frozen(arr) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """m fixed features (w_j, b_j); rows of ``weights`` are (w_j, b_j)."""

    weights: np.ndarray
    activation: Activation = RELU
    seed: int | None = None

    def __post_init__(self):
        w = _frozen(self.weights)
        if w.ndim != 2 or w.shape[1] < 2 or w.shape[0] < 1:
            raise InvalidArgumentError(f"feature weights must be (m, d+1), got {w.shape}")
        object.__setattr__(self, "weights", w)

    @property
    def d(self) -> int:
        return self.weights.shape[1] - 1

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    @property
    def w(self) -> np.ndarray:
        return self.weights[:, :-1]

    @property
    def b(self) -> np.ndarray:
        return self.weights[:, -1]

    def preactivation(self, x) -> np.ndarray:
        return augment(x, self.d) @ self.weights.T

    def transform(self, x) -> np.ndarray:
        """Feature matrix sigma(x~ . w_j), shape (N, m)."""
        return self.activation(self.preactivation(x))

    def subset(self, idx) -> "FeatureSet":
        return FeatureSet(self.weights[np.asarray(idx)], self.activation, self.seed)


def sample_features(d: int, m: int, seed: int, activation: Activation = RELU) -> FeatureSet:
    """Draw m points uniformly from the l1 unit sphere in R^{d+1}.

    Uses normalized i.i.d. exponentials with independent random signs, which is
    exactly uniform on the sphere {||w||_1 + |b| = 1}.
    """
    if int(d) < 1 or int(m) < 1:
        raise InvalidArgumentError(f"need d >= 1 and m >= 1, got d={d}, m={m}")
    rng = np.random.default_rng(seed)
    e = rng.standard_exponential((m, d + 1))
    signs = rng.choice(np.array([-1.0, 1.0]), size=(m, d + 1))
    return FeatureSet(signs * e / e.sum(axis=1, keepdims=True), activation, int(seed))


@dataclass(frozen=True, eq=False)
class Potential:
    features: FeatureSet
    coeffs: np.ndarray = field(default=None)

    def __post_init__(self):
        a = np.zeros(self.features.m) if self.coeffs is None else self.coeffs
        a = _frozen(a).reshape(-1)
        if a.shape[0] != self.features.m:
            raise InvalidArgumentError(
                f"{a.shape[0]} coefficients for {self.features.m} features")
        object.__setattr__(self, "coeffs", a)

    @property
    def d(self) -> int:
        return self.features.d

    @property
    def m(self) -> int:
        return self.features.m

    def __call__(self, x) -> np.ndarray:
        return self.features.transform(x) @ self.coeffs / self.m

    def grad_x(self, x) -> np.ndarray:
        """Spatial gradient (1/m) sum_j a_j sigma'(w_j . x~) w_j, shape (N, d)."""
        z = self.features.preactivation(x)
        slope = self.features.activation.derivative(z) * self.coeffs
        return slope @ self.features.w / self.m

    def with_coeffs(self, coeffs) -> "Potential":
        return Potential(self.features, coeffs)

    def shifted(self, c: float) -> "Potential":
        """V + c.  Needs a feature that is constant on the box; appends one."""
        w = np.zeros((1, self.d + 1))
        w[0, -1] = 1.0
        feats = FeatureSet(np.vstack([self.features.weights, w]),
                           self.features.activation, self.features.seed)
        m = self.m + 1
        # (1/m') sum a'_j sigma_j = V + c with a' rescaled for the new width
        a = np.append(self.coeffs * m / self.m, c * m / self.features.activation(1.0))
        return Potential(feats, a)


def eval_potential(pot: Potential, x) -> np.ndarray | float:
    """V(x) for a single point (returns float) or an (N, d) batch."""
    values = pot(x)
    x = np.asarray(x)
    single = x.ndim == 0 or (x.ndim == 1 and (pot.d > 1 or x.shape[0] == 1))
    return float(values[0]) if single else values


def rkhs_norm(pot: Potential | np.ndarray) -> float:
    """sqrt((1/m) sum a_j^2), the empirical L2(rho_0) norm of the coefficients."""
    a = pot.coeffs if isinstance(pot, Potential) else np.asarray(pot, dtype=float)
    return float(np.sqrt(np.mean(a * a)))


def empirical_kernel(features: FeatureSet, x, y) -> float:
    """k(x, y) = (1/m) sum_j sigma(w_j . x~) sigma(w_j . y~) for two points."""
    fx = features.transform(x)
    fy = features.transform(y)
    if fx.shape[0] != 1 or fy.shape[0] != 1:
        raise InvalidArgumentError("empirical_kernel takes single points; use gram()")
    return float(fx[0] @ fy[0] / features.m)


def gram(features: FeatureSet, x, y=None) -> np.ndarray:
    fx = features.transform(x)
    fy = fx if y is None else features.transform(y)
    return fx @ fy.T / features.m


@dataclass(frozen=True, eq=False)
class TwoLayerNet:
    """Scaled two-layer network (1/m) sum_j a_j sigma(w_j . x + b_j) with trainable features."""

    coeffs: np.ndarray
    weights: np.ndarray
    activation: Activation = field(default_factory=lambda: smoothed_relu(8.0))

    def __post_init__(self):
        if not self.activation.smooth:
            raise InvalidArgumentError("two-layer training requires a smooth activation")
        a, w = _frozen(self.coeffs).reshape(-1), _frozen(self.weights)
        if w.ndim != 2 or w.shape[0] != a.shape[0]:
            raise InvalidArgumentError("coeffs and weights disagree on m")
        object.__setattr__(self, "coeffs", a)
        object.__setattr__(self, "weights", w)

    @property
    def d(self) -> int:
        return self.weights.shape[1] - 1

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    @property
    def particles(self) -> np.ndarray:
        """(m, d+2) array of particles (a_j, w_j, b_j)."""
        return np.column_stack([self.coeffs, self.weights])

    @classmethod
    def from_particles(cls, particles, activation: Activation) -> "TwoLayerNet":
        particles = np.asarray(particles, dtype=float)
        return cls(particles[:, 0], particles[:, 1:], activation)

    def as_potential(self) -> Potential:
        return Potential(FeatureSet(self.weights, self.activation), self.coeffs)

    def __call__(self, x) -> np.ndarray:
        return self.as_potential()(x)


def potential_to_dict(pot: Potential) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "d": pot.d,
        "m": pot.m,
        "seed": pot.features.seed,
        "activation": pot.features.activation.tag,
        "features": pot.features.weights.tolist(),
        "coeffs": pot.coeffs.tolist(),
    }


def potential_from_dict(doc: dict) -> Potential:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise InvalidArgumentError(f"unsupported schema_version {doc.get('schema_version')!r}")
    try:
        weights = np.asarray(doc["features"], dtype=float).reshape(int(doc["m"]), int(doc["d"]) + 1)
        feats = FeatureSet(weights, Activation.parse(doc["activation"]), doc.get("seed"))
        return Potential(feats, np.asarray(doc["coeffs"], dtype=float))
    except KeyError as exc:
        raise InvalidArgumentError(f"potential document missing field {exc.args[0]!r}") from None


def dumps_potential(pot: Potential) -> str:
    # json writes floats with repr(), the shortest string that round-trips exactly
    return json.dumps(potential_to_dict(pot))


def save_potential(pot: Potential, path) -> None:
    Path(path).write_text(dumps_potential(pot) + "\n")


def load_potential(path) -> Potential:
    return potential_from_dict(json.loads(Path(path).read_text()))
