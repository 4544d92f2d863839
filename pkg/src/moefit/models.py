"""Model families, parameter containers, synthetic data, and posteriors.

Four model kinds are supported: general mixtures of k linear or logistic
experts with a softmax gate, and their symmetric 2-expert variants where the
two expert parameter vectors are negatives of each other and the latent label
lives in {+1, -1}.  Features are standard normal; linear experts add unit
Gaussian noise, logistic experts emit labels in {+1, -1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax

from .errors import (
    DimensionMismatch,
    InvalidTarget,
    NonFiniteInput,
    WrongKind,
)

LOG_2PI = math.log(2.0 * math.pi)

# Posterior weights are clamped away from exact zero so that log-space
# arithmetic never produces -inf.
RESP_FLOOR = 1e-300

_FAMILIES = ("linear", "logistic")


@dataclass(frozen=True)
class ModelKind:
    """Which expert family, whether the symmetric 2-expert variant, and k."""

    experts: str
    symmetric: bool
    n_experts: int

    def __post_init__(self):
        if self.experts not in _FAMILIES:
            raise WrongKind(f"unknown expert family {self.experts!r}")
        if self.symmetric and self.n_experts != 2:
            raise WrongKind("symmetric kinds fix the expert count at 2")
        if not self.symmetric and self.n_experts < 2:
            raise WrongKind("general kinds need at least 2 experts")

    # -- constructors -------------------------------------------------
    @staticmethod
    def sym_linear() -> "ModelKind":
        return ModelKind("linear", True, 2)

    @staticmethod
    def sym_logistic() -> "ModelKind":
        return ModelKind("logistic", True, 2)

    @staticmethod
    def linear(k: int) -> "ModelKind":
        return ModelKind("linear", False, int(k))

    @staticmethod
    def logistic(k: int) -> "ModelKind":
        return ModelKind("logistic", False, int(k))

    @staticmethod
    def parse(name: str) -> "ModelKind":
        """Parse "sym-linear", "sym-logistic", "linear-<k>" or "logistic-<k>"."""
        token = name.strip().lower().replace("_", "-")
        if token == "sym-linear":
            return ModelKind.sym_linear()
        if token == "sym-logistic":
            return ModelKind.sym_logistic()
        for family in _FAMILIES:
            if token == family:
                return ModelKind(family, False, 2)
            if token.startswith(family + "-"):
                try:
                    k = int(token[len(family) + 1:])
                except ValueError:
                    raise WrongKind(f"cannot parse expert count in {name!r}") from None
                return ModelKind(family, False, k)
        raise WrongKind(f"unknown model kind {name!r}")

    @property
    def name(self) -> str:
        if self.symmetric:
            return f"sym-{self.experts}"
        return f"{self.experts}-{self.n_experts}"

    @property
    def label_values(self) -> np.ndarray:
        """Latent label space: (+1, -1) symmetric, 0..k-1 general."""
        if self.symmetric:
            return np.array([1.0, -1.0])
        return np.arange(self.n_experts)

    # Coefficient on y inside the symmetric posterior logit:
    # P(z=+1 | x, y) = sigmoid(x.w + coeff * y * x.b).
    @property
    def posterior_y_coeff(self) -> float:
        if not self.symmetric:
            raise WrongKind("posterior logit coefficient is a symmetric-kind notion")
        return 2.0 if self.experts == "linear" else 1.0


@dataclass(frozen=True)
class MoEParams:
    """Gating and expert coefficients, the optimisation variable.

    Symmetric kinds store one d-vector per block; general kinds store d x k
    matrices with one column per expert.  Instances behave as immutable
    values and support +, -, and scalar *.
    """

    gating: np.ndarray
    experts: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gating, dtype=float)
        e = np.asarray(self.experts, dtype=float)
        if g.shape != e.shape:
            raise DimensionMismatch(
                f"gating shape {g.shape} != experts shape {e.shape}"
            )
        if g.ndim not in (1, 2):
            raise DimensionMismatch("parameter blocks must be 1-D or 2-D arrays")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(e))):
            raise NonFiniteInput("parameters contain non-finite entries")
        object.__setattr__(self, "gating", g)
        object.__setattr__(self, "experts", e)

    @property
    def d(self) -> int:
        return self.gating.shape[0]

    def check_kind(self, kind: ModelKind, d: int | None = None):
        if kind.symmetric and self.gating.ndim != 1:
            raise DimensionMismatch("symmetric kinds use vector parameter blocks")
        if not kind.symmetric:
            if self.gating.ndim != 2 or self.gating.shape[1] != kind.n_experts:
                raise DimensionMismatch(
                    f"general kind expects d x {kind.n_experts} blocks, "
                    f"got {self.gating.shape}"
                )
        if d is not None and self.d != d:
            raise DimensionMismatch(f"parameter dimension {self.d} != data dimension {d}")

    def stack(self) -> np.ndarray:
        """Flatten as [gating, experts]; the order used by every 2d-block matrix."""
        return np.concatenate([self.gating.ravel(), self.experts.ravel()])

    def unstack_like(self, vec: np.ndarray) -> "MoEParams":
        vec = np.asarray(vec, dtype=float)
        half = self.gating.size
        if vec.size != half + self.experts.size:
            raise DimensionMismatch("stacked vector has the wrong length")
        return MoEParams(
            vec[:half].reshape(self.gating.shape),
            vec[half:].reshape(self.experts.shape),
        )

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.gating**2) + np.sum(self.experts**2)))

    def __add__(self, other: "MoEParams") -> "MoEParams":
        return MoEParams(self.gating + other.gating, self.experts + other.experts)

    def __sub__(self, other: "MoEParams") -> "MoEParams":
        return MoEParams(self.gating - other.gating, self.experts - other.experts)

    def __mul__(self, scalar: float) -> "MoEParams":
        return MoEParams(self.gating * scalar, self.experts * scalar)

    __rmul__ = __mul__

    def __neg__(self) -> "MoEParams":
        return self * -1.0

    def dot(self, other: "MoEParams") -> float:
        return float(
            np.sum(self.gating * other.gating) + np.sum(self.experts * other.experts)
        )


@dataclass(frozen=True)
class DataSet:
    """Feature rows, targets, and optional generating information."""

    features: np.ndarray
    targets: np.ndarray
    latents: np.ndarray | None = None
    truth: MoEParams | None = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.targets, dtype=float)
        if X.ndim != 2 or X.shape[0] < 1:
            raise DimensionMismatch("features must be a non-empty n x d array")
        if y.shape != (X.shape[0],):
            raise DimensionMismatch("targets must be a length-n vector")
        if not np.all(np.isfinite(X)):
            raise NonFiniteInput("features contain non-finite entries")
        if not np.all(np.isfinite(y)):
            raise NonFiniteInput("targets contain non-finite entries")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)
        if self.latents is not None:
            object.__setattr__(self, "latents", np.asarray(self.latents))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def without_truth(self) -> "DataSet":
        return replace(self, latents=None, truth=None)


@dataclass(frozen=True)
class Responsibilities:
    """Per-sample posterior over experts; symmetric column order is (+1, -1)."""

    weights: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.weights, dtype=float)
        if W.ndim != 2:
            raise DimensionMismatch("responsibilities must be an n x k array")
        object.__setattr__(self, "weights", W)

    @property
    def positive(self) -> np.ndarray:
        """P(z = +1 | x, y) column for symmetric kinds."""
        return self.weights[:, 0]


def validate_dataset(data: DataSet, kind: ModelKind):
    """Check targets and latents against the label spaces of *kind*."""
    if kind.experts == "logistic" and not np.all(np.abs(data.targets) == 1.0):
        raise InvalidTarget("logistic targets must all be +1 or -1")
    if data.latents is not None:
        if kind.symmetric:
            ok = np.all(np.abs(np.asarray(data.latents, dtype=float)) == 1.0)
        else:
            z = np.asarray(data.latents)
            ok = np.all((z >= 0) & (z < kind.n_experts))
        if not ok:
            raise InvalidTarget("latents outside the label space of the model kind")


def _check_matrix_input(x: np.ndarray, d: int) -> tuple[np.ndarray, bool]:
    """Promote a single feature vector to a one-row matrix."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("feature input contains non-finite entries")
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != d:
        raise DimensionMismatch(f"expected feature dimension {d}, got shape {x.shape}")
    return X, single


def gating_probs(x: np.ndarray, gating: np.ndarray, kind: ModelKind) -> np.ndarray:
    """Gate distribution P(z | x) for one feature vector or a stack of rows.

    Symmetric kinds return (sigmoid(x.w), 1 - sigmoid(x.w)) ordered as
    (z=+1, z=-1); general kinds return the softmax of the k inner products.
    """
    gating = np.asarray(gating, dtype=float)
    if not np.all(np.isfinite(gating)):
        raise NonFiniteInput("gating parameters contain non-finite entries")
    X, single = _check_matrix_input(x, gating.shape[0])
    if kind.symmetric:
        if gating.ndim != 1:
            raise DimensionMismatch("symmetric gating must be a d-vector")
        p = expit(X @ gating)
        out = np.column_stack([p, expit(-(X @ gating))])
    else:
        if gating.ndim != 2 or gating.shape[1] != kind.n_experts:
            raise DimensionMismatch("general gating must be a d x k matrix")
        out = softmax(X @ gating, axis=1)
    return out[0] if single else out


def expert_loglik(y, x, expert_coef, kind: ModelKind):
    """Log density of the target under one expert.

    Linear experts: log N(y; x.b, 1).  Logistic experts: log sigmoid(y * x.b)
    with y in {+1, -1}.  For symmetric kinds pass the signed coefficient
    vector z * b of the expert in question.
    """
    expert_coef = np.asarray(expert_coef, dtype=float)
    X, single = _check_matrix_input(x, expert_coef.shape[0])
    y = np.asarray(y, dtype=float)
    mean = X @ expert_coef
    if kind.experts == "linear":
        out = -0.5 * (y - mean) ** 2 - 0.5 * LOG_2PI
    else:
        if not np.all(np.abs(y) == 1.0):
            raise InvalidTarget("logistic targets must be +1 or -1")
        out = log_expit(y * mean)
    return float(out[0]) if (single and out.ndim == 1 and out.size == 1) else out


def _rng(seed: int) -> np.random.Generator:
    """Counter-based generator so that seeds can be derived by XOR."""
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


def sample_dataset(
    kind: ModelKind, n: int, d: int, truth: MoEParams, seed: int
) -> DataSet:
    """Draw n samples from the generative model at the given true parameters.

    Features are i.i.d. standard normal, the expert label follows the gate,
    and the target follows the selected expert.  Bit-reproducible per seed.
    """
    if n < 1:
        raise DimensionMismatch("need at least one sample")
    truth.check_kind(kind, d)
    rng = _rng(seed)
    X = rng.standard_normal((n, d))
    probs = gating_probs(X, truth.gating, kind)
    u = rng.random(n)
    idx = np.sum(u[:, None] > np.cumsum(probs, axis=1), axis=1)
    idx = np.minimum(idx, kind.n_experts - 1)
    if kind.symmetric:
        signs = np.where(idx == 0, 1.0, -1.0)
        mean = signs * (X @ truth.experts)
        latents = signs
    else:
        mean = np.sum(X * truth.experts[:, idx].T, axis=1)
        latents = idx
    if kind.experts == "linear":
        y = mean + rng.standard_normal(n)
    else:
        y = np.where(rng.random(n) < expit(mean), 1.0, -1.0)
    return DataSet(X, y, latents=latents, truth=truth)


def _symmetric_posterior_logit(
    X: np.ndarray, y: np.ndarray, params: MoEParams, kind: ModelKind
) -> np.ndarray:
    """Logit of P(z=+1 | x, y), the symmetric-model closed form."""
    c = kind.posterior_y_coeff
    return X @ params.gating + c * y * (X @ params.experts)


def log_joint_matrix(data: DataSet, params: MoEParams, kind: ModelKind) -> np.ndarray:
    """n x k matrix of log[p(y | x, z=j) P(z=j | x)] for all experts j."""
    X, y = data.features, data.targets
    if kind.symmetric:
        g = X @ params.gating
        m = X @ params.experts
        log_gate = np.column_stack([log_expit(g), log_expit(-g)])
        if kind.experts == "linear":
            log_exp = np.column_stack(
                [-0.5 * (y - m) ** 2, -0.5 * (y + m) ** 2]
            ) - 0.5 * LOG_2PI
        else:
            log_exp = np.column_stack([log_expit(y * m), log_expit(-y * m)])
        return log_gate + log_exp
    scores = X @ params.gating
    log_gate = scores - logsumexp(scores, axis=1, keepdims=True)
    means = X @ params.experts
    if kind.experts == "linear":
        log_exp = -0.5 * (y[:, None] - means) ** 2 - 0.5 * LOG_2PI
    else:
        log_exp = log_expit(y[:, None] * means)
    return log_gate + log_exp


def responsibilities(
    data: DataSet, params: MoEParams, kind: ModelKind
) -> Responsibilities:
    """Posterior P(z | x, y) per sample, evaluated in log space.

    Symmetric kinds use the closed-form logit x.w + c*y*x.b (c = 2 for linear
    experts, 1 for logistic); general kinds normalise the joint by Bayes rule.
    """
    params.check_kind(kind, data.d)
    validate_dataset(data, kind)
    if kind.symmetric:
        s = _symmetric_posterior_logit(data.features, data.targets, params, kind)
        W = np.column_stack([expit(s), expit(-s)])
    else:
        LJ = log_joint_matrix(data, params, kind)
        W = np.exp(LJ - logsumexp(LJ, axis=1, keepdims=True))
    return Responsibilities(np.clip(W, RESP_FLOOR, 1.0))
