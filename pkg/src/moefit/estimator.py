"""Scikit-learn style estimator facade over the functional fitting core."""

from __future__ import annotations

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator

from .baselines import DEFAULT_STEP_GRID, StepSizes, select_step_size
from .em import SolverOptions, fit
from .errors import DimensionMismatch, InvalidTarget, NonFiniteInput, WrongKind
from .models import DataSet, ModelKind, MoEParams, gating_probs


def check_features(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1:
        raise DimensionMismatch("X must be a non-empty 2-D array")
    if not np.all(np.isfinite(X)):
        raise NonFiniteInput("X contains non-finite entries")
    return X


def check_targets(y, n: int, kind: ModelKind) -> np.ndarray:
    y = np.asarray(y, dtype=float).ravel()
    if y.shape != (n,):
        raise DimensionMismatch("y must be a vector matching the rows of X")
    if not np.all(np.isfinite(y)):
        raise NonFiniteInput("y contains non-finite entries")
    if kind.experts == "logistic" and not np.all(np.abs(y) == 1.0):
        raise InvalidTarget("logistic targets must be +1 or -1")
    return y


class MixtureOfExperts(BaseEstimator):
    """Softmax-gated mixture of linear or logistic experts.

    Fits by full-batch EM (default), gradient EM, or gradient descent on the
    negative log-likelihood.  Linear-expert kinds behave like a regressor
    (``predict`` returns the mixture mean), logistic kinds like a binary
    classifier over {-1, +1}.

    Parameters
    ----------
    kind : str
        "sym-linear", "sym-logistic", "linear-<k>", or "logistic-<k>".
    method : str
        "em", "gradient-em", or "gd".
    n_iter : int
        Number of outer iterations.
    init_norm : float
        Norm of the random initial parameter blocks.
    step_mode : str
        For gradient methods: "grid" selects step sizes on a probe grid,
        "fixed" uses ``gamma`` for every block, "backtracking" adds an
        Armijo line search to gradient descent.
    """

    def __init__(
        self,
        kind="sym-linear",
        method="em",
        n_iter=50,
        init_norm=1.0,
        random_state=0,
        inner_tol=1e-10,
        inner_max_iter=100,
        ridge=1e-8,
        feasibility_radius=1e3,
        step_mode="grid",
        gamma=0.1,
        step_grid=DEFAULT_STEP_GRID,
        probe_iters=10,
    ):
        self.kind = kind
        self.method = method
        self.n_iter = n_iter
        self.init_norm = init_norm
        self.random_state = random_state
        self.inner_tol = inner_tol
        self.inner_max_iter = inner_max_iter
        self.ridge = ridge
        self.feasibility_radius = feasibility_radius
        self.step_mode = step_mode
        self.gamma = gamma
        self.step_grid = step_grid
        self.probe_iters = probe_iters

    # -- fitting -------------------------------------------------------
    def _options(self) -> SolverOptions:
        return SolverOptions(
            inner_tol=self.inner_tol,
            inner_max_iter=self.inner_max_iter,
            ridge=self.ridge,
            feasibility_radius=self.feasibility_radius,
        )

    def _initial_params(self, kind: ModelKind, d: int) -> MoEParams:
        rng = np.random.Generator(
            np.random.Philox(int(self.random_state) & (2**64 - 1))
        )
        shape = (d,) if kind.symmetric else (d, kind.n_experts)
        gate = rng.standard_normal(shape)
        gate *= self.init_norm / np.linalg.norm(gate)
        expert = rng.standard_normal(shape)
        expert *= self.init_norm / np.linalg.norm(expert)
        return MoEParams(gate, expert)

    def fit(self, X, y):
        kind = ModelKind.parse(self.kind)
        X = check_features(X)
        y = check_targets(y, X.shape[0], kind)
        data = DataSet(X, y)
        start = self._initial_params(kind, X.shape[1])
        steps = None
        if self.method in ("gd", "gradient-em"):
            if self.step_mode == "grid":
                steps = select_step_size(
                    data,
                    start,
                    kind,
                    grid=self.step_grid,
                    probe_iters=self.probe_iters,
                    method=self.method,
                )
            else:
                steps = StepSizes(
                    gamma=self.gamma,
                    gamma1=self.gamma,
                    gamma2=self.gamma,
                    mode=self.step_mode,
                )
        trace = fit(
            data,
            start,
            kind,
            method=self.method,
            n_iter=self.n_iter,
            opts=self._options(),
            steps=steps,
        )
        self.kind_ = kind
        self.params_ = trace.final
        self.trace_ = trace
        self.n_features_in_ = X.shape[1]
        if kind.experts == "logistic":
            self.classes_ = np.array([-1.0, 1.0])
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise RuntimeError("estimator is not fitted")

    # -- prediction ------------------------------------------------------
    def predict_expert_proba(self, X) -> np.ndarray:
        """Gate distribution P(z | x) per row."""
        self._check_fitted()
        X = check_features(X)
        return gating_probs(X, self.params_.gating, self.kind_)

    def _positive_proba(self, X) -> np.ndarray:
        gate = self.predict_expert_proba(X)
        kind = self.kind_
        if kind.symmetric:
            m = X @ self.params_.experts
            return gate[:, 0] * expit(m) + gate[:, 1] * expit(-m)
        means = X @ self.params_.experts
        return np.sum(gate * expit(means), axis=1)

    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities for logistic kinds, columns (-1, +1)."""
        self._check_fitted()
        if self.kind_.experts != "logistic":
            raise WrongKind("class probabilities need logistic experts")
        X = check_features(X)
        pos = self._positive_proba(X)
        return np.column_stack([1.0 - pos, pos])

    def predict(self, X) -> np.ndarray:
        """Mixture mean for linear kinds, class label in {-1, +1} otherwise."""
        self._check_fitted()
        X = check_features(X)
        kind = self.kind_
        if kind.experts == "linear":
            gate = gating_probs(X, self.params_.gating, kind)
            if kind.symmetric:
                return (gate[:, 0] - gate[:, 1]) * (X @ self.params_.experts)
            return np.sum(gate * (X @ self.params_.experts), axis=1)
        return np.where(self._positive_proba(X) >= 0.5, 1.0, -1.0)

    def score(self, X, y) -> float:
        """Mean log-likelihood of (X, y); greater is better."""
        self._check_fitted()
        from .objective import neg_log_lik

        X = check_features(X)
        y = check_targets(y, X.shape[0], self.kind_)
        return -neg_log_lik(DataSet(X, y), self.params_, self.kind_).value
