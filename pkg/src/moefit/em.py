"""EM for mixtures of experts: exact M-step via two convex subproblems.

Each iteration computes posterior responsibilities at the current iterate and
then minimises the two separable pieces of the surrogate: a soft-label gate
regression and, per expert family, either weighted least squares (linear) or
a soft-label logistic regression (logistic).  Inner problems are solved by
damped Newton with Armijo backtracking to a tight gradient tolerance so that
descent and the mirror-descent equivalence hold to near machine precision.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .errors import DimensionMismatch, IterationLimit, MoefitError, SingularSystem
from .models import DataSet, ModelKind, MoEParams, Responsibilities, responsibilities
from .objective import neg_log_lik

_ARMIJO_C = 1e-4
_MAX_HALVINGS = 60


@dataclass(frozen=True)
class SolverOptions:
    """Tolerances shared by the inner convex solvers."""

    inner_tol: float = 1e-10
    inner_max_iter: int = 100
    ridge: float = 1e-8
    feasibility_radius: float = 1e3
    # Use the population moment formula for the symmetric linear expert
    # update (valid when E[xx'] is the identity) instead of the exact
    # empirical solve; kept for comparison runs.
    moment_expert_update: bool = False

    def __post_init__(self):
        if self.inner_tol <= 0 or self.inner_max_iter < 1 or self.ridge < 0:
            raise ValueError("invalid solver options")


@dataclass
class FitTrace:
    """Per-iteration record of a fit run."""

    method: str
    thetas: list
    objective: np.ndarray
    bregman_steps: np.ndarray | None = None
    param_errors: np.ndarray | None = None
    wall_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    status: str = "ok"
    message: str = ""

    @property
    def final(self) -> MoEParams:
        return self.thetas[-1]


def _check_resp(resp: Responsibilities, n: int, k: int):
    W = resp.weights
    if W.shape != (n, k):
        raise DimensionMismatch(f"responsibilities shape {W.shape} != ({n}, {k})")
    if np.max(np.abs(W.sum(axis=1) - 1.0)) > 1e-9:
        raise ValueError("responsibility rows must sum to 1")


def _log1pexp(u: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, u)


def _soft_logistic_newton(X, targets, weights, init, opts: SolverOptions):
    """Minimise mean_i weights_i * [log(1 + e^{x_i.b}) - targets_i * x_i.b].

    Strictly convex for positive weights and targets in [0, 1]; damped Newton
    with Armijo backtracking, stopping on the sup norm of the gradient.
    """
    n = X.shape[0]
    b = np.array(init, dtype=float)
    wt = weights / n

    def value(bv):
        u = X @ bv
        return float(np.sum(wt * (_log1pexp(u) - targets * u)))

    f = value(b)
    for _ in range(opts.inner_max_iter):
        u = X @ b
        resid = wt * (expit(u) - targets)
        grad = X.T @ resid
        gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
        if gnorm <= opts.inner_tol:
            return b
        curv = wt * expit(u) * expit(-u)
        H = (X * curv[:, None]).T @ X
        H[np.diag_indices_from(H)] += opts.ridge
        try:
            step = np.linalg.solve(H, -grad)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem("gate/expert Newton system is singular") from exc
        slope = float(grad @ step)
        s = 1.0
        for _ in range(_MAX_HALVINGS):
            cand = b + s * step
            f_cand = value(cand)
            if f_cand <= f + _ARMIJO_C * s * slope:
                break
            s *= 0.5
        b = b + s * step
        f = value(b)
    u = X @ b
    gnorm = float(np.max(np.abs(X.T @ (wt * (expit(u) - targets)))))
    if gnorm > opts.inner_tol:
        raise IterationLimit(
            f"soft logistic solve stalled at gradient norm {gnorm:.3e}",
            best=b,
            grad_norm=gnorm,
        )
    return b


def _softmax_newton(X, R, init, opts: SolverOptions):
    """Minimise the soft-target softmax cross entropy over a d x k gate matrix.

    The objective is shift invariant across columns, hence convex but not
    strictly; the ridge makes the Newton system solvable and any minimiser
    yields the same gate distribution.
    """
    n, d = X.shape
    k = R.shape[1]
    W = np.array(init, dtype=float)

    def value(Wv):
        scores = X @ Wv
        return float(
            np.mean(logsumexp(scores, axis=1)) - np.sum(R * scores) / n
        )

    f = value(W)
    for _ in range(opts.inner_max_iter):
        P = softmax(X @ W, axis=1)
        G = X.T @ (P - R) / n
        gnorm = float(np.max(np.abs(G)))
        if gnorm <= opts.inner_tol:
            return W
        H = np.zeros((d * k, d * k))
        for j in range(k):
            for l in range(j, k):
                coef = P[:, j] * ((1.0 if j == l else 0.0) - P[:, l])
                block = (X * coef[:, None]).T @ X / n
                H[j * d:(j + 1) * d, l * d:(l + 1) * d] = block
                if l != j:
                    H[l * d:(l + 1) * d, j * d:(j + 1) * d] = block
        H[np.diag_indices_from(H)] += opts.ridge
        g = G.T.ravel()
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem("softmax Newton system is singular") from exc
        slope = float(g @ step)
        step_mat = step.reshape(k, d).T
        s = 1.0
        for _ in range(_MAX_HALVINGS):
            cand = W + s * step_mat
            if value(cand) <= f + _ARMIJO_C * s * slope:
                break
            s *= 0.5
        W = W + s * step_mat
        f = value(W)
    P = softmax(X @ W, axis=1)
    gnorm = float(np.max(np.abs(X.T @ (P - R) / n)))
    if gnorm > opts.inner_tol:
        raise IterationLimit(
            f"softmax gate solve stalled at gradient norm {gnorm:.3e}",
            best=W,
            grad_norm=gnorm,
        )
    return W


def solve_gating_subproblem(
    data: DataSet,
    resp: Responsibilities,
    kind: ModelKind,
    init: np.ndarray,
    opts: SolverOptions | None = None,
) -> np.ndarray:
    """M-step for the gate: fit the gate to the soft expert assignments."""
    opts = opts or SolverOptions()
    _check_resp(resp, data.n, kind.n_experts)
    X = data.features
    if kind.symmetric:
        ones = np.ones(data.n)
        return _soft_logistic_newton(X, resp.positive, ones, init, opts)
    return _softmax_newton(X, resp.weights, init, opts)


def solve_expert_subproblem(
    data: DataSet,
    resp: Responsibilities,
    kind: ModelKind,
    init: np.ndarray,
    opts: SolverOptions | None = None,
) -> np.ndarray:
    """M-step for the experts under fixed responsibilities.

    Symmetric linear: one exact ridge-free solve of the empirical normal
    equations (the Gram matrix is regularised only when n < d).  General
    linear: per-expert weighted least squares with ridge.  Logistic kinds:
    per-expert soft-label logistic regression.
    """
    opts = opts or SolverOptions()
    _check_resp(resp, data.n, kind.n_experts)
    X, y, n = data.features, data.targets, data.n
    if kind.symmetric:
        r = resp.positive
        if kind.experts == "linear":
            signed_mean = (2.0 * r - 1.0) * y
            if opts.moment_expert_update:
                return X.T @ signed_mean / n
            gram = X.T @ X / n
            if n < data.d:
                gram = gram + opts.ridge * np.eye(data.d)
            rhs = X.T @ signed_mean / n
            return _solve_spd(gram, rhs)
        soft_target = 0.5 * (1.0 + y * (2.0 * r - 1.0))
        ones = np.ones(n)
        return _soft_logistic_newton(X, soft_target, ones, init, opts)
    R = resp.weights
    k = kind.n_experts
    out = np.empty((data.d, k))
    if kind.experts == "linear":
        eye = np.eye(data.d)
        for j in range(k):
            gram = (X * R[:, j][:, None]).T @ X / n + opts.ridge * eye
            rhs = X.T @ (R[:, j] * y) / n
            out[:, j] = _solve_spd(gram, rhs)
        return out
    target = 0.5 * (y + 1.0)
    for j in range(k):
        out[:, j] = _soft_logistic_newton(X, target, R[:, j], init[:, j], opts)
    return out


def _solve_spd(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem("Gram matrix is numerically singular") from exc
    z = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, z)


def em_step(
    data: DataSet,
    params: MoEParams,
    kind: ModelKind,
    opts: SolverOptions | None = None,
) -> MoEParams:
    """One full EM iteration: posteriors, then both exact subproblem solves."""
    opts = opts or SolverOptions()
    params.check_kind(kind, data.d)
    resp = responsibilities(data, params, kind)
    gating = solve_gating_subproblem(data, resp, kind, params.gating, opts)
    experts = solve_expert_subproblem(data, resp, kind, params.experts, opts)
    return MoEParams(gating, experts)


def _make_step_fn(data, kind, method, opts, steps):
    if method == "em":
        return lambda cur: em_step(data, cur, kind, opts)
    from .baselines import gd_step, gradient_em_step

    if steps is None:
        raise ValueError(f"method {method!r} needs step sizes")
    if method == "gradient-em":
        return lambda cur: gradient_em_step(data, cur, kind, steps)
    if method == "gd":
        return lambda cur: gd_step(data, cur, kind, steps)
    raise ValueError(f"unknown method {method!r}")


def fit(
    data: DataSet,
    init: MoEParams,
    kind: ModelKind,
    method: str = "em",
    n_iter: int = 50,
    opts: SolverOptions | None = None,
    steps=None,
) -> FitTrace:
    """Run ``n_iter`` iterations of EM, gradient EM, or gradient descent.

    Records every iterate, the objective path, per-step Bregman divergences
    for symmetric kinds, and wall times.  On a solver failure the trace is
    truncated and flagged; iterates leaving the feasibility ball are rejected
    and flagged rather than projected.
    """
    if n_iter < 1:
        raise ValueError("need at least one iteration")
    opts = opts or SolverOptions()
    init.check_kind(kind, data.d)
    step_fn = _make_step_fn(data, kind, method, opts, steps)

    record_bregman = kind.symmetric
    if record_bregman:
        from .mirror import bregman

    thetas = [init]
    objective = [neg_log_lik(data, init, kind).value]
    bregs: list[float] = []
    walls: list[float] = []
    status, message = "ok", ""
    cur = init
    for _ in range(n_iter):
        t0 = time.perf_counter()
        try:
            nxt = step_fn(cur)
        except MoefitError as exc:
            status, message = "solver-failure", str(exc)
            break
        if nxt.norm() > opts.feasibility_radius:
            status, message = "infeasible", "iterate left the feasibility ball"
            break
        walls.append(time.perf_counter() - t0)
        if record_bregman:
            bregs.append(bregman(data, cur, nxt, kind))
        thetas.append(nxt)
        objective.append(neg_log_lik(data, nxt, kind).value)
        cur = nxt
    return FitTrace(
        method=method,
        thetas=thetas,
        objective=np.array(objective),
        bregman_steps=np.array(bregs) if record_bregman else None,
        wall_times=np.array(walls),
        status=status,
        message=message,
    )
