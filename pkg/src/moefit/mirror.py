"""Mirror maps for the symmetric kinds and the EM = mirror-descent check.

For the symmetric two-expert models there is a strictly convex map A over the
empirical feature measure whose Bregman divergence equals the KL divergence
between complete-data distributions, and one EM iteration equals one unit
step of mirror descent on the likelihood objective.  This module evaluates A
and its derivatives, both divergence routes, and an independent mirror
descent step solved through the dual optimality condition
``grad A(next) = grad A(current) - grad L(current)`` so the two code paths
can be compared against each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .em import SolverOptions
from .errors import IterationLimit, SingularSystem, WrongKind
from .models import DataSet, ModelKind, MoEParams
from .objective import grad_neg_log_lik, neg_log_lik

_ARMIJO_C = 1e-4
_MAX_HALVINGS = 60


@dataclass(frozen=True)
class MirrorMapEval:
    """Value, gradient, and Hessian of the mirror map at one point.

    The Hessian is a 2d x 2d block-diagonal matrix ordered (gating block,
    expert block); it is symmetric positive definite on the feasible ball.
    """

    value: float
    gradient: MoEParams
    hessian: np.ndarray


@dataclass(frozen=True)
class EquivalenceReport:
    """Outcome of running the EM step and the mirror-descent step side by side."""

    theta_em: MoEParams
    theta_md: MoEParams
    abs_gap: float
    rel_gap: float
    inner_residuals: dict
    passed: bool


def _require_symmetric(kind: ModelKind):
    if not kind.symmetric:
        raise WrongKind("mirror maps are defined for the symmetric kinds only")


def _log1pexp(u):
    return np.logaddexp(0.0, u)


def mirror_map_eval(data: DataSet, params: MoEParams, kind: ModelKind) -> MirrorMapEval:
    """Evaluate the mirror map under the empirical feature measure.

    Linear experts: mean of (x.b)^2 / 2 plus the gate softplus; logistic
    experts: softplus in both blocks.
    """
    _require_symmetric(kind)
    params.check_kind(kind, data.d)
    X, n = data.features, data.n
    g = X @ params.gating
    m = X @ params.experts
    gate_value = float(np.mean(_log1pexp(g)))
    gate_grad = X.T @ expit(g) / n
    gate_hess = (X * (expit(g) * expit(-g))[:, None]).T @ X / n
    if kind.experts == "linear":
        expert_value = float(np.mean(m**2) / 2.0)
        expert_grad = X.T @ m / n
        expert_hess = X.T @ X / n
    else:
        expert_value = float(np.mean(_log1pexp(m)))
        expert_grad = X.T @ expit(m) / n
        expert_hess = (X * (expit(m) * expit(-m))[:, None]).T @ X / n
    d = data.d
    hess = np.zeros((2 * d, 2 * d))
    hess[:d, :d] = gate_hess
    hess[d:, d:] = expert_hess
    return MirrorMapEval(
        value=gate_value + expert_value,
        gradient=MoEParams(gate_grad, expert_grad),
        hessian=hess,
    )


def bregman(data: DataSet, phi: MoEParams, theta: MoEParams, kind: ModelKind) -> float:
    """Bregman divergence D_A(phi, theta) of the mirror map.

    Nonnegative, zero exactly at phi == theta; equals the complete-data KL
    divergence with the distribution at *theta* as the reference measure.
    """
    _require_symmetric(kind)
    at_theta = mirror_map_eval(data, theta, kind)
    at_phi = mirror_map_eval(data, phi, kind)
    return at_phi.value - at_theta.value - at_theta.gradient.dot(phi - theta)


def _bernoulli_kl_from_logits(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """KL between Bernoulli laws given by logits, per sample, stably."""
    return expit(a) * (log_expit(a) - log_expit(b)) + expit(-a) * (
        log_expit(-a) - log_expit(-b)
    )


def complete_data_kl(
    data: DataSet, theta: MoEParams, phi: MoEParams, kind: ModelKind
) -> float:
    """KL between the complete-data laws at *theta* and *phi*, empirically.

    Per feature row: a Bernoulli KL between gate laws, plus the expert term:
    half squared mean shift for linear experts (the latent sign cancels) or
    another Bernoulli KL for logistic experts.
    """
    _require_symmetric(kind)
    theta.check_kind(kind, data.d)
    phi.check_kind(kind, data.d)
    X = data.features
    gate_kl = _bernoulli_kl_from_logits(X @ theta.gating, X @ phi.gating)
    m_theta = X @ theta.experts
    m_phi = X @ phi.experts
    if kind.experts == "linear":
        expert_kl = 0.5 * (m_theta - m_phi) ** 2
    else:
        expert_kl = _bernoulli_kl_from_logits(m_theta, m_phi)
    return float(np.mean(gate_kl + expert_kl))


def _dual_sigmoid_newton(X, target, init, opts: SolverOptions):
    """Solve mean_i sigmoid(x_i.u) x_i / n = target for u.

    This inverts the gradient of the softplus block of the mirror map by
    minimising the strictly convex dual objective; damped Newton with
    Armijo backtracking.
    """
    n = X.shape[0]
    u = np.array(init, dtype=float)

    def value(uv):
        return float(np.mean(_log1pexp(X @ uv)) - target @ uv)

    f = value(u)
    for _ in range(opts.inner_max_iter):
        act = X @ u
        grad = X.T @ expit(act) / n - target
        if float(np.max(np.abs(grad))) <= opts.inner_tol:
            return u
        curv = expit(act) * expit(-act) / n
        H = (X * curv[:, None]).T @ X
        H[np.diag_indices_from(H)] += opts.ridge
        try:
            step = np.linalg.solve(H, -grad)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem("mirror-step Newton system is singular") from exc
        slope = float(grad @ step)
        s = 1.0
        for _ in range(_MAX_HALVINGS):
            if value(u + s * step) <= f + _ARMIJO_C * s * slope:
                break
            s *= 0.5
        u = u + s * step
        f = value(u)
    grad = X.T @ expit(X @ u) / n - target
    gnorm = float(np.max(np.abs(grad)))
    if gnorm > opts.inner_tol:
        raise IterationLimit(
            f"mirror-step solve stalled at gradient norm {gnorm:.3e}",
            best=u,
            grad_norm=gnorm,
        )
    return u


def _md_step_with_residuals(data, params, kind, opts):
    _require_symmetric(kind)
    opts = opts or SolverOptions()
    params.check_kind(kind, data.d)
    X, n = data.features, data.n
    grad_obj = grad_neg_log_lik(data, params, kind)
    at_cur = mirror_map_eval(data, params, kind)
    target_gate = at_cur.gradient.gating - grad_obj.gating
    target_expert = at_cur.gradient.experts - grad_obj.experts
    new_gate = _dual_sigmoid_newton(X, target_gate, params.gating, opts)
    if kind.experts == "linear":
        gram = X.T @ X / n
        try:
            L = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem("feature Gram matrix is singular") from exc
        new_expert = np.linalg.solve(L.T, np.linalg.solve(L, target_expert))
    else:
        new_expert = _dual_sigmoid_newton(X, target_expert, params.experts, opts)
    new_params = MoEParams(new_gate, new_expert)
    at_new = mirror_map_eval(data, new_params, kind)
    residuals = {
        "gating": float(np.max(np.abs(at_new.gradient.gating - target_gate))),
        "experts": float(np.max(np.abs(at_new.gradient.experts - target_expert))),
    }
    return new_params, residuals


def md_step(
    data: DataSet,
    params: MoEParams,
    kind: ModelKind,
    opts: SolverOptions | None = None,
) -> MoEParams:
    """One unit-step mirror-descent update on the likelihood objective.

    Solves the first-order condition grad A(next) = grad A(cur) - grad L(cur)
    directly: a single linear solve for the linear expert block and a
    strictly convex Newton solve per softplus block.  Shares no code with
    the EM subproblem solvers, so it can serve as an independent oracle.
    """
    new_params, _ = _md_step_with_residuals(data, params, kind, opts)
    return new_params


def verify_em_equals_md(
    data: DataSet,
    params: MoEParams,
    kind: ModelKind,
    tol: float = 1e-6,
    opts: SolverOptions | None = None,
) -> EquivalenceReport:
    """Run the EM step and the mirror-descent step and report their gap."""
    from .em import em_step

    opts = opts or SolverOptions()
    theta_md, residuals = _md_step_with_residuals(data, params, kind, opts)
    theta_em = em_step(data, params, kind, opts)
    gap_vec = theta_em.stack() - theta_md.stack()
    abs_gap = float(np.linalg.norm(gap_vec))
    rel_gap = abs_gap / max(1.0, float(np.linalg.norm(theta_em.stack())))
    return EquivalenceReport(
        theta_em=theta_em,
        theta_md=theta_md,
        abs_gap=abs_gap,
        rel_gap=rel_gap,
        inner_residuals=residuals,
        passed=bool(rel_gap <= tol),
    )


def random_params_in_ball(
    kind: ModelKind, d: int, radius: float, rng: np.random.Generator
) -> MoEParams:
    """Uniform direction with radius uniform on [0, radius]; symmetric kinds."""
    vec = rng.standard_normal(2 * d)
    vec *= rng.uniform(0.0, radius) / np.linalg.norm(vec)
    return MoEParams(vec[:d], vec[d:])


def relative_smoothness_probe(
    data: DataSet,
    n_pairs: int,
    kind: ModelKind,
    seed: int,
    radius: float = 8.0,
    opts: SolverOptions | None = None,
) -> float:
    """Worst violation of the unit relative-smoothness bound on random pairs.

    Samples pairs in the ball of the given radius and returns the largest
    value of L(theta) - L(phi) - <grad L(phi), theta - phi> - D_A(theta, phi),
    which the theory bounds by zero.
    """
    _require_symmetric(kind)
    rng = np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))
    worst = -np.inf
    for _ in range(n_pairs):
        theta = random_params_in_ball(kind, data.d, radius, rng)
        phi = random_params_in_ball(kind, data.d, radius, rng)
        lin = neg_log_lik(data, phi, kind).value + grad_neg_log_lik(
            data, phi, kind
        ).dot(theta - phi)
        violation = (
            neg_log_lik(data, theta, kind).value - lin - bregman(data, theta, phi, kind)
        )
        worst = max(worst, violation)
    return float(worst)
