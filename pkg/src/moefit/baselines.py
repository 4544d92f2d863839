"""Gradient EM and gradient descent baselines sharing the fit loop.

Gradient EM replaces each exact EM subproblem solve by a single gradient step
on that subproblem (responsibilities anchored at the current iterate), with
its own step size per block.  Gradient descent steps on the likelihood
objective directly.  With equal block step sizes the two updates coincide,
which is the computational content of the gradient identity between the
objective and the anchored surrogate.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import AllDiverged
from .models import DataSet, ModelKind, MoEParams
from .objective import grad_em_surrogate, grad_neg_log_lik, neg_log_lik

_ARMIJO_C = 1e-4
_MAX_HALVINGS = 60

DEFAULT_STEP_GRID = (1.0, 0.3, 0.1, 0.03)


@dataclass(frozen=True)
class StepSizes:
    """Step sizes for the gradient baselines.

    ``gamma1``/``gamma2`` drive the expert and gate blocks of gradient EM,
    ``gamma`` the joint gradient-descent step.  ``mode`` records how they
    were chosen and whether gradient descent backtracks.
    """

    gamma1: float = 0.1
    gamma2: float = 0.1
    gamma: float = 0.1
    mode: str = "fixed"  # "fixed" | "backtracking" | "grid-selected"

    def __post_init__(self):
        if min(self.gamma1, self.gamma2, self.gamma) <= 0:
            raise ValueError("step sizes must be positive")
        if self.mode not in ("fixed", "backtracking", "grid-selected"):
            raise ValueError(f"unknown step-size mode {self.mode!r}")


def gradient_em_step(
    data: DataSet, params: MoEParams, kind: ModelKind, steps: StepSizes
) -> MoEParams:
    """One gradient step on each EM subproblem, anchored at the iterate."""
    grad = grad_em_surrogate(data, params, params, kind)
    return MoEParams(
        params.gating - steps.gamma2 * grad.gating,
        params.experts - steps.gamma1 * grad.experts,
    )


def gd_step(
    data: DataSet, params: MoEParams, kind: ModelKind, steps: StepSizes
) -> MoEParams:
    """One gradient-descent step on the likelihood objective.

    In backtracking mode the step is halved until the Armijo condition
    holds, so the objective never increases.
    """
    grad = grad_neg_log_lik(data, params, kind)
    if steps.mode != "backtracking":
        return params - steps.gamma * grad
    sq_norm = grad.dot(grad)
    if sq_norm == 0.0:
        return params
    f0 = neg_log_lik(data, params, kind).value
    s = steps.gamma
    for _ in range(_MAX_HALVINGS):
        cand = params - s * grad
        if neg_log_lik(data, cand, kind).value <= f0 - _ARMIJO_C * s * sq_norm:
            return cand
        s *= 0.5
    return params - s * grad


def _probe_final_objective(data, init, kind, steps, method, probe_iters):
    cur = init
    for _ in range(probe_iters):
        if method == "gd":
            cur = gd_step(data, cur, kind, steps)
        else:
            cur = gradient_em_step(data, cur, kind, steps)
        if not np.all(np.isfinite(cur.stack())):
            return np.inf
    return neg_log_lik(data, cur, kind).value


def select_step_size(
    data: DataSet,
    init: MoEParams,
    kind: ModelKind,
    grid=DEFAULT_STEP_GRID,
    probe_iters: int = 10,
    method: str = "gd",
) -> StepSizes:
    """Pick the grid step size whose short probe run ends at the lowest objective.

    For gradient EM the two block step sizes are searched over the grid
    product.  Candidates with a non-finite final objective are discarded;
    if none survives, raises ``AllDiverged``.  Deterministic.
    """
    grid = tuple(grid)
    if not grid:
        raise ValueError("step-size grid must be non-empty")
    if method == "gd":
        candidates = [StepSizes(gamma=g, gamma1=g, gamma2=g) for g in grid]
    elif method == "gradient-em":
        candidates = [
            StepSizes(gamma1=g1, gamma2=g2, gamma=g1)
            for g1, g2 in itertools.product(grid, grid)
        ]
    else:
        raise ValueError(f"step-size selection not defined for method {method!r}")
    finals = [
        _probe_final_objective(data, init, kind, cand, method, probe_iters)
        for cand in candidates
    ]
    finals = np.array(finals)
    if not np.any(np.isfinite(finals)):
        raise AllDiverged("every grid step size produced a non-finite objective")
    best = candidates[int(np.nanargmin(np.where(np.isfinite(finals), finals, np.nan)))]
    return StepSizes(
        gamma1=best.gamma1, gamma2=best.gamma2, gamma=best.gamma, mode="grid-selected"
    )
