"""Fisher information, the missing-information matrix, and rate certificates.

The complete-data Fisher matrix equals the mirror-map Hessian; its population
blocks have closed eigenstructure after rotating the parameter onto one axis,
with the two distinct eigenvalues evaluated by 1-D adaptive quadrature.  The
missing-information matrix (inverse complete times missing Fisher) certifies
an EM linear rate when its largest eigenvalue stays below one.  Population
missing-Fisher evaluation sums the binary target exactly and reduces the
feature integral to the span of the two parameter vectors (logistic experts);
the linear-expert population matrix mixes a continuous target into the
quadratic form and is estimated by Monte Carlo with reported standard errors.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np
from scipy.integrate import quad, quad_vec
from scipy.special import expit

from .errors import IllConditioned, PreconditionViolated, WrongDimension, WrongKind
from .mirror import mirror_map_eval
from .models import DataSet, ModelKind, MoEParams, sample_dataset

_COND_LIMIT = 1e12
_EIG_FLOOR = 1e-12
_TAIL = 9.0  # standard normal quantile beyond which mass is negligible


def _sigmoid_deriv(u):
    return expit(u) * expit(-u)


@dataclass(frozen=True)
class FisherPair:
    """Complete-data and missing-information Fisher matrices at one point."""

    complete: np.ndarray
    missing: np.ndarray
    mode: str


@dataclass(frozen=True)
class MimReport:
    """Spectrum report of the missing-information matrix.

    ``mim`` is the symmetric whitened form C^{-1/2} M C^{-1/2} of the
    information ratio, which shares its spectrum with the plain product
    C^{-1} M; ``product_asymmetry`` records how asymmetric the plain product
    itself is.
    """

    mim: np.ndarray
    eigenvalues: np.ndarray
    lambda_max: float
    alpha_certificate: float | None
    asymmetry: float
    product_asymmetry: float
    mode: str


@dataclass(frozen=True)
class EigScalingRow:
    norm: float
    lam1: float
    lam2: float
    bound1: float
    bound2: float
    compensated1: float
    compensated2: float

    @property
    def within_bounds(self) -> bool:
        return bool(
            0.0 < self.lam1 <= self.bound1 and 0.0 < self.lam2 <= self.bound2
        )


@dataclass(frozen=True)
class EigScalingTable:
    rows: tuple
    band_ratio1: float
    band_ratio2: float
    passed: bool


@dataclass(frozen=True)
class ScalarBoundCheck:
    lhs: float
    rhs: float
    stderr: float
    passed: bool


# ---------------------------------------------------------------------------
# population sigmoid-block eigenvalues
# ---------------------------------------------------------------------------

def sigmoid_block_eigs(norm: float) -> tuple[float, float]:
    """Eigenvalues of E[x x' sigmoid'(x.u)] for standard normal x, |u| = norm.

    Rotating u onto the first axis leaves two distinct values: lam1 along u
    and lam2 on the orthogonal complement.  Evaluated by adaptive quadrature;
    a substitution keeps the integrand well scaled for large norms.
    """
    norm = float(norm)
    if norm < 0:
        raise ValueError("norm must be nonnegative")
    if norm == 0.0:
        return 0.25, 0.25

    def phi(t):
        return np.exp(-0.5 * t * t) / sqrt(2.0 * np.pi)

    if norm <= 1.0:
        lam1 = 2.0 * quad(
            lambda t: t * t * _sigmoid_deriv(t * norm) * phi(t),
            0.0, _TAIL, epsabs=1e-15, epsrel=1e-13,
        )[0]
        lam2 = 2.0 * quad(
            lambda t: _sigmoid_deriv(t * norm) * phi(t),
            0.0, _TAIL, epsabs=1e-15, epsrel=1e-13,
        )[0]
        return lam1, lam2
    # substitute s = t * norm so the sigmoid factor has unit scale
    s_max = max(60.0, _TAIL * norm)
    lam1 = (2.0 / norm**3) * quad(
        lambda s: s * s * _sigmoid_deriv(s) * phi(s / norm),
        0.0, s_max, epsabs=1e-16, epsrel=1e-13, limit=200,
    )[0]
    lam2 = (2.0 / norm) * quad(
        lambda s: _sigmoid_deriv(s) * phi(s / norm),
        0.0, s_max, epsabs=1e-16, epsrel=1e-13, limit=200,
    )[0]
    return lam1, lam2


def sigmoid_moment_matrix(u: np.ndarray) -> np.ndarray:
    """Population matrix E[x x' sigmoid'(x.u)] as lam2 I + (lam1-lam2) uu'/|u|^2."""
    u = np.asarray(u, dtype=float)
    d = u.shape[0]
    nrm = float(np.linalg.norm(u))
    if nrm == 0.0:
        return 0.25 * np.eye(d)
    lam1, lam2 = sigmoid_block_eigs(nrm)
    direction = u / nrm
    return lam2 * np.eye(d) + (lam1 - lam2) * np.outer(direction, direction)


# ---------------------------------------------------------------------------
# complete-data Fisher
# ---------------------------------------------------------------------------

def fisher_complete(
    theta: MoEParams,
    kind: ModelKind,
    mode: str = "population",
    data: DataSet | None = None,
) -> np.ndarray:
    """Complete-data Fisher matrix, block diagonal over (gating, experts).

    Empirical mode returns the mirror-map Hessian on the given data (same
    code path); population mode evaluates the Gaussian-feature expectation.
    """
    if not kind.symmetric:
        raise WrongKind("Fisher diagnostics are defined for symmetric kinds")
    if mode == "empirical":
        if data is None:
            raise ValueError("empirical mode needs a dataset")
        return mirror_map_eval(data, theta, kind).hessian
    if mode != "population":
        raise ValueError(f"unknown mode {mode!r}")
    d = theta.d
    out = np.zeros((2 * d, 2 * d))
    out[:d, :d] = sigmoid_moment_matrix(theta.gating)
    if kind.experts == "linear":
        out[d:, d:] = np.eye(d)
    else:
        out[d:, d:] = sigmoid_moment_matrix(theta.experts)
    return out


# ---------------------------------------------------------------------------
# missing-information Fisher
# ---------------------------------------------------------------------------

def _span_basis(w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Orthonormal basis (d x r) of span{w, b}, r in {0, 1, 2}."""
    stackmat = np.column_stack([w, b])
    scale = max(float(np.max(np.abs(stackmat))), 1.0)
    u, s, _ = np.linalg.svd(stackmat, full_matrices=False)
    keep = s > 1e-12 * scale
    return u[:, keep]


def _logistic_missing_weights(s_w, s_b):
    """Even weight functions of the logistic missing Fisher at span coordinates.

    Summing the binary target exactly gives the diagonal-block weight
    sum_y P(y) sigmoid'(s_w + y s_b) and its y-signed version for the
    off-diagonal block.
    """
    total = 0.0
    signed = 0.0
    for y in (1.0, -1.0):
        prob = expit(s_w) * expit(y * s_b) + expit(-s_w) * expit(-y * s_b)
        val = prob * _sigmoid_deriv(s_w + y * s_b)
        total += val
        signed += y * val
    return total, signed


def _span_moments_2d(weight_fn, c_w, c_b, epsrel=1e-10):
    """Integrate the weight functions against (1, c1^2, c1 c2, c2^2) phi2(c).

    Exploits joint-negation evenness: integrate the outer coordinate over
    [0, inf) and double.  Returns arrays m0 (per weight) and M2 (per weight,
    2x2).
    """

    def inner(c1):
        def f(c2):
            s_w = c_w[0] * c1 + c_w[1] * c2
            s_b = c_b[0] * c1 + c_b[1] * c2
            total, signed = weight_fn(s_w, s_b)
            phi2 = np.exp(-0.5 * (c1 * c1 + c2 * c2)) / (2.0 * np.pi)
            base = np.array([total, signed])
            return np.concatenate(
                [base, base * c1 * c1, base * c1 * c2, base * c2 * c2]
            ) * phi2

        val, _ = quad_vec(f, -_TAIL, _TAIL, epsabs=1e-13, epsrel=epsrel)
        return val

    val, _ = quad_vec(inner, 0.0, _TAIL, epsabs=1e-13, epsrel=epsrel)
    val = 2.0 * val
    m0 = val[0:2]
    M2 = np.empty((2, 2, 2))
    for i in range(2):
        M2[i] = np.array([[val[2 + i], val[4 + i]], [val[4 + i], val[6 + i]]])
    return m0, M2


def _span_moments_1d(weight_fn, c_w, c_b, epsrel=1e-11):
    def f(c1):
        s_w = c_w[0] * c1
        s_b = c_b[0] * c1
        total, signed = weight_fn(s_w, s_b)
        phi1 = np.exp(-0.5 * c1 * c1) / sqrt(2.0 * np.pi)
        base = np.array([total, signed])
        return np.concatenate([base, base * c1 * c1]) * phi1

    val, _ = quad_vec(f, 0.0, _TAIL, epsabs=1e-14, epsrel=epsrel)
    val = 2.0 * val
    return val[0:2], val[2:4].reshape(2, 1, 1)


def _population_missing_logistic(theta: MoEParams) -> np.ndarray:
    """Exact-in-y, quadrature-in-x missing Fisher for logistic experts."""
    w, b = theta.gating, theta.experts
    d = w.shape[0]
    Q = _span_basis(w, b)
    r = Q.shape[1]
    weight_fn = _logistic_missing_weights
    if r == 0:
        total, signed = weight_fn(0.0, 0.0)
        m0 = np.array([total, signed])
        M2 = np.zeros((2, 0, 0))
    else:
        c_w = Q.T @ w
        c_b = Q.T @ b
        if r == 1:
            m0, M2 = _span_moments_1d(weight_fn, c_w, c_b)
        else:
            m0, M2 = _span_moments_2d(weight_fn, c_w, c_b)
    perp = np.eye(d) - Q @ Q.T
    blocks = [Q @ M2[i] @ Q.T + m0[i] * perp for i in range(2)]
    out = np.zeros((2 * d, 2 * d))
    out[:d, :d] = blocks[0]
    out[d:, d:] = blocks[0]
    out[:d, d:] = blocks[1]
    out[d:, :d] = blocks[1]
    return out


def _stacked_interaction(X, y, kind: ModelKind):
    """Rows (x, c*y*x) paired with stacked (gating, experts) parameters."""
    c = kind.posterior_y_coeff
    return np.hstack([X, (c * y)[:, None] * X])


def _accumulate_outer(theta, kind, X, y):
    V = _stacked_interaction(X, y, kind)
    logit = V @ theta.stack()
    sd = _sigmoid_deriv(logit)
    S1 = (V * sd[:, None]).T @ V
    V2 = V * V
    S2 = (V2 * (sd * sd)[:, None]).T @ V2
    return S1, S2


def _mc_missing(theta, kind, n_samples, seed, chunk=200_000):
    d = theta.d
    S1 = np.zeros((2 * d, 2 * d))
    S2 = np.zeros((2 * d, 2 * d))
    done = 0
    block = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        sample = sample_dataset(kind, m, d, theta, seed ^ (block + 1))
        a1, a2 = _accumulate_outer(theta, kind, sample.features, sample.targets)
        S1 += a1
        S2 += a2
        done += m
        block += 1
    mean = S1 / n_samples
    var = np.maximum(S2 / n_samples - mean**2, 0.0)
    stderr = np.sqrt(var / n_samples)
    return mean, stderr


def fisher_missing(
    theta: MoEParams,
    kind: ModelKind,
    mode: str = "population",
    data: DataSet | None = None,
    mc_samples: int = 1_000_000,
    seed: int = 0,
    return_stderr: bool = False,
):
    """Missing-information Fisher matrix E[sigmoid'(v.theta) v v'].

    The interaction vector stacks (x, c*y*x) with c = 2 for linear experts
    and 1 for logistic ones.  Modes: "empirical" averages over the rows of
    the given dataset; "population" sums the target exactly and integrates
    the features by adaptive quadrature (logistic experts) or falls back to
    Monte Carlo (linear experts); "mc" always estimates by Monte Carlo over
    fresh samples drawn at *theta*, with standard errors available.
    """
    if not kind.symmetric:
        raise WrongKind("Fisher diagnostics are defined for symmetric kinds")
    theta.check_kind(kind)
    if mode == "empirical":
        if data is None:
            raise ValueError("empirical mode needs a dataset")
        S1, S2 = _accumulate_outer(theta, kind, data.features, data.targets)
        mean = S1 / data.n
        if return_stderr:
            var = np.maximum(S2 / data.n - mean**2, 0.0)
            return mean, np.sqrt(var / data.n)
        return mean
    if mode == "population":
        if kind.experts == "logistic":
            out = _population_missing_logistic(theta)
            return (out, np.zeros_like(out)) if return_stderr else out
        mode = "mc"
    if mode != "mc":
        raise ValueError(f"unknown mode {mode!r}")
    mean, stderr = _mc_missing(theta, kind, mc_samples, seed)
    return (mean, stderr) if return_stderr else mean


def fisher_pair(
    theta: MoEParams,
    kind: ModelKind,
    mode: str = "population",
    data: DataSet | None = None,
    mc_samples: int = 1_000_000,
    seed: int = 0,
) -> FisherPair:
    return FisherPair(
        complete=fisher_complete(theta, kind, mode=mode, data=data),
        missing=fisher_missing(
            theta, kind, mode=mode, data=data, mc_samples=mc_samples, seed=seed
        ),
        mode=mode,
    )


# ---------------------------------------------------------------------------
# MIM certificate
# ---------------------------------------------------------------------------

def mim_certificate(
    theta: MoEParams,
    kind: ModelKind,
    mode: str = "population",
    data: DataSet | None = None,
    mc_samples: int = 1_000_000,
    seed: int = 0,
) -> MimReport:
    """Missing-information matrix spectrum and the linear-rate certificate.

    Reports the whitened ratio C^{-1/2} M C^{-1/2} (spectrally identical to
    C^{-1} M and symmetric by construction), its eigenvalues, the largest
    one, and the certified rate constant 1 - lambda_max when it is below 1.
    """
    pair = fisher_pair(
        theta, kind, mode=mode, data=data, mc_samples=mc_samples, seed=seed
    )
    evals, evecs = np.linalg.eigh(pair.complete)
    if evals[-1] <= 0:
        raise IllConditioned("complete-data Fisher is not positive definite")
    if evals[-1] / max(evals[0], _EIG_FLOOR) > _COND_LIMIT:
        raise IllConditioned(
            f"complete-data Fisher condition number exceeds {_COND_LIMIT:.0e}"
        )
    inv_half = evecs @ np.diag(1.0 / np.sqrt(np.maximum(evals, _EIG_FLOOR))) @ evecs.T
    mim = inv_half @ pair.missing @ inv_half
    denom = float(np.linalg.norm(mim))
    asymmetry = float(np.linalg.norm(mim - mim.T)) / max(denom, 1e-30)
    plain = evecs @ np.diag(1.0 / np.maximum(evals, _EIG_FLOOR)) @ evecs.T @ pair.missing
    product_asymmetry = float(np.linalg.norm(plain - plain.T)) / max(
        float(np.linalg.norm(plain)), 1e-30
    )
    spectrum = np.linalg.eigvalsh(0.5 * (mim + mim.T))
    lam_max = float(spectrum[-1])
    alpha = 1.0 - lam_max if lam_max < 1.0 else None
    return MimReport(
        mim=mim,
        eigenvalues=spectrum,
        lambda_max=lam_max,
        alpha_certificate=alpha,
        asymmetry=asymmetry,
        product_asymmetry=product_asymmetry,
        mode=pair.mode,
    )


# ---------------------------------------------------------------------------
# appendix checks
# ---------------------------------------------------------------------------

def eigenvalue_scaling_check(norms, band_factor: float = 10.0) -> EigScalingTable:
    """Check the closed-form bounds and scaling bands of the block eigenvalues.

    For each norm at least sqrt(2): lam1 <= 4 / norm^3, lam2 <= 1 / norm,
    both positive, and the compensated products lam1 * norm^3 and
    lam2 * norm stay within a factor band across the sweep.
    """
    norms = [float(v) for v in norms]
    if not norms:
        raise ValueError("need at least one norm")
    for v in norms:
        if v < sqrt(2.0):
            raise PreconditionViolated(f"norm {v} is below sqrt(2)")
    rows = []
    for v in norms:
        lam1, lam2 = sigmoid_block_eigs(v)
        rows.append(
            EigScalingRow(
                norm=v,
                lam1=lam1,
                lam2=lam2,
                bound1=4.0 / v**3,
                bound2=1.0 / v,
                compensated1=lam1 * v**3,
                compensated2=lam2 * v,
            )
        )
    comp1 = [row.compensated1 for row in rows]
    comp2 = [row.compensated2 for row in rows]
    ratio1 = max(comp1) / min(comp1)
    ratio2 = max(comp2) / min(comp2)
    passed = (
        all(row.within_bounds for row in rows)
        and ratio1 <= band_factor
        and ratio2 <= band_factor
    )
    return EigScalingTable(tuple(rows), ratio1, ratio2, passed)


def scalar_mim_bound(
    theta: MoEParams, mc_samples: int = 1_000_000, seed: int = 0
) -> ScalarBoundCheck:
    """One-dimensional missing-information trace bound for binary targets.

    Estimates trace E[sigmoid'(x(w + y b)) * 2x^2] by Monte Carlo at the
    given scalar parameters and compares it against the closed-form bound
    8 [ (1+|w-b|)^-3 + (1+|w+b|)^-3 ]; passes when the estimate is below the
    bound plus three standard errors.
    """
    if theta.gating.ndim != 1 or theta.d != 1:
        raise WrongDimension("the scalar bound is defined for d = 1")
    kind = ModelKind.sym_logistic()
    w = float(theta.gating[0])
    b = float(theta.experts[0])
    sample = sample_dataset(kind, mc_samples, 1, theta, seed)
    x = sample.features[:, 0]
    y = sample.targets
    vals = 2.0 * x * x * _sigmoid_deriv(x * (w + y * b))
    lhs = float(np.mean(vals))
    stderr = float(np.std(vals) / sqrt(mc_samples))
    rhs = 8.0 * ((1.0 + abs(w - b)) ** -3 + (1.0 + abs(w + b)) ** -3)
    return ScalarBoundCheck(lhs, rhs, stderr, bool(lhs <= rhs + 3.0 * stderr))
