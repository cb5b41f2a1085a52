"""Species richness from a frequency-of-frequencies table.

Estimators of the total number of classes ``d`` given the counts ``n_k`` of
classes observed exactly ``k`` times:

* :func:`fit_gamma_mle` -- zero-truncated negative binomial (gamma-mixed
  Poisson) conditional MLE, with an asymptotic standard error;
* :func:`chao_lower` -- Chao's lower bound;
* :func:`nb_ratio_regression` -- least-squares fit of consecutive-count ratios;
* :func:`fit_npmle_species` -- nonparametric MLE of the mixing law by EM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize
from scipy.special import digamma, gammaln

from .core import (
    DEFAULT_TAIL_EPS,
    Diagnostics,
    DiscreteMixingDistribution,
    EstimateReport,
    FrequencyOfFrequencies,
    GammaShapeScale,
    expect_truncated,
    geometric_grid,
    nb_pmf,
    nb_tail_ratio,
    normal_quantile,
)
from .errors import (
    BoundarySolution,
    DataError,
    DivisionUndefined,
    InsufficientData,
    InvalidGrid,
    SingularDesign,
    SingularInformation,
)
from .mixture_em import CountData, EMState, PooledEM, fit_em

ALPHA_BRACKET = (1e-8, 1e6)
BETA_BRACKET = (1e-12, 1e12)
COND_WARN = 1e12


@dataclass
class GammaSpeciesFit:
    params: GammaShapeScale
    d_hat: float
    se: float
    report: EstimateReport
    residuals: tuple[float, float] = (math.nan, math.nan)


@dataclass
class RegressionSpeciesFit:
    tau1: float
    tau2: float
    d_hat: float
    variant: str
    residual_norm: float
    m: int
    report: EstimateReport


@dataclass
class NpmleSpeciesFit:
    G_hat: DiscreteMixingDistribution
    d_hat: float
    loglik_trace: list = field(default_factory=list)
    report: EstimateReport | None = None


def _require_nonempty(fof: FrequencyOfFrequencies):
    if fof.d_tilde <= 0:
        raise InsufficientData("frequency table is empty")


def _log_p_observed(alpha, beta):
    """``log(1 - (1 + beta)^-alpha)``."""
    return math.log(-math.expm1(-alpha * math.log1p(beta)))


def ztnb_loglik(params: GammaShapeScale, fof: FrequencyOfFrequencies) -> float:
    """Zero-truncated negative binomial log-likelihood of the table."""
    ks, ns = fof.ks, fof.counts
    a, b = params.alpha, params.beta
    lp = gammaln(ks + a) - gammaln(a) - gammaln(ks + 1.0) + ks * math.log(b) - (ks + a) * math.log1p(b)
    return float(ns @ lp - fof.d_tilde * _log_p_observed(a, b))


class _GammaEquations:
    """The two score equations of the truncated gamma-Poisson likelihood."""

    def __init__(self, fof: FrequencyOfFrequencies):
        self.d = fof.d_tilde
        self.N = fof.sample_size
        dense = fof.dense()
        # tail[k-1] = sum_{l >= k} n_l, k = 1..max_k
        self.tail = np.cumsum(dense[::-1])[::-1][1:]
        self.offsets = np.arange(self.tail.size, dtype=float)
        self.ratio = self.N / self.d

    def size_lhs(self, alpha, beta):
        return self.d * alpha * beta / -math.expm1(-alpha * math.log1p(beta))

    def beta_for(self, alpha: float) -> float:
        """Solve the sample-size equation for beta; monotone increasing in beta."""
        target = math.log(self.ratio)

        def g(log_beta):
            beta = math.exp(log_beta)
            return (
                math.log(alpha) + log_beta - math.log(-math.expm1(-alpha * math.log1p(beta))) - target
            )

        lo, hi = math.log(BETA_BRACKET[0]), math.log(BETA_BRACKET[1])
        glo, ghi = g(lo), g(hi)
        if glo > 0 or ghi < 0:
            raise BoundarySolution(f"sample-size equation has no root in beta at alpha={alpha:g}")
        if glo == 0:
            return math.exp(lo)
        return math.exp(brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))

    def shape_lhs(self, alpha):
        return float(np.sum(self.tail / (alpha + self.offsets)))

    def shape_rhs(self, alpha, beta):
        return self.d * math.log1p(beta) / -math.expm1(-alpha * math.log1p(beta))

    def shape_gap(self, alpha):
        beta = self.beta_for(alpha)
        return self.shape_lhs(alpha) - self.shape_rhs(alpha, beta)

    def residuals(self, alpha, beta) -> tuple[float, float]:
        lhs = self.shape_lhs(alpha)
        r1 = abs(lhs - self.shape_rhs(alpha, beta)) / abs(lhs)
        r2 = abs(self.size_lhs(alpha, beta) - self.N) / self.N
        return r1, r2


def _ztnb_score(log_params, fof):
    a, b = np.exp(log_params)
    ks, ns = fof.ks, fof.counts
    lb1 = math.log1p(b)
    q = math.exp(-a * lb1)
    da = ns @ (digamma(ks + a) - digamma(a) - lb1) - fof.d_tilde * q * lb1 / (1 - q)
    db = ns @ (ks / b - (ks + a) / (1 + b)) - fof.d_tilde * a * q / ((1 + b) * (1 - q))
    # chain rule for log parameters
    return np.array([da * a, db * b])


def maximize_ztnb(fof: FrequencyOfFrequencies, start: tuple[float, float]) -> GammaShapeScale:
    """Direct maximization of the truncated likelihood over ``(log a, log b)``.

    Quasi-Newton from ``start`` followed by Newton polishing on the analytic
    score with a finite-difference Hessian.
    """

    def nll(z):
        try:
            return -ztnb_loglik(GammaShapeScale(*np.exp(z)), fof)
        except (DataError, ValueError, OverflowError):
            return np.inf

    z = np.log(np.asarray(start, dtype=float))
    res = minimize(nll, z, jac=lambda t: -_ztnb_score(t, fof), method="BFGS",
                   options={"gtol": 1e-10, "maxiter": 2000})
    z = res.x
    for _ in range(50):
        g = _ztnb_score(z, fof)
        h = 1e-6
        H = np.empty((2, 2))
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            H[:, i] = (_ztnb_score(z + e, fof) - _ztnb_score(z - e, fof)) / (2 * h)
        try:
            dz = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(dz)):
            break
        z = z + np.clip(dz, -1.0, 1.0)
        if np.max(np.abs(dz)) < 1e-14:
            break
    return GammaShapeScale(*np.exp(z))


def _solve_gamma_equations(eq: _GammaEquations, fof: FrequencyOfFrequencies) -> GammaShapeScale:
    alphas = np.geomspace(*ALPHA_BRACKET, 113)
    gaps = []
    for a in alphas:
        try:
            gaps.append(eq.shape_gap(a))
        except BoundarySolution:
            gaps.append(math.nan)
    gaps = np.array(gaps)
    roots = []
    for i in range(alphas.size - 1):
        g0, g1 = gaps[i], gaps[i + 1]
        if np.isfinite(g0) and np.isfinite(g1) and g0 * g1 <= 0:
            if g0 == 0:
                roots.append(alphas[i])
                continue
            roots.append(brentq(eq.shape_gap, alphas[i], alphas[i + 1], xtol=1e-300,
                                rtol=4 * np.finfo(float).eps, maxiter=500))
    if not roots:
        raise BoundarySolution("shape equation has no sign change; the MLE lies on the boundary")
    best = max(
        (GammaShapeScale(a, eq.beta_for(a)) for a in dict.fromkeys(roots)),
        key=lambda p: ztnb_loglik(p, fof),
    )
    return best


def gamma_variance_factor(params: GammaShapeScale, tail_eps: float = DEFAULT_TAIL_EPS):
    """Per-class asymptotic variance of ``(d_hat - d) / sqrt(d)``.

    Returns ``(V, condition_number)`` with
    ``V = P(X=0)/P(X>0) + g' C^-1 g``, ``g = E[score | X > 0]`` and ``C`` the
    covariance of the centred score over observed classes.
    """
    a, b = params.alpha, params.beta
    lb1 = math.log1p(b)

    def h(x):
        pos = (x > 0).astype(float)
        xf = x.astype(float)
        ra = digamma(xf + a) - digamma(a) - lb1
        rb = xf / b - (xf + a) / (1 + b)
        return np.stack([pos, pos * ra, pos * rb, pos * ra * ra, pos * ra * rb, pos * rb * rb], axis=1)

    m = expect_truncated(h, lambda x: nb_pmf(x, params), tail_eps, tail_ratio=nb_tail_ratio(params)).value
    p_pos = params.p_positive
    g = np.array([m[1], m[2]]) / p_pos
    C = np.array([[m[3], m[4]], [m[4], m[5]]]) - p_pos * np.outer(g, g)
    det = C[0, 0] * C[1, 1] - C[0, 1] ** 2
    tr = C[0, 0] + C[1, 1]
    if not det > 0 or not np.isfinite(det):
        raise SingularInformation("score covariance is singular")
    disc = math.sqrt(max(tr * tr / 4 - det, 0.0))
    lmin = tr / 2 - disc
    cond = (tr / 2 + disc) / lmin if lmin > 0 else math.inf
    if not math.isfinite(cond) or cond > 1e16:
        raise SingularInformation(f"score covariance condition number {cond:.3g}")
    inv = np.array([[C[1, 1], -C[0, 1]], [-C[0, 1], C[0, 0]]]) / det
    V = params.p_zero / p_pos + float(g @ inv @ g)
    return V, cond


def se_gamma(fit: GammaSpeciesFit, fof: FrequencyOfFrequencies | None = None) -> float:
    """``sqrt(d_hat * V)`` at the fitted parameters."""
    V, _ = gamma_variance_factor(fit.params)
    return math.sqrt(fit.d_hat * V)


def fit_gamma_mle(
    fof: FrequencyOfFrequencies,
    level: float = 0.95,
    cross_check: bool = True,
) -> GammaSpeciesFit:
    """Gamma-mixture species MLE.

    The sample-size equation is solved for ``beta`` at each candidate
    ``alpha`` (it is monotone in ``beta``), leaving a bracketed 1-D root
    search in ``alpha`` over ``[1e-8, 1e6]``. With ``cross_check`` the
    solution is compared against direct maximization of the truncated
    likelihood and the largest relative coordinate gap is recorded.

    Raises
    ------
    BoundarySolution
        If fewer than two distinct multiplicities are observed or the shape
        equation has no sign change.
    """
    _require_nonempty(fof)
    if len(fof) < 2:
        raise BoundarySolution("need at least two distinct multiplicities for the gamma MLE")
    eq = _GammaEquations(fof)
    params = _solve_gamma_equations(eq, fof)
    d_tilde = fof.d_tilde
    d_hat = d_tilde / params.p_positive
    warnings: list[str] = []
    V, cond = gamma_variance_factor(params)
    if cond > COND_WARN:
        warnings.append("IllConditionedInformation")
    se = math.sqrt(d_hat * V)
    half = normal_quantile((1 + level) / 2) * se
    r1, r2 = eq.residuals(params.alpha, params.beta)
    extras = {
        "alpha": params.alpha,
        "beta": params.beta,
        "d_tilde": d_tilde,
        "variance_factor": V,
        "residual_shape": r1,
        "residual_size": r2,
    }
    if cross_check:
        direct = maximize_ztnb(fof, (1.0, max(eq.ratio - 1.0, 1e-3)))
        gap = max(abs(direct.alpha - params.alpha) / params.alpha,
                  abs(direct.beta - params.beta) / params.beta)
        extras["crosscheck_gap"] = gap
        if not gap < 1e-6:
            warnings.append("CrossCheckDisagreement")
    report = EstimateReport(
        estimate=d_hat,
        method="gamma-mle",
        se=se,
        ci=(d_hat - half, d_hat + half),
        level=level,
        diagnostics=Diagnostics(converged=True, loglik=ztnb_loglik(params, fof), warnings=warnings),
        extras=extras,
    )
    return GammaSpeciesFit(params, d_hat, se, report, (r1, r2))


def fitted_frequencies(fit: GammaSpeciesFit, fof: FrequencyOfFrequencies) -> list[tuple[int, float, float]]:
    """``(k, observed n_k, expected n_k)`` for ``k = 1..max_k``."""
    ks = np.arange(1, fof.max_k + 1)
    expected = fit.d_hat * nb_pmf(ks, fit.params)
    return [(int(k), fof.get(k), float(e)) for k, e in zip(ks, expected)]


def chao_lower(fof: FrequencyOfFrequencies, corrected: bool = False) -> EstimateReport:
    """Chao's lower estimate ``d_tilde + n_1^2 / (2 n_2)``.

    ``corrected`` uses ``n_1 (n_1 - 1) / (2 (n_2 + 1))``, which stays finite
    when there are no doubletons.
    """
    n1, n2 = fof.get(1), fof.get(2)
    d = fof.d_tilde
    if n1 == 0:
        extra = 0.0
    elif corrected:
        extra = n1 * (n1 - 1) / (2 * (n2 + 1))
    elif n2 == 0:
        raise DivisionUndefined("n_2 = 0 with n_1 > 0; use the corrected form")
    else:
        extra = n1 * n1 / (2 * n2)
    return EstimateReport(
        estimate=d + extra,
        method="chao-corrected" if corrected else "chao",
        params={"corrected": corrected},
        extras={"d_tilde": d, "n1": n1, "n2": n2},
    )


REGRESSION_VARIANTS = ("ratio-consistent", "shifted-count")


def default_cutoff(fof: FrequencyOfFrequencies) -> int:
    """Largest ``k`` with ``n_k >= 5``, but at least 4."""
    big = [k for k, c in fof.entries.items() if c >= 5]
    return max(max(big, default=0), 4)


def nb_ratio_regression(
    fof: FrequencyOfFrequencies,
    m: int | None = None,
    weights: str = "unit",
    variant: str = "ratio-consistent",
) -> RegressionSpeciesFit:
    """Regress ``n_k`` on ``(c_k, k n_k)`` for ``k = 1..m-1``.

    ``c_k = (k + 1) n_{k+1}`` in the ratio-consistent variant, which makes the
    relation exact under gamma-Poisson expected counts with
    ``tau1 = (beta + 1) / (alpha beta)`` and ``tau2 = -1 / alpha``; the shifted-count
    variant uses ``c_k = n_{k+1}``. The estimate is
    ``d_tilde + max(tau1, 0) n_1``.
    """
    if variant not in REGRESSION_VARIANTS:
        raise DataError(f"unknown variant {variant!r}")
    if weights not in ("unit", "inverse-count"):
        raise DataError(f"unknown weights {weights!r}")
    m = default_cutoff(fof) if m is None else int(m)
    if m < 3:
        raise InsufficientData("cutoff m must be >= 3")
    if sum(1 for k in range(1, m + 1) if fof.get(k) > 0) < 3:
        raise InsufficientData(f"need n_k > 0 for at least 3 values of k <= {m}")
    dense = fof.dense(m)
    k = np.arange(1, m)
    y = dense[1:m]
    nxt = dense[2 : m + 1]
    c = (k + 1) * nxt if variant == "ratio-consistent" else nxt
    X = np.column_stack([c, k * y])
    w = np.ones_like(y) if weights == "unit" else 1.0 / np.maximum(y, 1.0)
    A = X.T @ (w[:, None] * X)
    rhs = X.T @ (w * y)
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > 1e13:
        raise SingularDesign("normal equations are singular")
    tau1, tau2 = np.linalg.solve(A, rhs)
    resid = y - X @ np.array([tau1, tau2])
    rnorm = float(np.sqrt(np.sum(w * resid * resid)))
    d_tilde = fof.d_tilde
    d_hat = d_tilde + max(tau1, 0.0) * fof.get(1)
    report = EstimateReport(
        estimate=d_hat,
        method="nb-regression",
        params={"m": m, "weights": weights, "variant": variant},
        extras={"tau1": float(tau1), "tau2": float(tau2), "residual_norm": rnorm, "d_tilde": d_tilde},
    )
    return RegressionSpeciesFit(float(tau1), float(tau2), d_hat, variant, rnorm, m, report)


def _as_support(grid, fof: FrequencyOfFrequencies) -> tuple[np.ndarray, np.ndarray | None]:
    if grid is None:
        mean = fof.sample_size / fof.d_tilde
        hi = max(100 * mean, 2.0 * fof.max_k)
        return geometric_grid(0.01 * mean, hi, 100), None
    if isinstance(grid, DiscreteMixingDistribution):
        return grid.support, grid.weights
    y = np.unique(np.asarray(grid, dtype=float))
    if y.size == 0 or np.any(y < 0):
        raise InvalidGrid("grid must be non-empty and non-negative")
    return y, None


def fit_npmle_species(
    fof: FrequencyOfFrequencies,
    grid=None,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    accelerate: bool = True,
) -> NpmleSpeciesFit:
    """Nonparametric MLE of the mixing law with the Poisson scale fixed at 1.

    ``grid`` is an array of support points (uniform starting weights) or a
    :class:`DiscreteMixingDistribution` giving the starting weights. Returns
    ``d_hat = d_tilde G(y > 0) / int (1 - e^-y) dG``.
    """
    _require_nonempty(fof)
    support, w0 = _as_support(grid, fof)
    if not np.any(support > 0):
        raise InvalidGrid("grid needs at least one strictly positive support point")
    data = CountData.from_tables([fof])
    em = PooledEM(data, support, fix_beta=True)
    w0 = np.full(support.size, 1.0 / support.size) if w0 is None else w0
    fit = fit_em(em, EMState(np.ones(1), w0), tol=tol, max_iter=max_iter, accelerate=accelerate)
    d_hat = float(em.d_hats(fit.state)[0])
    G = DiscreteMixingDistribution(support, fit.state.weights)
    report = EstimateReport(
        estimate=d_hat,
        method="npmle",
        diagnostics=Diagnostics(
            iterations=fit.iterations,
            converged=fit.converged,
            loglik=fit.trace[-1],
            warnings=list(fit.warnings),
        ),
        params={"tol": tol, "max_iter": max_iter, "grid_size": int(support.size)},
        extras={"d_tilde": fof.d_tilde},
    )
    return NpmleSpeciesFit(G, d_hat, list(fit.trace), report)
