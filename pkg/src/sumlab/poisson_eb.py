"""Poisson empirical-Bayes estimation of sums ``sum_j lambda_j u(X_j)``.

Two estimators are provided:

* :func:`plugin_sum` substitutes an estimate of the exponential-prior rate
  ``tau`` into the posterior mean ``(x + 1) u(x) / (1 + tau)``;
* :func:`uv_sum` uses ``v(x) = x u(x - 1)``, whose expectation matches the
  target for every mixing distribution.

Asymptotic standard deviations for the plug-in estimator are built from the
influence components of the exponential-prior model and evaluated by series.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln

from .core import (
    DEFAULT_TAIL_EPS,
    Diagnostics,
    DiscreteMixingDistribution,
    EstimateReport,
    FrequencyOfFrequencies,
    expect_truncated,
    log_mixture_moments,
    normal_quantile,
)
from .errors import DataError, NonIdentifiable


@dataclass(frozen=True)
class UtilityFn:
    """Utility ``u`` on the non-negative integers.

    ``fn`` is called with an int64 array and must return values of the same
    shape. Exactly one of ``support_bound`` (``u(x) = 0`` for ``x > M``) and
    ``degree`` (polynomial growth order) should be declared; the declaration
    is spot-checked on construction.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"
    support_bound: int | None = None
    degree: int | None = None

    def __post_init__(self):
        if self.support_bound is None and self.degree is None:
            raise DataError(f"utility {self.name!r} must declare a support bound or growth degree")
        if self.support_bound is not None:
            probe = np.arange(self.support_bound + 1, self.support_bound + 33)
            if np.any(self(probe) != 0):
                raise DataError(f"utility {self.name!r} is nonzero beyond its support bound")
        else:
            probe = np.array([10, 100, 1000, 10_000])
            scale = 1.0 + np.max(np.abs(self(np.arange(0, 10))))
            if np.any(np.abs(self(probe)) > 10 * scale * (1.0 + probe) ** self.degree):
                raise DataError(f"utility {self.name!r} grows faster than degree {self.degree}")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.int64)
        return np.broadcast_to(np.asarray(self.fn(x), dtype=float), x.shape).copy()


def indicator(a: int) -> UtilityFn:
    a = int(a)
    return UtilityFn(lambda x: (x == a).astype(float), f"indicator:{a}", support_bound=a)


def leq(a: int) -> UtilityFn:
    a = int(a)
    return UtilityFn(lambda x: (x <= a).astype(float), f"leq:{a}", support_bound=a)


def identity() -> UtilityFn:
    return UtilityFn(lambda x: x.astype(float), "identity", degree=1)


def one() -> UtilityFn:
    return UtilityFn(lambda x: np.ones(x.shape), "one", degree=0)


def zero() -> UtilityFn:
    return UtilityFn(lambda x: np.zeros(x.shape), "zero", support_bound=0)


def parse_utility(spec: str) -> UtilityFn:
    """Parse ``indicator:a``, ``leq:a``, ``identity`` or ``one``."""
    name, _, arg = spec.partition(":")
    if name in ("indicator", "leq"):
        try:
            a = int(arg)
        except ValueError:
            raise DataError(f"utility {spec!r}: expected an integer after ':'") from None
        if a < 0:
            raise DataError(f"utility {spec!r}: a must be >= 0")
        return indicator(a) if name == "indicator" else leq(a)
    if arg:
        raise DataError(f"utility {spec!r} takes no argument")
    if name == "identity":
        return identity()
    if name == "one":
        return one()
    raise DataError(f"unknown utility {spec!r}; use indicator:a, leq:a, identity or one")


def v_from_u(u: UtilityFn) -> UtilityFn:
    """``v(x) = x u(x - 1)``, with ``v(0) = 0``."""

    def v(x):
        return x * u(np.maximum(x - 1, 0))

    return UtilityFn(
        v,
        f"v[{u.name}]",
        support_bound=None if u.support_bound is None else u.support_bound + 1,
        degree=None if u.degree is None else u.degree + 1,
    )


@dataclass(frozen=True)
class TargetKind:
    """Which sum is estimated.

    ``lambda`` targets ``sum lambda_j u(X_j)``; ``next`` targets
    ``sum Y_j u(X_j)`` with ``E[Y | X, lambda] = lambda`` and conditional
    variance ``Var(Y | lambda) = sum_m y_variance[m] * lambda**m``
    (default ``(0, 1)``: Poisson).
    """

    kind: str = "lambda"
    y_variance: tuple[float, ...] = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("lambda", "next"):
            raise DataError(f"target kind must be 'lambda' or 'next', got {self.kind!r}")
        lam = np.concatenate([[0.0], np.geomspace(1e-6, 1e6, 49)])
        if np.any(np.polynomial.polynomial.polyval(lam, self.y_variance) < 0):
            raise DataError("Y-variance model must be non-negative for lambda >= 0")

    @classmethod
    def lambda_weighted(cls) -> "TargetKind":
        return cls("lambda")

    @classmethod
    def next_count(cls, y_variance: Sequence[float] = (0.0, 1.0)) -> "TargetKind":
        return cls("next", tuple(float(c) for c in y_variance))

    @property
    def label(self) -> str:
        return "S'" if self.kind == "lambda" else "S''"


def _tabulate(data, n_zero: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Distinct values and multiplicities from raw data or a frequency table."""
    if isinstance(data, FrequencyOfFrequencies):
        xs, cs = data.ks, data.counts
        if n_zero:
            xs, cs = np.concatenate([[0], xs]), np.concatenate([[float(n_zero)], cs])
    else:
        arr = np.asarray(list(data) if not isinstance(data, np.ndarray) else data)
        if arr.size and (not np.all(np.equal(np.mod(arr, 1), 0)) or arr.min() < 0):
            raise DataError("observations must be non-negative integers")
        xs, counts = np.unique(arr.astype(np.int64), return_counts=True)
        cs = counts.astype(float)
        if n_zero:
            raise DataError("n_zero applies to frequency tables only")
    if cs.sum() <= 0:
        raise DataError("data must be non-empty")
    return xs.astype(np.int64), cs


def uv_sum(data, u: UtilityFn) -> EstimateReport:
    """Estimate ``sum Y_j u(X_j)`` (or ``sum lambda_j u(X_j)``) by ``sum v(X_j)``."""
    xs, cs = _tabulate(data)
    v = v_from_u(u)
    est = math.fsum(cs * v(xs))
    return EstimateReport(
        estimate=est,
        method="uv",
        params={"u": u.name, "n": float(cs.sum())},
    )


def tau_hat(data, a: float = 0.0, b: float = 0.0, n_zero: int = 0) -> float:
    """``(b + n) / (a + sum X_j)``; ``a = b = 0`` is the MLE ``1 / mean(X)``."""
    if a < 0 or b < 0:
        raise DataError("a and b must be >= 0")
    xs, cs = _tabulate(data, n_zero)
    total = a + math.fsum(cs * xs)
    if total <= 0:
        raise NonIdentifiable("tau is not identifiable: all observations are zero and a = 0")
    return (b + cs.sum()) / total


def geometric_pmf(tau: float) -> Callable[[np.ndarray], np.ndarray]:
    """Marginal ``tau (1 + tau)^(-x-1)`` of a Poisson count with exponential rate."""
    log_r = -math.log1p(tau)
    log_tau = math.log(tau)
    return lambda x: np.exp(log_tau + (x + 1) * log_r)


def mu_tau(u: UtilityFn, tau: float, tail_eps: float = DEFAULT_TAIL_EPS) -> float:
    """``E_tau[lambda u(X)] = sum_x f_tau(x) x u(x - 1)``."""
    if tau <= 0:
        raise DataError("tau must be > 0")
    v = v_from_u(u)
    return expect_truncated(v, geometric_pmf(tau), tail_eps, tail_ratio=1 / (1 + tau)).value


def posterior_rate_moment(x, m: int, tau: float):
    """``E[lambda^m | X = x] = (x+1)...(x+m) / (1+tau)^m`` under the exponential prior."""
    x = np.asarray(x, dtype=float)
    return np.exp(gammaln(x + 1 + m) - gammaln(x + 1) - m * math.log1p(tau))


@dataclass
class InfluenceComponents:
    rho: Callable[[np.ndarray], np.ndarray]
    fisher: float
    gamma: float
    u_bar: Callable[[np.ndarray], np.ndarray]
    mu: float
    phi_star: Callable[[np.ndarray], np.ndarray]
    tau: float = field(default=math.nan)

    def kappa_star(self, x):
        """Efficient influence function for ``tau``: ``rho / I``."""
        return self.rho(x) / self.fisher


def influence_components(
    tau: float, u: UtilityFn, tail_eps: float = DEFAULT_TAIL_EPS
) -> InfluenceComponents:
    if not tau > 0:
        raise DataError("tau must be > 0")
    f = geometric_pmf(tau)
    r = 1 / (1 + tau)

    def rho(x):
        return 1.0 / tau - (np.asarray(x, dtype=float) + 1.0) / (1.0 + tau)

    def u_bar(x):
        return (np.asarray(x, dtype=float) + 1.0) * u(x) / (1.0 + tau)

    fisher = 1.0 / (tau * tau * (1.0 + tau))

    def first(x):
        uv = u(x)
        post_var = (x + 1.0) / (1.0 + tau) ** 2
        return np.stack([u_bar(x), -uv * post_var], axis=1)

    mu, gamma = expect_truncated(first, f, tail_eps, tail_ratio=r).value
    mu, gamma = float(mu), float(gamma)

    def phi_star(x):
        return u_bar(x) - mu + rho(x) * gamma / fisher

    return InfluenceComponents(rho, fisher, gamma, u_bar, mu, phi_star, tau)


def asymptotic_sd(
    tau: float,
    u: UtilityFn,
    target: TargetKind | None = None,
    tail_eps: float = DEFAULT_TAIL_EPS,
) -> tuple[float, InfluenceComponents]:
    """Limit standard deviation of ``(S_hat - S) / sqrt(n)`` for the plug-in estimator.

    Computes ``Var(phi_star(X) - W)`` where ``W = lambda u(X)`` or
    ``Y u(X)``, as ``E[(phi_star - u_bar)^2] + E[Var(W | X)] - mu^2``. The
    estimated ``tau`` has the same influence function as the MLE, so no
    correction term is added.
    """
    target = target or TargetKind()
    comps = influence_components(tau, u, tail_eps)
    y_var = np.asarray(target.y_variance, dtype=float)

    def second(x):
        uv = u(x)
        post_var = (x + 1.0) / (1.0 + tau) ** 2
        cond_var = uv * uv * post_var
        if target.kind == "next":
            extra = sum(c * posterior_rate_moment(x, m, tau) for m, c in enumerate(y_var) if c)
            cond_var = cond_var + uv * uv * extra
        dev = comps.phi_star(x) - comps.u_bar(x)
        return np.stack([dev * dev, cond_var], axis=1)

    sq_dev, cond_var = expect_truncated(
        second, geometric_pmf(tau), tail_eps, tail_ratio=1 / (1 + tau)
    ).value
    var = float(sq_dev) + float(cond_var) - comps.mu**2
    return math.sqrt(max(var, 0.0)), comps


def ci_sum(estimate: float, sd: float, n: int, level: float = 0.95) -> tuple[float, float]:
    """``estimate -/+ z sd sqrt(n)`` with ``z`` the ``(1 + level) / 2`` normal quantile."""
    if sd < 0:
        raise DataError("sd must be >= 0")
    if not 0 < level < 1:
        raise DataError("level must lie in (0, 1)")
    half = normal_quantile((1 + level) / 2) * sd * math.sqrt(n)
    return estimate - half, estimate + half


def plugin_sum(
    data,
    u: UtilityFn,
    a: float = 0.0,
    b: float = 0.0,
    target: TargetKind | None = None,
    level: float = 0.95,
    n_zero: int = 0,
) -> EstimateReport:
    """Plug-in estimate ``sum (x_j + 1) u(x_j) / (1 + tau_hat)`` with SE and CI.

    ``a = b = 0`` plugs in the MLE of ``tau``; positive values give the Bayes
    estimator under a beta prior on ``tau / (1 + tau)``. A frequency table
    omits zero counts, so pass their number as ``n_zero``.

    When every count is zero and ``a = 0`` the estimate is 0 but ``tau`` is
    not identified, so the report has no SE and carries a warning.
    """
    target = target or TargetKind()
    xs, cs = _tabulate(data, n_zero)
    n = float(cs.sum())
    params = {"u": u.name, "a": a, "b": b, "target": target.label, "n": n}
    if a + math.fsum(cs * xs) <= 0:
        if a < 0 or b < 0:
            raise DataError("a and b must be >= 0")
        return EstimateReport(
            estimate=0.0,
            method="plugin",
            params=params,
            diagnostics=Diagnostics(warnings=["NonIdentifiable: all counts are zero; no SE"]),
        )
    th = tau_hat(data, a, b, n_zero)
    xbar = math.fsum(cs * xs) / n
    shrink = (a / n + xbar) / ((a + b) / n + 1.0 + xbar)
    est = math.fsum(cs * shrink * (xs + 1.0) * u(xs))
    sd, _ = asymptotic_sd(th, u, target)
    lo, hi = ci_sum(est, sd, n, level)
    return EstimateReport(
        estimate=est,
        method="plugin",
        se=sd * math.sqrt(n),
        ci=(lo, hi),
        level=level,
        params=params,
        extras={"tau_hat": th, "sd": sd},
    )


def mixed_poisson_pmf(G: DiscreteMixingDistribution) -> Callable[[np.ndarray], np.ndarray]:
    """``f_G(x) = sum_i w_i exp(-y_i) y_i^x / x!``."""
    return lambda x: np.exp(log_mixture_moments(x, 1.0, G) - gammaln(np.asarray(x) + 1.0))


def uv_expectations(
    u: UtilityFn, G: DiscreteMixingDistribution, tail_eps: float = 1e-13
) -> tuple[float, float]:
    """``(E_G v(X), E_G lambda u(X))`` by two separate series over ``x``."""
    f = mixed_poisson_pmf(G)
    y, w = G.support, G.weights
    ev = expect_truncated(v_from_u(u), f, tail_eps).value

    def rate_weighted(x):
        # sum_i w_i y_i Poisson(x; y_i), summed against u(x)
        with np.errstate(divide="ignore"):
            logp = -y[None, :] + x[:, None] * np.log(np.where(y > 0, y, 1.0))[None, :] - gammaln(x + 1.0)[:, None]
        dens = np.where(y[None, :] > 0, np.exp(logp), 0.0) @ (w * y)
        return u(x) * dens / np.maximum(f(x), 1e-300)

    elu = expect_truncated(rate_weighted, f, tail_eps).value
    return float(ev), float(elu)
