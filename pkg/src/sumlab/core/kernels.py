"""Mixture moments, gamma-Poisson pmfs and a truncated-series evaluator."""

from __future__ import annotations

from statistics import NormalDist
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import gammaln

from ..errors import NonConvergentSeries
from .types import DiscreteMixingDistribution, GammaShapeScale

DEFAULT_TAIL_EPS = 1e-12
MAX_SERIES_TERMS = 10**7
_STANDARD_NORMAL = NormalDist()


def log_mixture_moments(js, beta: float, G: DiscreteMixingDistribution) -> np.ndarray:
    """``log sum_i w_i exp(-beta y_i) y_i^j`` for each ``j`` in ``js``.

    Evaluated as a log-sum-exp so that large ``j`` or ``beta * y`` stays finite.
    An atom at zero contributes ``w`` at ``j = 0`` and nothing otherwise.
    """
    js = np.atleast_1d(np.asarray(js, dtype=float))
    y, w = G.support, G.weights
    live = w > 0
    y, w = y[live], w[live]
    with np.errstate(divide="ignore", invalid="ignore"):
        log_y = np.log(y)
        base = np.log(w) - beta * y
        # 0^0 = 1
        powers = np.where(js[:, None] == 0, 0.0, js[:, None] * log_y[None, :])
    powers = np.where(np.isnan(powers), -np.inf, powers)
    terms = base[None, :] + powers
    top = terms.max(axis=1)
    safe_top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = safe_top + np.log(np.exp(terms - safe_top[:, None]).sum(axis=1))
    return np.where(np.isfinite(top), out, -np.inf)


def mixture_moment(j: int, beta: float, G: DiscreteMixingDistribution) -> float:
    """``p(j; beta, G) = sum_i w_i exp(-beta y_i) y_i^j`` with ``0^0 = 1``."""
    if j < 0:
        raise ValueError("j must be >= 0")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    return float(np.exp(log_mixture_moments([j], beta, G)[0]))


def nb_logpmf(k, params: GammaShapeScale, truncated: bool = False):
    """Log of the gamma-Poisson (negative binomial) pmf at ``k``.

    ``Gamma(k+a) / (Gamma(a) k!) * b^k / (1+b)^(k+a)`` for shape ``a`` and
    scale ``b``; the truncated form conditions on ``k >= 1``.
    """
    a, b = params.alpha, params.beta
    k = np.asarray(k, dtype=float)
    out = gammaln(k + a) - gammaln(a) - gammaln(k + 1) + k * np.log(b) - (k + a) * np.log1p(b)
    if truncated:
        if np.any(k < 1):
            raise ValueError("truncated pmf is defined for k >= 1 only")
        out = out - np.log(-np.expm1(-a * np.log1p(b)))
    return out


def nb_pmf(k, params: GammaShapeScale, truncated: bool = False):
    out = np.exp(nb_logpmf(k, params, truncated))
    return float(out) if np.ndim(out) == 0 else out


def nb_tail_ratio(params: GammaShapeScale) -> float:
    """Limiting ratio ``p(k+1)/p(k)`` of the gamma-Poisson pmf."""
    return params.beta / (1.0 + params.beta)


class SeriesValue(NamedTuple):
    value: float | np.ndarray
    terms: int


def expect_truncated(
    h: Callable[[np.ndarray], np.ndarray],
    pmf: Callable[[np.ndarray], np.ndarray],
    tail_eps: float = DEFAULT_TAIL_EPS,
    tail_ratio: float | None = None,
    chunk: int = 512,
    max_terms: int = MAX_SERIES_TERMS,
) -> SeriesValue:
    """Evaluate ``sum_{x >= 0} h(x) pmf(x)`` until the tail is below ``tail_eps``.

    Both callables receive an int64 array of consecutive ``x`` values; ``h``
    may return shape ``(m,)`` or ``(m, ...)`` for vector-valued expectations.

    Summation stops once the pmf is non-increasing, the current term is below
    ``tail_eps`` and the remaining pmf mass times ``max(1, |h(x)|)`` is below
    ``tail_eps``. When a limiting ratio ``r`` is supplied the mass test is
    replaced by ``pmf(x) max(1, |h(x)|) rho / (1 - rho)`` with ``rho``
    the larger of ``r`` and the current ratio ``pmf(x) / pmf(x - 1)``; this
    holds for pmfs whose successive ratios decrease towards ``r``. Returns the
    sum and the number of terms used.
    """
    if tail_eps <= 0:
        raise ValueError("tail_eps must be > 0")
    total = None
    mass = 0.0
    start = 0
    prev_p = np.nan  # no stop at x = 0
    while start < max_terms:
        x = np.arange(start, min(start + chunk, max_terms), dtype=np.int64)
        p = np.asarray(pmf(x), dtype=float)
        hv = np.asarray(h(x), dtype=float)
        if hv.ndim == 0:
            hv = np.full(x.shape, float(hv))
        terms = hv * p.reshape((-1,) + (1,) * (hv.ndim - 1))
        habs = np.abs(hv).reshape(hv.shape[0], -1).max(axis=1)
        tabs = np.abs(terms).reshape(terms.shape[0], -1).max(axis=1)
        before = np.concatenate([[prev_p], p[:-1]])
        decreasing = p <= before
        ok = decreasing & (tabs < tail_eps)
        if tail_ratio is None:
            remaining = np.maximum(1.0 - (mass + np.cumsum(p)), 0.0)
            ok &= remaining * np.maximum(1.0, habs) < tail_eps
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                local = np.where(before > 0, p / before, 0.0)
            rho = np.maximum(tail_ratio, local)
            with np.errstate(divide="ignore"):
                ok &= (rho < 1) & (p * np.maximum(1.0, habs) * rho / (1.0 - rho) < tail_eps)
        hit = np.flatnonzero(ok)
        stop = hit[0] + 1 if hit.size else x.size
        part = terms[:stop].sum(axis=0)
        total = part if total is None else total + part
        mass += p[:stop].sum()
        prev_p = p[stop - 1]
        if hit.size:
            n = start + stop
            return SeriesValue(total if np.ndim(total) else float(total), int(n))
        start += x.size
    raise NonConvergentSeries(f"tail bound not met within {max_terms} terms")


def normal_quantile(q: float) -> float:
    """Standard normal quantile."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    return _STANDARD_NORMAL.inv_cdf(q)