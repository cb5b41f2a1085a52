"""EM for zero-truncated Poisson mixtures with per-group scales.

Group ``k`` reports counts ``j >= 1`` with multiplicities ``n_kj``; a count
arises from rate ``beta_k * y`` with ``y ~ G`` on a fixed grid. Everything is
expressed through ``p(j; beta, G) = sum_i w_i exp(-beta y_i) y_i^j``,
evaluated in log space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .core import DiscreteMixingDistribution
from .errors import DataError, InvalidGrid, NumericalUnderflow

UNDERFLOW = 1e-300
TABLE_FLOOR = 1e-250
FLUSH_LOG = -700.0


@dataclass(frozen=True)
class CountData:
    """Flattened ``(group, j, n_kj)`` triples with ``n_kj > 0``."""

    group: np.ndarray
    j: np.ndarray
    n: np.ndarray
    n_groups: int

    def __post_init__(self):
        if np.any(self.j < 1) or np.any(self.n <= 0):
            raise DataError("counts must satisfy j >= 1 and n_kj > 0")
        d = np.bincount(self.group, weights=self.n, minlength=self.n_groups)
        if np.any(d <= 0):
            raise DataError("every group needs at least one observed class")
        object.__setattr__(self, "d_tilde", d)
        object.__setattr__(
            self, "total", np.bincount(self.group, weights=self.n * self.j, minlength=self.n_groups)
        )
        object.__setattr__(self, "log_jfact", gammaln(self.j + 1.0))

    @classmethod
    def from_tables(cls, tables) -> "CountData":
        """Build from a sequence of :class:`FrequencyOfFrequencies`."""
        group, js, ns = [], [], []
        for g, fof in enumerate(tables):
            group.append(np.full(len(fof), g))
            js.append(fof.ks)
            ns.append(fof.counts)
        return cls(
            np.concatenate(group).astype(np.int64),
            np.concatenate(js).astype(np.int64),
            np.concatenate(ns).astype(float),
            len(tables),
        )


def _flushed_exp(z):
    """``exp(z)`` with results below ``exp(-700)`` set to zero; subnormals make matmuls crawl."""
    out = np.exp(np.maximum(z, FLUSH_LOG))
    out[z < FLUSH_LOG] = 0.0
    return out


class _Grid:
    def __init__(self, support: np.ndarray):
        self.y = np.asarray(support, dtype=float)
        if not np.any(self.y > 0):
            raise InvalidGrid("grid needs at least one strictly positive support point")
        with np.errstate(divide="ignore"):
            self.log_y = np.log(self.y)

    def power_terms(self, j: np.ndarray) -> np.ndarray:
        """``j * log y`` with ``0 * log 0 = 0``."""
        with np.errstate(invalid="ignore"):
            out = j[:, None] * self.log_y[None, :]
        return np.where(j[:, None] == 0, 0.0, out)


@dataclass
class EMState:
    betas: np.ndarray
    weights: np.ndarray


class PooledEM:
    """One EM sweep per :meth:`step`: scale update first, then the grid weights.

    Moments ``p(j; beta_k, G)`` for all groups and all needed ``j`` come from
    one matrix product of ``w_i exp(-beta_k y_i)`` (shifted per group) with
    ``(y_i / y_max)^j``; entries that underflow are recomputed by log-sum-exp.
    """

    def __init__(self, data: CountData, support, fix_beta: bool = False):
        self.data = data
        self.grid = _Grid(support)
        self.fix_beta = fix_beta
        y = self.grid.y
        self._log_s = float(np.log(y.max()))
        cols = np.unique(np.concatenate([[0, 1], data.j, data.j + 1]))
        self._cols = cols
        self._col_j = np.searchsorted(cols, data.j)
        self._col_j1 = np.searchsorted(cols, data.j + 1)
        self._pow = self.grid.power_terms(cols.astype(float)) - cols[:, None] * self._log_s
        self._B = _flushed_exp(self._pow).T  # (I, C)
        self._dense_n = np.zeros((data.n_groups, cols.size))
        np.add.at(self._dense_n, (data.group, self._col_j), data.n)
        # table cells any update reads: observed j, j + 1, and j in {0, 1}
        self._needed = np.zeros(self._dense_n.shape, dtype=bool)
        self._needed[data.group, self._col_j] = True
        self._needed[data.group, self._col_j1] = True
        self._needed[:, :2] = True

    def _log_base(self, betas, weights):
        with np.errstate(divide="ignore"):
            lw = np.log(weights)
        return lw[None, :] - betas[:, None] * self.grid.y[None, :]

    def _moment_table(self, betas, weights):
        """``(base, A, shift, P)`` with ``p(j_c; beta_k) = P[k, c] exp(shift_k + j_c log y_max)``."""
        base = self._log_base(betas, weights)
        shift = base.max(axis=1)
        A = _flushed_exp(base - shift[:, None])
        P = A @ self._B
        return base, A, shift, P

    def _log_p(self, base, shift, P):
        """Log moments for every ``(group, column)``; exact fallback where ``P`` underflows."""
        with np.errstate(divide="ignore"):
            out = np.log(P) + shift[:, None] + self._cols[None, :] * self._log_s
        bad = self._needed & ~(P > TABLE_FLOOR)
        if np.any(bad):
            kk, cc = np.nonzero(bad)
            terms = self._log_terms(base, kk, cc)
            top = terms.max(axis=1)
            top = np.where(np.isfinite(top), top, 0.0)
            with np.errstate(divide="ignore"):
                out[kk, cc] = top + np.log(np.exp(terms - top[:, None]).sum(axis=1))
        return out

    def _log_terms(self, base, kk, cc):
        """``log(w_i exp(-beta_k y_i) y_i^j)`` for selected ``(group, column)`` pairs."""
        return base[kk] + self._pow[cc] + self._cols[cc, None] * self._log_s

    def log_moments(self, betas, weights):
        """``log p(j_e)``, ``log p(j_e + 1)``, ``log p(0)``, ``log p(1)``."""
        base, _, shift, P = self._moment_table(betas, weights)
        L = self._log_p(base, shift, P)
        g = self.data.group
        return L[g, self._col_j], L[g, self._col_j1], L[:, 0], L[:, 1]

    def _log_observed(self, lp0):
        q = -np.expm1(lp0)
        if np.any(q < UNDERFLOW):
            raise NumericalUnderflow("1 - p(0; beta_k, G) underflows for some group")
        return np.log(q)

    def loglik(self, betas, weights) -> float:
        base, _, shift, P = self._moment_table(betas, weights)
        L = self._log_p(base, shift, P)
        return self._loglik_from(betas, L[self.data.group, self._col_j], L[:, 0])

    def _loglik_from(self, betas, lpj, lp0) -> float:
        d = self.data
        lq = self._log_observed(lp0)
        terms = d.n * (lpj + d.j * np.log(betas)[d.group] - d.log_jfact)
        return float(np.sum(terms) - np.sum(d.d_tilde * lq))

    def beta_update(self, betas, weights) -> np.ndarray:
        d = self.data
        lpj, lpj1, lp0, lp1 = self.log_moments(betas, weights)
        lq = self._log_observed(lp0)
        post_mean = np.bincount(d.group, weights=d.n * np.exp(lpj1 - lpj), minlength=d.n_groups)
        unseen = d.d_tilde * np.exp(lp1 - lq)
        return d.total / (post_mean + unseen)

    def weight_update(self, betas, weights) -> np.ndarray:
        d = self.data
        base, A, shift, P = self._moment_table(betas, weights)
        L = self._log_p(base, shift, P)
        lq = self._log_observed(L[:, 0])
        # n_kj / p(j) against the shifted table A @ B; tiny entries go the exact route
        live = self._dense_n > 0
        good = live & (P > TABLE_FLOOR)
        scaled = np.divide(self._dense_n, P, out=np.zeros_like(P), where=good)
        seen = np.einsum("ki,ik->i", A, self._B @ scaled.T)
        if not np.array_equal(good, live):
            kk, cc = np.nonzero(live & ~good)
            terms = np.exp(self._log_terms(base, kk, cc) - L[kk, cc, None])
            seen = seen + (self._dense_n[kk, cc, None] * terms).sum(axis=0)
        unseen = (d.d_tilde * np.exp(shift - lq)) @ A
        norm = np.sum(d.d_tilde / np.exp(lq))
        w = (seen + unseen) / norm
        return w / w.sum()

    def step(self, state: EMState) -> EMState:
        betas = state.betas if self.fix_beta else self.beta_update(state.betas, state.weights)
        weights = self.weight_update(betas, state.weights)
        return EMState(betas, weights)

    def d_hats(self, state: EMState) -> np.ndarray:
        """``d_tilde_k * G(y > 0) / int (1 - exp(-beta_k y)) dG``."""
        y, w = self.grid.y, state.weights
        seen = -np.expm1(-state.betas[:, None] * y[None, :]) @ w
        return self.data.d_tilde * w[y > 0].sum() / seen


def mixing(support, weights) -> DiscreteMixingDistribution:
    return DiscreteMixingDistribution(np.asarray(support, float), np.asarray(weights, float))


ASCENT_TOL = 1e-9
_LOG_FLOOR = np.log(1e-300)


@dataclass
class EMFit:
    state: EMState
    trace: list
    iterations: int
    converged: bool
    warnings: list


def _safe_step(em: PooledEM, state: EMState, ll: float, warnings: list) -> tuple[EMState, float]:
    """Plain EM step; halves the scale move (in log space) if ascent fails."""
    new = em.step(state)
    ll_new = em.loglik(new.betas, new.weights)
    if ll_new >= ll - ASCENT_TOL or em.fix_beta:
        return new, ll_new
    target = np.log(new.betas)
    for _ in range(30):
        target = 0.5 * (target + np.log(state.betas))
        betas = np.exp(target)
        new = EMState(betas, em.weight_update(betas, state.weights))
        ll_new = em.loglik(new.betas, new.weights)
        if ll_new >= ll - ASCENT_TOL:
            break
    if "damped" not in warnings:
        warnings.append("damped")
    return new, ll_new


def _pack(em, state):
    lw = np.maximum(np.log(np.maximum(state.weights, 1e-300)), _LOG_FLOOR)
    return lw if em.fix_beta else np.concatenate([np.log(state.betas), lw])


def _unpack(em, theta, n_groups, betas):
    if em.fix_beta:
        lw = theta
    else:
        betas, lw = np.exp(np.clip(theta[:n_groups], -700.0, 700.0)), theta[n_groups:]
    lw = np.maximum(lw, _LOG_FLOOR)
    w = np.exp(lw - lw.max())
    return EMState(betas, w / w.sum())


def fit_em(
    em: PooledEM,
    state: EMState,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    accelerate: bool = True,
) -> EMFit:
    """Iterate EM until the relative log-likelihood change is below ``tol``.

    With ``accelerate`` each iteration is a squared-extrapolation (SQUAREM)
    cycle of two EM steps; the extrapolated point is kept only when it does
    not lower the likelihood below the plain double step, so the trace is
    monotone either way. ``iterations`` counts EM-map evaluations.
    """
    warnings: list = []
    ll = em.loglik(state.betas, state.weights)
    trace = [ll]
    evals = 0
    K = em.data.n_groups
    while evals < max_iter:
        s1, ll1 = _safe_step(em, state, ll, warnings)
        evals += 1
        if not accelerate or evals + 2 > max_iter:
            new, ll_new = s1, ll1
        else:
            s2, ll2 = _safe_step(em, s1, ll1, warnings)
            evals += 1
            new, ll_new = s2, ll2
            t0, t1, t2 = _pack(em, state), _pack(em, s1), _pack(em, s2)
            r = t1 - t0
            v = t2 - 2 * t1 + t0
            nv = np.linalg.norm(v)
            if nv > 0 and np.all(np.isfinite(v)):
                step = min(-np.linalg.norm(r) / nv, -1.0)
                while step < -1.0:
                    cand = _unpack(em, t0 - 2 * step * r + step * step * v, K, s2.betas)
                    try:
                        # a wild extrapolation may overflow; it is rejected below
                        with np.errstate(over="ignore", invalid="ignore"):
                            ll_c = em.loglik(cand.betas, cand.weights)
                        if np.isfinite(ll_c) and ll_c >= ll2:
                            cand_next, ll_cn = _safe_step(em, cand, ll_c, warnings)
                            evals += 1
                            if ll_cn >= ll2:
                                new, ll_new = cand_next, ll_cn
                                break
                    except NumericalUnderflow:
                        pass
                    step = (step - 1.0) / 2.0
                    if step > -1.01:
                        break
        trace.append(ll_new)
        done = abs(ll_new - ll) <= tol * abs(ll_new)
        state, ll = new, ll_new
        if done:
            return EMFit(state, trace, evals, True, warnings)
    return EMFit(state, trace, evals, False, warnings + ["NonConvergence"])
