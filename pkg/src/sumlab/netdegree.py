"""Node out-degrees from a sample of routed source-destination paths.

Sampling paths with replacement from a routing table reveals each link
``k -> l`` with a count ``X_kl``. Links never traversed by the sample are
invisible, so observed degrees undercount. The pooled estimator treats the
link counts of node ``k`` as Poisson with rate ``beta_k * y``, ``y ~ G`` shared
by all nodes, and fits ``(beta, G)`` by EM on the zero-truncated likelihood.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    Diagnostics,
    DiscreteMixingDistribution,
    EstimateReport,
    FrequencyOfFrequencies,
    as_generator,
    geometric_grid,
)
from .errors import DataError, EmptyTable, SumlabError
from .mixture_em import CountData, EMState, PooledEM, fit_em
from .species import chao_lower, fit_gamma_mle


@dataclass(frozen=True)
class RoutingTable:
    """Directed paths over nodes ``1..node_count``."""

    paths: tuple[tuple[int, ...], ...]
    node_count: int

    def __post_init__(self):
        paths = tuple(tuple(int(v) for v in p) for p in self.paths)
        if self.node_count < 0:
            raise DataError("node_count must be >= 0")
        for i, p in enumerate(paths):
            if len(p) < 2:
                raise DataError(f"path {i + 1} has fewer than two nodes")
            if any(a == b for a, b in zip(p, p[1:])):
                raise DataError(f"path {i + 1} repeats a node consecutively")
            if min(p) < 1 or max(p) > self.node_count:
                raise DataError(f"path {i + 1} uses a node outside 1..{self.node_count}")
        object.__setattr__(self, "paths", paths)

    @classmethod
    def from_paths(cls, paths: Iterable[Sequence[int]], node_count: int | None = None) -> "RoutingTable":
        paths = [tuple(p) for p in paths]
        if node_count is None:
            node_count = max((max(p) for p in paths if p), default=0)
        return cls(tuple(paths), node_count)

    def __len__(self):
        return len(self.paths)

    def link_usage(self) -> Counter:
        """``D(k, l)``: how many paths traverse link ``k -> l`` (with repeats)."""
        use: Counter = Counter()
        for p in self.paths:
            use.update(zip(p, p[1:]))
        return use

    def transpose(self) -> "RoutingTable":
        return RoutingTable(tuple(p[::-1] for p in self.paths), self.node_count)


def true_out_degrees(rt: RoutingTable, in_degree: bool = False) -> np.ndarray:
    """Distinct outgoing (or incoming) links per node; index ``k - 1`` holds node ``k``."""
    deg = np.zeros(rt.node_count, dtype=np.int64)
    for k, l in rt.link_usage():
        deg[(l if in_degree else k) - 1] += 1
    return deg


@dataclass(frozen=True)
class LinkCounts:
    """Sparse link counts ``X_kl`` from a sample of ``sample_size`` paths."""

    counts: Mapping[tuple[int, int], int]
    sample_size: int
    node_count: int

    def __post_init__(self):
        clean = {}
        for (k, l), c in sorted(self.counts.items()):
            if c < 0 or int(c) != c:
                raise DataError(f"link ({k}, {l}) has invalid count {c!r}")
            if not (1 <= k <= self.node_count and 1 <= l <= self.node_count):
                raise DataError(f"link ({k}, {l}) uses a node outside 1..{self.node_count}")
            if c > 0:
                clean[(int(k), int(l))] = int(c)
        object.__setattr__(self, "counts", clean)

    def get(self, k: int, l: int) -> int:
        return self.counts.get((k, l), 0)


def simulate_sd_sample(rt: RoutingTable, n: int, rng, weights=None) -> LinkCounts:
    """Draw ``n`` paths i.i.d. from ``rt`` (uniform unless ``weights`` given) and count links.

    Draws are sequential, so a larger sample from the same stream extends a
    smaller one.
    """
    if n < 0:
        raise DataError("sample size must be >= 0")
    if n == 0:
        return LinkCounts({}, 0, rt.node_count)
    if len(rt) == 0:
        raise EmptyTable("cannot sample from an empty routing table")
    gen = as_generator(rng)
    if weights is None:
        idx = gen.integers(0, len(rt), size=n)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(rt),) or np.any(w < 0) or w.sum() <= 0:
            raise DataError("path weights must be non-negative, one per path, not all zero")
        idx = gen.choice(len(rt), size=n, p=w / w.sum())
    mult = np.bincount(idx, minlength=len(rt))
    counts: Counter = Counter()
    for j in np.flatnonzero(mult):
        p = rt.paths[j]
        for link in zip(p, p[1:]):
            counts[link] += int(mult[j])
    return LinkCounts(dict(counts), n, rt.node_count)


@dataclass(frozen=True)
class NodeFrequencyTables:
    """Per-node frequency-of-frequencies of link counts.

    ``unobserved`` holds ``s_k``, the number of used links of node ``k`` that
    the sample missed; it is only known when the routing table is supplied.
    """

    tables: tuple[FrequencyOfFrequencies, ...]
    unobserved: np.ndarray | None = None

    @property
    def node_count(self) -> int:
        return len(self.tables)

    @property
    def d_tilde(self) -> np.ndarray:
        return np.array([t.d_tilde for t in self.tables])

    def table(self, k: int) -> FrequencyOfFrequencies:
        return self.tables[k - 1]


def tabulate(link_counts: LinkCounts, rt: RoutingTable | None = None) -> NodeFrequencyTables:
    """Frequency tables per source node; with ``rt``, also the missed-link counts."""
    per_node: list[list[int]] = [[] for _ in range(link_counts.node_count)]
    for (k, _), c in link_counts.counts.items():
        per_node[k - 1].append(c)
    tables = tuple(FrequencyOfFrequencies.from_observations(xs) for xs in per_node)
    unobserved = None
    if rt is not None:
        if rt.node_count != link_counts.node_count:
            raise DataError("routing table and link counts disagree on node_count")
        unobserved = np.zeros(rt.node_count, dtype=np.int64)
        for k, l in rt.link_usage():
            if link_counts.get(k, l) == 0:
                unobserved[k - 1] += 1
    return NodeFrequencyTables(tables, unobserved)


def _tables_of(tables) -> list[FrequencyOfFrequencies]:
    if isinstance(tables, NodeFrequencyTables):
        return list(tables.tables)
    return list(tables)


def em_step(state: tuple[np.ndarray, DiscreteMixingDistribution], tables) -> tuple[np.ndarray, DiscreteMixingDistribution]:
    """One EM sweep on ``(betas, G)``: scales first, then ``G`` using the new scales.

    Every table must be non-empty; nodes without observed links carry no
    information and are excluded by the caller.
    """
    betas, G = state
    tabs = _tables_of(tables)
    if any(len(t) == 0 for t in tabs):
        raise DataError("em_step needs every node to have at least one observed link")
    em = PooledEM(CountData.from_tables(tabs), G.support)
    new = em.step(EMState(np.asarray(betas, dtype=float), G.weights))
    return new.betas, DiscreteMixingDistribution(G.support, new.weights)


def conditional_loglik(state: tuple[np.ndarray, DiscreteMixingDistribution], tables) -> float:
    """Zero-truncated log-likelihood of the link counts at ``(betas, G)``."""
    betas, G = state
    em = PooledEM(CountData.from_tables(_tables_of(tables)), G.support)
    return em.loglik(np.asarray(betas, dtype=float), G.weights)


def degree_estimates(betas, G: DiscreteMixingDistribution, d_tilde) -> np.ndarray:
    """``d_tilde_k G(y > 0) / int (1 - exp(-beta_k y)) dG`` per node."""
    betas = np.asarray(betas, dtype=float)
    seen = -np.expm1(-betas[:, None] * G.support[None, :]) @ G.weights
    return np.asarray(d_tilde, dtype=float) * G.positive_mass() / seen


def default_degree_grid(tables, m: int = 100) -> np.ndarray:
    """Zero plus ``m`` geometric points on ``[0.01 q, 100 Q]`` (min/max node means)."""
    means = [t.sample_size / t.d_tilde for t in _tables_of(tables) if len(t)]
    if not means:
        raise DataError("no node has an observed link")
    return geometric_grid(0.01 * min(means), 100 * max(means), m)


@dataclass
class PooledFit:
    """Pooled fit; excluded nodes (no observed links) have ``beta = nan`` and ``d_hat = 0``."""

    betas: np.ndarray
    G_hat: DiscreteMixingDistribution
    loglik_trace: list
    d_hats: np.ndarray
    diagnostics: Diagnostics = field(default_factory=Diagnostics)


def fit_pooled_npmle(
    tables,
    grid=None,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    accelerate: bool = True,
) -> PooledFit:
    """Pooled zero-truncated NPMLE of ``(beta, G)`` and the implied degrees.

    Starts from ``beta_k = 1`` and uniform weights on the grid. ``(beta, G)``
    is only determined up to the rescaling ``(beta / c, G(c .))``; the degree
    estimates and the likelihood do not depend on it.
    """
    tabs = _tables_of(tables)
    live = np.array([len(t) > 0 for t in tabs], dtype=bool)
    support = default_degree_grid(tabs) if grid is None else np.unique(np.asarray(grid, dtype=float))
    if support.size == 0 or np.any(support < 0):
        raise DataError("grid must be non-empty and non-negative")
    em = PooledEM(CountData.from_tables([t for t, ok in zip(tabs, live) if ok]), support)
    start = EMState(np.ones(int(live.sum())), np.full(support.size, 1.0 / support.size))
    fit = fit_em(em, start, tol=tol, max_iter=max_iter, accelerate=accelerate)
    warnings = list(fit.warnings)
    if not live.all():
        warnings.append(f"{int((~live).sum())} node(s) without observed links get d_hat = 0")
    betas = np.full(len(tabs), np.nan)
    betas[live] = fit.state.betas
    d_hats = np.zeros(len(tabs))
    d_hats[live] = em.d_hats(fit.state)
    G = DiscreteMixingDistribution(support, fit.state.weights)
    diag = Diagnostics(
        iterations=fit.iterations,
        converged=fit.converged,
        loglik=fit.trace[-1],
        warnings=warnings,
    )
    return PooledFit(betas, G, list(fit.trace), d_hats, diag)


DEGREE_METHODS = ("pooled-npmle", "per-node-gamma", "chao", "observed")


@dataclass
class DegreeEstimates:
    """Per-node reports (``None`` where the estimator failed) and the collected errors."""

    reports: list
    errors: dict
    pooled: PooledFit | None = None

    def estimates(self) -> np.ndarray:
        return np.array([np.nan if r is None else r.estimate for r in self.reports])


def _empty_node_report(method: str) -> EstimateReport:
    return EstimateReport(
        estimate=0.0,
        method=method,
        diagnostics=Diagnostics(warnings=["no observed links"]),
        extras={"d_tilde": 0.0},
    )


def estimate_degrees(tables, method: str = "pooled-npmle", **opts) -> DegreeEstimates:
    """Estimate every node's out-degree with ``method``.

    Failures of per-node estimators are recorded in ``errors`` keyed by node
    id; the remaining nodes are still estimated.
    """
    if method not in DEGREE_METHODS:
        raise DataError(f"unknown degree method {method!r}; expected one of {DEGREE_METHODS}")
    tabs = _tables_of(tables)
    reports: list = []
    errors: dict = {}
    pooled = None
    if method == "pooled-npmle":
        pooled = fit_pooled_npmle(tabs, **opts)
        for k, t in enumerate(tabs, start=1):
            if len(t) == 0:
                reports.append(_empty_node_report(method))
                continue
            reports.append(
                EstimateReport(
                    estimate=float(pooled.d_hats[k - 1]),
                    method=method,
                    diagnostics=pooled.diagnostics,
                    extras={"d_tilde": t.d_tilde, "beta": float(pooled.betas[k - 1])},
                )
            )
        return DegreeEstimates(reports, errors, pooled)
    for k, t in enumerate(tabs, start=1):
        if len(t) == 0:
            reports.append(_empty_node_report(method))
            continue
        try:
            if method == "observed":
                rep = EstimateReport(estimate=t.d_tilde, method=method, extras={"d_tilde": t.d_tilde})
            elif method == "chao":
                rep = chao_lower(t, **opts)
            else:
                rep = fit_gamma_mle(t, **opts).report
        except SumlabError as exc:
            errors[k] = exc
            rep = None
        reports.append(rep)
    return DegreeEstimates(reports, errors, pooled)
