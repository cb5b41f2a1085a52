"""Per-cell and global disclosure risk for sampled contingency tables.

A cell ``j`` has population count ``Y_j`` and sample count ``X_j ~ Bin(Y_j, p_j)``.
The risk of a sample unique is ``E[I{X_j = 1} / Y_j | X_j]``, computed under a
Poisson or negative-binomial population size, or the mu-ARGUS limit of the
latter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence, Union

import numpy as np
from scipy.special import gammaln, xlogy

from .core import Diagnostics, EstimateReport, expect_truncated
from .errors import DataError, EmptySample, InvalidSamplingFraction

SMALL_MU = 1e-12
SMALL_ALPHA = 1e-8

RISK_KINDS = ("inverse-y-at-1", "inverse-y-at-x<=a", "generic")


@dataclass(frozen=True)
class CellRecord:
    """Sample count ``x``, sampling fraction ``p`` and cell probability ``pi``.

    ``pi`` may be left as ``None`` when it is to be fitted. ``alpha``
    optionally overrides the global negative-binomial shape for this cell.
    """

    x: int
    p: float
    pi: float | None = None
    cell_id: str = ""
    alpha: float | None = None

    def __post_init__(self):
        if int(self.x) != self.x or self.x < 0:
            raise DataError(f"cell {self.cell_id!r}: x must be a non-negative integer, got {self.x}")
        object.__setattr__(self, "x", int(self.x))
        if not 0.0 <= self.p <= 1.0:
            raise DataError(f"cell {self.cell_id!r}: p must lie in [0, 1], got {self.p}")
        if self.pi is not None and not 0.0 <= self.pi <= 1.0:
            raise DataError(f"cell {self.cell_id!r}: pi must lie in [0, 1], got {self.pi}")
        if self.alpha is not None and not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise DataError(f"cell {self.cell_id!r}: alpha must be positive and finite")


@dataclass(frozen=True)
class PoissonPopulation:
    lam: float

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise DataError("lambda must be positive and finite")


@dataclass(frozen=True)
class NegBinPopulation:
    """``N ~ NB(alpha, 1 / (1 + beta))``, so cell ``j`` has scale ``beta * pi_j``."""

    alpha: float
    beta: float

    def __post_init__(self):
        for name, v in (("alpha", self.alpha), ("beta", self.beta)):
            if not (v > 0 and math.isfinite(v)):
                raise DataError(f"{name} must be positive and finite")


@dataclass(frozen=True)
class MuArgusPopulation:
    pass


PopulationModel = Union[PoissonPopulation, NegBinPopulation, MuArgusPopulation]


def _poisson_pmf(mu: float):
    def pmf(z):
        return np.exp(xlogy(z, mu) - mu - gammaln(z + 1.0))

    return pmf


def _require_pi(cell: CellRecord) -> float:
    if cell.pi is None:
        raise DataError(f"cell {cell.cell_id!r}: pi is required for this model")
    return cell.pi


def risk_poisson_cell(
    cell: CellRecord,
    lam: float,
    u_kind: str = "inverse-y-at-1",
    a: int = 1,
    u: Callable[[int, np.ndarray], np.ndarray] | None = None,
    degree: int | None = None,
    tail_eps: float = 1e-14,
) -> float:
    """Posterior mean of ``u(X_j, Y_j)`` when ``Y_j - X_j ~ Poisson((1 - p) pi lambda)``.

    ``u_kind`` selects ``I{x = 1} / y`` (closed form), ``I{1 <= x <= a} / y``
    or a generic ``u(x, y)`` evaluated by series; the generic form requires
    a polynomial growth ``degree`` in ``y``.
    """
    if not (lam > 0 and math.isfinite(lam)):
        raise DataError("lambda must be positive and finite")
    mu = (1.0 - cell.p) * _require_pi(cell) * lam
    x = cell.x
    if u_kind == "inverse-y-at-1":
        if x != 1:
            return 0.0
        return 1.0 if mu < SMALL_MU else -math.expm1(-mu) / mu
    if u_kind == "inverse-y-at-x<=a":
        if not 1 <= x <= a:
            return 0.0
        if x == 1:
            return 1.0 if mu < SMALL_MU else -math.expm1(-mu) / mu
        return float(expect_truncated(lambda z: 1.0 / (x + z), _poisson_pmf(mu), tail_eps).value)
    if u_kind == "generic":
        if u is None or degree is None:
            raise DataError("generic risk needs a callable u(x, y) and its growth degree")
        return float(expect_truncated(lambda z: u(x, x + z), _poisson_pmf(mu), tail_eps).value)
    raise DataError(f"unknown risk kind {u_kind!r}; expected one of {RISK_KINDS}")


def risk_nb_cell(cell: CellRecord, alpha: float, beta_j: float) -> float:
    """Closed-form risk ``I{x = 1} / y`` under the negative-binomial population."""
    if not (alpha > 0 and beta_j > 0):
        raise DataError("alpha and beta_j must be positive")
    if cell.p >= 1.0:
        raise InvalidSamplingFraction(f"cell {cell.cell_id!r}: negative-binomial risk needs p < 1")
    if cell.x != 1:
        return 0.0
    p = cell.p
    prefactor = (1.0 + p * beta_j) / ((1.0 - p) * beta_j)
    log_q = math.log1p(p * beta_j) - math.log1p(beta_j)
    if alpha < SMALL_ALPHA:
        integral = -log_q
    else:
        integral = -math.expm1(alpha * log_q) / alpha
    return prefactor * integral


def risk_mu_argus(cell: CellRecord) -> float:
    """``p / (1 - p) * (-log p)`` for a sample unique, else 0."""
    if not 0.0 < cell.p < 1.0:
        raise InvalidSamplingFraction(f"cell {cell.cell_id!r}: mu-ARGUS risk needs 0 < p < 1, got {cell.p}")
    if cell.x != 1:
        return 0.0
    return cell.p / (1.0 - cell.p) * -math.log(cell.p)


@dataclass(frozen=True)
class TwoWayTable:
    """Rectangular grid of cells indexed by ``(row, col)``."""

    cells: tuple[tuple[CellRecord, ...], ...]

    def __post_init__(self):
        cells = tuple(tuple(r) for r in self.cells)
        if not cells or not cells[0]:
            raise DataError("two-way table needs at least one row and one column")
        if any(len(r) != len(cells[0]) for r in cells):
            raise DataError("two-way table must be rectangular")
        object.__setattr__(self, "cells", cells)

    @classmethod
    def from_records(cls, records: Sequence[tuple[str, str, int, float]]) -> "TwoWayTable":
        """Build from ``(row, col, x, p)`` tuples; labels keep first-seen order."""
        rows, cols, lookup = {}, {}, {}
        for r, c, x, p in records:
            rows.setdefault(r, len(rows))
            cols.setdefault(c, len(cols))
            if (r, c) in lookup:
                raise DataError(f"duplicate cell ({r}, {c})")
            lookup[(r, c)] = CellRecord(x=x, p=p, cell_id=f"{r}:{c}")
        missing = [(r, c) for r in rows for c in cols if (r, c) not in lookup]
        if missing:
            raise DataError(f"two-way table is not rectangular; missing cell {missing[0]}")
        return cls(tuple(tuple(lookup[(r, c)] for c in cols) for r in rows))

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.cells), len(self.cells[0])

    def counts(self) -> np.ndarray:
        return np.array([[c.x for c in row] for row in self.cells], dtype=float)

    def flat(self) -> list[CellRecord]:
        return [c for row in self.cells for c in row]

    def fit_independence(self) -> list[CellRecord]:
        """Cells with ``pi = (row total / n) * (column total / n)``."""
        x = self.counts()
        n = x.sum()
        if n <= 0:
            raise EmptySample("cannot fit margins: the sample is empty")
        pi = np.outer(x.sum(axis=1) / n, x.sum(axis=0) / n)
        return [replace(c, pi=float(pi[i, k])) for i, row in enumerate(self.cells) for k, c in enumerate(row)]


def _cells_for(table, fit_pi: str) -> list[CellRecord]:
    if fit_pi == "known":
        return table.flat() if isinstance(table, TwoWayTable) else list(table)
    if fit_pi == "two-way-independence":
        if not isinstance(table, TwoWayTable):
            raise DataError("two-way-independence fitting needs a TwoWayTable")
        return table.fit_independence()
    raise DataError(f"unknown fit_pi {fit_pi!r}; expected 'known' or 'two-way-independence'")


def cell_risks(
    table,
    model: PopulationModel,
    fit_pi: str = "known",
    u_kind: str = "inverse-y-at-1",
    a: int = 1,
) -> list[tuple[str, float]]:
    """Per-cell posterior risks as ``(cell_id, risk)`` pairs."""
    cells = _cells_for(table, fit_pi)
    if u_kind != "inverse-y-at-1" and not isinstance(model, PoissonPopulation):
        raise DataError(f"risk kind {u_kind!r} is only available under the Poisson model")
    out = []
    for c in cells:
        if isinstance(model, PoissonPopulation):
            r = risk_poisson_cell(c, model.lam, u_kind=u_kind, a=a)
        elif isinstance(model, NegBinPopulation):
            alpha = c.alpha if c.alpha is not None else model.alpha
            r = risk_nb_cell(c, alpha, model.beta * _require_pi(c)) if c.x == 1 else 0.0
        elif isinstance(model, MuArgusPopulation):
            r = risk_mu_argus(c)
        else:
            raise DataError(f"unknown population model {model!r}")
        out.append((c.cell_id, r))
    return out


def _expected_population(model: PopulationModel) -> float | None:
    if isinstance(model, PoissonPopulation):
        return model.lam
    if isinstance(model, NegBinPopulation):
        return model.alpha * model.beta
    return None


def estimate_global_risk(
    table,
    model: PopulationModel,
    fit_pi: str = "known",
    u_kind: str = "inverse-y-at-1",
    a: int = 1,
) -> EstimateReport:
    """Sum of per-cell risks; no standard error is attached.

    ``extras["sampling_ratio"]`` compares the expected sample size
    ``sum p_j pi_j E N`` with the observed ``n``; it is reported only.
    """
    cells = _cells_for(table, fit_pi)
    risks = cell_risks(cells, model, "known", u_kind, a)
    n = sum(c.x for c in cells)
    extras: dict = {"n": float(n), "cells": len(cells)}
    size = _expected_population(model)
    if size is not None and n > 0 and all(c.pi is not None for c in cells):
        extras["sampling_ratio"] = math.fsum(c.p * c.pi for c in cells) * size / n
    params = {"model": type(model).__name__, "fit_pi": fit_pi, "u_kind": u_kind}
    params.update({k: float(v) for k, v in vars(model).items()})
    if u_kind == "inverse-y-at-x<=a":
        params["a"] = float(a)
    return EstimateReport(
        estimate=math.fsum(r for _, r in risks),
        method="global-risk",
        diagnostics=Diagnostics(),
        params=params,
        extras=extras,
    )
