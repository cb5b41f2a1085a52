"""Value types shared by every estimator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from ..errors import DataError


@dataclass(frozen=True)
class FrequencyOfFrequencies:
    """Sparse map ``k -> n_k``: the number of classes seen exactly ``k`` times.

    Counts may be non-integer so that expected-frequency fixtures run through
    the same code as observed tables. Zero counts are dropped on construction.
    """

    entries: Mapping[int, float]

    def __post_init__(self):
        clean = {}
        for k, c in sorted(self.entries.items()):
            k_int = int(k)
            if k_int != k or k_int < 1:
                raise DataError(f"multiplicity must be a positive integer, got {k!r}")
            c = float(c)
            if not np.isfinite(c) or c < 0:
                raise DataError(f"count for k={k_int} must be finite and >= 0, got {c!r}")
            if c > 0:
                clean[k_int] = c
        object.__setattr__(self, "entries", clean)

    @classmethod
    def from_observations(cls, xs: Iterable[int]) -> "FrequencyOfFrequencies":
        """Tabulate raw per-class counts; zeros are unobservable and ignored."""
        arr = np.asarray(list(xs), dtype=np.int64)
        if arr.size and arr.min() < 0:
            raise DataError("observations must be non-negative")
        ks, counts = np.unique(arr[arr > 0], return_counts=True)
        return cls(dict(zip(ks.tolist(), counts.tolist())))

    @property
    def ks(self) -> np.ndarray:
        return np.fromiter(self.entries.keys(), dtype=np.int64, count=len(self.entries))

    @property
    def counts(self) -> np.ndarray:
        return np.fromiter(self.entries.values(), dtype=float, count=len(self.entries))

    @property
    def d_tilde(self) -> float:
        """Number of observed classes."""
        return float(np.sum(self.counts))

    @property
    def sample_size(self) -> float:
        return float(np.sum(self.ks * self.counts))

    @property
    def max_k(self) -> int:
        return int(self.ks.max()) if self.entries else 0

    def get(self, k: int) -> float:
        return self.entries.get(int(k), 0.0)

    def dense(self, upto: int | None = None) -> np.ndarray:
        """Array ``a`` with ``a[k] = n_k`` for ``k = 0..upto`` (``a[0] = 0``)."""
        upto = self.max_k if upto is None else upto
        out = np.zeros(upto + 1)
        for k, c in self.entries.items():
            if k <= upto:
                out[k] = c
        return out

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class DiscreteMixingDistribution:
    """Finite-support mixing law: atoms ``support[i]`` with mass ``weights[i]``.

    Support points are distinct, ascending and non-negative. Weights must sum
    to one; zero weights are tolerated so that a fixed EM grid keeps its shape.
    """

    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.support, dtype=float).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if y.size == 0 or y.shape != w.shape:
            raise DataError("support and weights must be non-empty and of equal length")
        if not (np.all(np.isfinite(y)) and np.all(y >= 0)):
            raise DataError("support points must be finite and >= 0")
        if np.any(np.diff(y) <= 0):
            raise DataError("support points must be strictly increasing")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise DataError("weights must be finite and >= 0")
        total = w.sum()
        if abs(total - 1.0) > 1e-9:
            raise DataError(f"weights sum to {total!r}, expected 1")
        y.setflags(write=False)
        w = w / total
        w.setflags(write=False)
        object.__setattr__(self, "support", y)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_atoms(cls, atoms: Iterable[tuple[float, float]]) -> "DiscreteMixingDistribution":
        pairs = sorted((float(y), float(w)) for y, w in atoms)
        return cls(np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]))

    @classmethod
    def point_mass(cls, y: float) -> "DiscreteMixingDistribution":
        return cls(np.array([float(y)]), np.array([1.0]))

    @classmethod
    def uniform(cls, support) -> "DiscreteMixingDistribution":
        y = np.asarray(support, dtype=float)
        return cls(y, np.full(y.size, 1.0 / y.size))

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.support.tolist(), self.weights.tolist()))

    def compact(self) -> "DiscreteMixingDistribution":
        """Drop zero-weight atoms."""
        keep = self.weights > 0
        return DiscreteMixingDistribution(self.support[keep], self.weights[keep])

    def rescale(self, c: float) -> "DiscreteMixingDistribution":
        return DiscreteMixingDistribution(self.support * c, self.weights)

    def positive_mass(self) -> float:
        return float(self.weights[self.support > 0].sum())

    def mean(self) -> float:
        return float(self.support @ self.weights)


def geometric_grid(lo: float, hi: float, m: int = 100, include_zero: bool = True) -> np.ndarray:
    """``m`` geometrically spaced points on ``[lo, hi]``, optionally with 0 prepended."""
    if not (0 < lo < hi):
        raise DataError("grid bounds must satisfy 0 < lo < hi")
    g = np.geomspace(lo, hi, m)
    return np.concatenate([[0.0], g]) if include_zero else g


@dataclass(frozen=True)
class GammaShapeScale:
    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise DataError(f"{name} must be finite and > 0, got {v!r}")

    @property
    def p_zero(self) -> float:
        """``P(X = 0) = (1 + beta)^-alpha`` for the gamma-Poisson marginal."""
        return float(np.exp(-self.alpha * np.log1p(self.beta)))

    @property
    def p_positive(self) -> float:
        return float(-np.expm1(-self.alpha * np.log1p(self.beta)))

    def as_tuple(self) -> tuple[float, float]:
        return (self.alpha, self.beta)


@dataclass
class Diagnostics:
    iterations: int = 0
    converged: bool = True
    loglik: float | None = None
    warnings: list[str] = field(default_factory=list)


@dataclass
class EstimateReport:
    """Point estimate with optional standard error and confidence interval.

    ``params`` echoes the inputs that produced the report; ``extras`` holds
    derived auxiliary quantities (fitted parameters, ratios) keyed by name.
    """

    estimate: float
    method: str
    se: float | None = None
    ci: tuple[float, float] | None = None
    level: float | None = None
    diagnostics: Diagnostics = field(default_factory=Diagnostics)
    params: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.se is not None and not self.se >= 0:
            raise DataError(f"se must be >= 0, got {self.se!r}")
        if self.ci is not None:
            lo, hi = self.ci
            if self.level is None or not 0 < self.level < 1:
                raise DataError("a confidence interval needs a level in (0, 1)")
            if not lo <= self.estimate <= hi:
                raise DataError(f"interval [{lo}, {hi}] does not contain {self.estimate}")
            self.ci = (float(lo), float(hi))
