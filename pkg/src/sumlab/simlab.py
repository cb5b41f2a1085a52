"""Monte Carlo lab: data generators and a replicate runner.

Every replicate ``r`` of a scenario draws from its own stream ``(seed, r)``,
so results do not depend on execution order or on the number of worker
processes. Truth is recomputed from the latent draws of each replicate.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import (
    DiscreteMixingDistribution,
    FrequencyOfFrequencies,
    GammaShapeScale,
    RngContract,
    as_generator,
)
from .disclosure import CellRecord, NegBinPopulation, PoissonPopulation
from .errors import AllReplicatesFailed, DataError, SumlabError
from .netdegree import RoutingTable, fit_pooled_npmle, true_out_degrees


@dataclass(frozen=True)
class ExponentialPrior:
    """Rate ``lambda`` with density ``tau exp(-tau lambda)``."""

    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise DataError("tau must be > 0")


@dataclass
class PoissonMixtureSample:
    x: np.ndarray
    lam: np.ndarray
    y: np.ndarray


def _draw_rates(G, size: int, gen: np.random.Generator) -> np.ndarray:
    if isinstance(G, ExponentialPrior):
        return gen.exponential(1.0 / G.tau, size=size)
    if isinstance(G, GammaShapeScale):
        return gen.gamma(G.alpha, G.beta, size=size)
    if isinstance(G, DiscreteMixingDistribution):
        return G.support[gen.choice(G.support.size, size=size, p=G.weights)]
    raise DataError(f"unsupported mixing distribution {type(G).__name__}")


def gen_poisson_mixture(n: int, G, rng) -> PoissonMixtureSample:
    """``lambda_j ~ G``; ``X_j`` and ``Y_j`` independent Poisson(``lambda_j``) given ``lambda_j``."""
    if n < 1:
        raise DataError("n must be >= 1")
    gen = as_generator(rng)
    lam = _draw_rates(G, n, gen)
    x = gen.poisson(lam)
    y = gen.poisson(lam)
    return PoissonMixtureSample(x, lam, y)


@dataclass
class SpeciesSample:
    fof: FrequencyOfFrequencies
    d: int
    counts: np.ndarray


def gen_species(d: int, G, rng) -> SpeciesSample:
    """``d`` classes with rates ``theta_j ~ G`` and counts ``X_j ~ Poisson(theta_j)``."""
    if d < 1:
        raise DataError("d must be >= 1")
    gen = as_generator(rng)
    x = gen.poisson(_draw_rates(G, d, gen))
    return SpeciesSample(FrequencyOfFrequencies.from_observations(x), d, x)


@dataclass
class RoutingModel:
    table: RoutingTable
    degrees: np.ndarray


def gen_routing_model(
    K: int,
    degree_spec: str = "star",
    n_paths: int = 0,
    path_length: int = 3,
    rng=None,
) -> RoutingModel:
    """Routing table with known out-degrees.

    ``star``: paths ``1 -> l`` for every leaf ``l``. ``random``: ``n_paths``
    random walks of ``path_length`` nodes without immediate repeats.
    """
    if K < 1:
        raise DataError("K must be >= 1")
    if degree_spec == "star":
        paths = [(1, leaf) for leaf in range(2, K + 1)]
    elif degree_spec == "random":
        if K < 2 or path_length < 2:
            raise DataError("random paths need K >= 2 and path_length >= 2")
        gen = as_generator(0 if rng is None else rng)
        paths = []
        for _ in range(n_paths):
            walk = [int(gen.integers(1, K + 1))]
            while len(walk) < path_length:
                step = int(gen.integers(1, K))
                walk.append(step if step < walk[-1] else step + 1)
            paths.append(tuple(walk))
    else:
        raise DataError(f"unknown degree spec {degree_spec!r}; expected 'star' or 'random'")
    rt = RoutingTable(tuple(paths), K)
    return RoutingModel(rt, true_out_degrees(rt))


@dataclass
class NodeLinkSample:
    """Per-node link-count tables drawn from the pooled model, with the truth."""

    tables: list
    degrees: np.ndarray
    betas: np.ndarray


def gen_node_link_counts(
    K: int,
    G: GammaShapeScale,
    beta_range: tuple[float, float],
    mean_degree: float,
    rng,
) -> NodeLinkSample:
    """Node ``k`` has ``d_k = 1 + Poisson(mean_degree)`` links with counts ``Poisson(beta_k y)``.

    ``y ~ G`` is shared by all nodes; ``beta_k`` is log-uniform on ``beta_range``.
    """
    lo, hi = beta_range
    if not 0 < lo <= hi:
        raise DataError("beta_range must satisfy 0 < lo <= hi")
    gen = as_generator(rng)
    degrees = 1 + gen.poisson(mean_degree, size=K)
    betas = np.exp(gen.uniform(math.log(lo), math.log(hi), size=K))
    tables = []
    for d, b in zip(degrees, betas):
        x = gen.poisson(b * gen.gamma(G.alpha, G.beta, size=d))
        tables.append(FrequencyOfFrequencies.from_observations(x))
    return NodeLinkSample(tables, degrees, betas)


@dataclass
class DisclosureSample:
    cells: list
    population: np.ndarray


def gen_disclosure(J: int, pi, p, model, rng) -> DisclosureSample:
    """Population ``Y ~ Multinomial(N, pi)`` with random ``N``; sample ``X_j ~ Bin(Y_j, p_j)``."""
    if J < 1:
        raise DataError("J must be >= 1")
    pi = np.broadcast_to(np.asarray(pi, dtype=float), (J,))
    p = np.broadcast_to(np.asarray(p, dtype=float), (J,))
    if abs(pi.sum() - 1.0) > 1e-9:
        raise DataError("cell probabilities must sum to 1")
    gen = as_generator(rng)
    if isinstance(model, PoissonPopulation):
        N = gen.poisson(model.lam)
    elif isinstance(model, NegBinPopulation):
        N = gen.negative_binomial(model.alpha, 1.0 / (1.0 + model.beta))
    else:
        raise DataError("disclosure generator needs a Poisson or negative-binomial population")
    Y = gen.multinomial(N, pi / pi.sum())
    X = gen.binomial(Y, p)
    cells = [CellRecord(int(x), float(pj), float(q), cell_id=str(j + 1)) for j, (x, pj, q) in enumerate(zip(X, p, pi))]
    return DisclosureSample(cells, Y)


# ---------------------------------------------------------------- scenarios

GENERATORS = ("poisson-mixture", "species", "node-degrees")
SIZE_KEYS = {"poisson-mixture": "n", "species": "d", "node-degrees": "K"}


@dataclass(frozen=True)
class Scenario:
    """A generator, an estimator, a size and ``replicates`` seeded runs."""

    generator: str
    estimator: str
    size: int
    params: dict = field(default_factory=dict)
    replicates: int = 100
    seed: int = 0
    level: float = 0.95

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise DataError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if self.estimator not in ESTIMATORS.get(self.generator, ()):
            raise DataError(f"estimator {self.estimator!r} is not available for {self.generator!r}")
        if self.replicates < 1:
            raise DataError("replicates must be >= 1")
        if self.size < 1:
            raise DataError("size must be >= 1")
        if not 0 < self.level < 1:
            raise DataError("level must lie in (0, 1)")
        if self.generator == "poisson-mixture":
            from .poisson_eb import parse_utility

            parse_utility(self.params.get("u", "one"))

    def to_dict(self) -> dict:
        return {
            "generator": self.generator,
            "estimator": self.estimator,
            SIZE_KEYS[self.generator]: self.size,
            "params": dict(self.params),
            "replicates": self.replicates,
            "seed": self.seed,
            "level": self.level,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        try:
            gen = data["generator"]
            size_key = SIZE_KEYS.get(gen)
            if size_key is None:
                raise DataError(f"unknown generator {gen!r}")
            return cls(
                generator=gen,
                estimator=data["estimator"],
                size=int(data[size_key]),
                params=dict(data.get("params", {})),
                replicates=int(data.get("replicates", 100)),
                seed=int(data.get("seed", 0)),
                level=float(data.get("level", 0.95)),
            )
        except KeyError as exc:
            raise DataError(f"scenario is missing field {exc.args[0]!r}") from None


@dataclass
class Replicate:
    rep: int
    estimate: float
    truth: float
    se: float | None = None
    ci: tuple[float, float] | None = None
    extras: dict = field(default_factory=dict)

    @property
    def covered(self) -> bool | None:
        if self.ci is None:
            return None
        return self.ci[0] <= self.truth <= self.ci[1]


def _mixing_from_params(params: dict):
    if "tau" in params:
        return ExponentialPrior(float(params["tau"]))
    if "atoms" in params:
        return DiscreteMixingDistribution.from_atoms([tuple(a) for a in params["atoms"]])
    if "alpha" in params and "beta" in params:
        return GammaShapeScale(float(params["alpha"]), float(params["beta"]))
    raise DataError("mixing distribution needs 'tau', 'atoms' or 'alpha' and 'beta'")


def _eb_replicate(sc: Scenario, gen: np.random.Generator) -> Replicate:
    from .poisson_eb import TargetKind, parse_utility, plugin_sum, uv_sum

    params = sc.params
    u = parse_utility(params.get("u", "one"))
    target = params.get("target", "lambda")
    sample = gen_poisson_mixture(sc.size, _mixing_from_params(params), gen)
    weight = sample.lam if target == "lambda" else sample.y
    truth = math.fsum(weight * u(sample.x))
    if sc.estimator == "oracle":
        return Replicate(0, truth, truth, 0.0, (truth, truth))
    if sc.estimator == "uv":
        rep = uv_sum(sample.x, u)
        return Replicate(0, rep.estimate, truth)
    kind = TargetKind.lambda_weighted() if target == "lambda" else TargetKind.next_count()
    rep = plugin_sum(sample.x, u, target=kind, level=sc.level)
    return Replicate(0, rep.estimate, truth, rep.se, rep.ci)


def _species_replicate(sc: Scenario, gen: np.random.Generator) -> Replicate:
    from .species import chao_lower, fit_gamma_mle

    sample = gen_species(sc.size, _mixing_from_params(sc.params), gen)
    truth = float(sample.d)
    if sc.estimator == "oracle":
        return Replicate(0, truth, truth, 0.0, (truth, truth))
    if sc.estimator == "chao":
        return Replicate(0, chao_lower(sample.fof).estimate, truth)
    fit = fit_gamma_mle(sample.fof, level=sc.level, cross_check=False)
    return Replicate(0, fit.d_hat, truth, fit.se, fit.report.ci)


# Node-degree scenario defaults; the EM is stopped after a fixed budget of map evaluations.
DEGREE_DEFAULTS = {"alpha": 5.0, "beta": 0.2, "beta_range": (1.0, 10.0), "mean_degree": 50.0, "max_iter": 400}


def _degree_replicate(sc: Scenario, gen: np.random.Generator) -> Replicate:
    p = {**DEGREE_DEFAULTS, **sc.params}
    G = GammaShapeScale(float(p["alpha"]), float(p["beta"]))
    sample = gen_node_link_counts(sc.size, G, tuple(p["beta_range"]), float(p["mean_degree"]), gen)
    d = sample.degrees.astype(float)
    d_obs = np.array([t.d_tilde for t in sample.tables])
    if sc.estimator == "observed":
        d_hat = d_obs
    else:
        opts = {k: p[k] for k in ("tol", "max_iter") if k in p}
        d_hat = fit_pooled_npmle(sample.tables, **opts).d_hats
    extras = {
        "abs_error": math.fsum(np.abs(d_hat - d)),
        "observed_abs_error": math.fsum(np.abs(d_obs - d)),
    }
    return Replicate(0, math.fsum(d_hat), math.fsum(d), extras=extras)


ESTIMATORS: dict[str, tuple[str, ...]] = {
    "poisson-mixture": ("plugin", "uv", "oracle"),
    "species": ("fit-gamma", "chao", "oracle"),
    "node-degrees": ("pooled-npmle", "observed"),
}

_RUNNERS: dict[str, Callable] = {
    "poisson-mixture": _eb_replicate,
    "species": _species_replicate,
    "node-degrees": _degree_replicate,
}


def run_one(sc: Scenario, r: int) -> Replicate | str:
    """Replicate ``r`` on stream ``(seed, r)``; an estimator failure is returned as its message."""
    gen = RngContract(sc.seed, r).generator()
    try:
        rec = _RUNNERS[sc.generator](sc, gen)
    except SumlabError as exc:
        return f"{type(exc).__name__}: {exc}"
    rec.rep = r
    return rec


def _run_chunk(args) -> list:
    sc, reps = args
    return [run_one(sc, r) for r in reps]


@dataclass
class ReplicateSummary:
    scenario: Scenario
    records: list
    failures: list

    @property
    def scale(self) -> float:
        return math.sqrt(self.scenario.size)

    def errors(self) -> np.ndarray:
        return np.array([r.estimate - r.truth for r in self.records])

    def mean_error(self) -> float:
        e = self.errors()
        return math.fsum(e) / e.size

    def error_variance(self) -> float:
        """Sample variance of ``(estimate - truth) / sqrt(size)``."""
        e = self.errors() / self.scale
        if e.size < 2:
            return 0.0
        m = math.fsum(e) / e.size
        return math.fsum((e - m) ** 2) / (e.size - 1)


def run_replicates(sc: Scenario, workers: int = 1) -> ReplicateSummary:
    """Run all replicates, in ``workers`` processes when ``workers > 1``.

    Failed replicates are excluded from the summary and listed in
    ``failures``; if every replicate fails :class:`AllReplicatesFailed` is
    raised.
    """
    reps = list(range(sc.replicates))
    if workers <= 1:
        results = [run_one(sc, r) for r in reps]
    else:
        chunks = [reps[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, [(sc, c) for c in chunks]))
        by_rep = {}
        for chunk, part in zip(chunks, parts):
            by_rep.update(zip(chunk, part))
        results = [by_rep[r] for r in reps]
    records = [x for x in results if isinstance(x, Replicate)]
    failures = [(r, x) for r, x in zip(reps, results) if isinstance(x, str)]
    if not records:
        raise AllReplicatesFailed(f"all {sc.replicates} replicates failed; first: {failures[0][1]}")
    return ReplicateSummary(sc, records, failures)


def coverage_report(summary: ReplicateSummary, level: float | None = None) -> dict:
    """Fraction of replicate intervals containing the truth, with its binomial SE."""
    flags = [r.covered for r in summary.records if r.covered is not None]
    if not flags:
        raise DataError("no replicate produced a confidence interval")
    cov = sum(flags) / len(flags)
    return {
        "coverage": cov,
        "covered": int(sum(flags)),
        "replicates": len(flags),
        "failures": len(summary.failures),
        "level": summary.scenario.level if level is None else level,
        "binomial_se": math.sqrt(cov * (1 - cov) / len(flags)),
    }


def variance_check(summary: ReplicateSummary, theoretical_sd: float) -> float:
    """Empirical ``Var((estimate - truth) / sqrt(size))`` over ``theoretical_sd ** 2``."""
    if not theoretical_sd > 0:
        raise DataError("theoretical sd must be > 0")
    return summary.error_variance() / theoretical_sd**2


def se_ratio(summary: ReplicateSummary) -> float:
    """Mean reported SE over the replicate SD of ``estimate - truth``."""
    ses = [r.se for r in summary.records if r.se is not None]
    if not ses:
        raise DataError("no replicate reported a standard error")
    sd = math.sqrt(summary.error_variance()) * summary.scale
    return (math.fsum(ses) / len(ses)) / sd


def degree_gain(summary: ReplicateSummary) -> float:
    """Fraction of replicates where the estimate's total absolute error is at most the observed one."""
    wins = [r.extras["abs_error"] <= r.extras["observed_abs_error"] for r in summary.records]
    return sum(wins) / len(wins)


def summary_dict(summary: ReplicateSummary, theoretical_sd: float | None = None) -> dict:
    """Aggregate results as a JSON-ready dict (order-stable)."""
    out = {
        "scenario": summary.scenario.to_dict(),
        "replicates": len(summary.records),
        "failures": [{"rep": r, "error": msg} for r, msg in summary.failures],
        "mean_error": summary.mean_error(),
        "error_variance": summary.error_variance(),
    }
    if any(r.covered is not None for r in summary.records):
        out["coverage"] = coverage_report(summary)
    if any(r.se is not None for r in summary.records) and summary.error_variance() > 0:
        out["se_ratio"] = se_ratio(summary)
    if theoretical_sd is not None:
        out["theoretical_sd"] = theoretical_sd
        out["variance_ratio"] = variance_check(summary, theoretical_sd)
    if summary.scenario.generator == "node-degrees":
        out["gain_fraction"] = degree_gain(summary)
    return out


def summary_json(summary: ReplicateSummary, theoretical_sd: float | None = None) -> str:
    return json.dumps(summary_dict(summary, theoretical_sd), indent=2, allow_nan=False) + "\n"


def replicates_csv(summary: ReplicateSummary) -> str:
    """Per-replicate rows ``rep,estimate,truth,se,covered``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rep", "estimate", "truth", "se", "covered"])
    for r in summary.records:
        cov = "" if r.covered is None else str(r.covered).lower()
        w.writerow([r.rep, repr(r.estimate), repr(r.truth), "" if r.se is None else repr(r.se), cov])
    return buf.getvalue()


def load_scenario(text: str) -> Scenario:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"scenario is not valid JSON (line {exc.lineno}): {exc.msg}") from None
    if not isinstance(data, dict):
        raise DataError("scenario must be a JSON object")
    return Scenario.from_dict(data)
