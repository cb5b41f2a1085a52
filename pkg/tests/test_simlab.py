import json
import math

import numpy as np
import pytest
from scipy.stats import chisquare, nbinom, poisson

from sumlab.core import DiscreteMixingDistribution, GammaShapeScale, RngContract
from sumlab.disclosure import MuArgusPopulation, NegBinPopulation, PoissonPopulation
from sumlab.errors import AllReplicatesFailed, DataError
from sumlab.simlab import (
    ExponentialPrior,
    Scenario,
    coverage_report,
    gen_disclosure,
    gen_node_link_counts,
    gen_poisson_mixture,
    gen_routing_model,
    gen_species,
    load_scenario,
    replicates_csv,
    run_one,
    run_replicates,
    summary_json,
    variance_check,
)

ATOMS = [[0.5, 0.4], [2.0, 0.6]]


def gof_pvalue(draws, pmf):
    # bins with expected count >= 5, the rest pooled into one tail bin
    n = draws.size
    ks = np.arange(draws.max() + 50)
    expected = n * pmf(ks)
    last = int(np.nonzero(expected >= 5)[0].max())
    obs = np.bincount(np.minimum(draws, last + 1), minlength=last + 2)[: last + 2]
    exp = np.append(expected[: last + 1], n - expected[: last + 1].sum())
    if exp[-1] < 5:
        obs = np.append(obs[:-2], obs[-2:].sum())
        exp = np.append(exp[:-2], exp[-2:].sum())
    return chisquare(obs, exp).pvalue


# ---- generators


def test_poisson_mixture_point_mass_mean():
    G = DiscreteMixingDistribution.from_atoms([(2.0, 1.0)])
    s = gen_poisson_mixture(10**6, G, 5)
    assert abs(s.x.mean() - 2.0) < 0.01


def test_poisson_mixture_deterministic():
    a = gen_poisson_mixture(100, ExponentialPrior(1.0), RngContract(3, 1))
    b = gen_poisson_mixture(100, ExponentialPrior(1.0), RngContract(3, 1))
    for f in ("x", "lam", "y"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_poisson_mixture_zero_rate():
    s = gen_poisson_mixture(50, DiscreteMixingDistribution.from_atoms([(0.0, 1.0)]), 1)
    assert not s.x.any() and not s.y.any()


def test_poisson_mixture_marginal_is_geometric():
    tau = 0.7
    s = gen_poisson_mixture(10**5, ExponentialPrior(tau), 11)
    assert gof_pvalue(s.x, lambda k: tau / (1 + tau) ** (k + 1.0)) > 1e-3
    assert gof_pvalue(s.y, lambda k: tau / (1 + tau) ** (k + 1.0)) > 1e-3


def test_species_observed_fraction():
    s = gen_species(10**5, GammaShapeScale(1.0, 1.0), 2)
    assert abs(s.fof.d_tilde / s.d - 0.5) < 0.005


def test_species_large_rate():
    s = gen_species(10**4, DiscreteMixingDistribution.from_atoms([(10.0, 1.0)]), 2)
    assert s.fof.d_tilde / s.d >= 0.9999


def test_species_single_class():
    s = gen_species(1, DiscreteMixingDistribution.from_atoms([(30.0, 1.0)]), 0)
    assert s.d == 1 and len(s.fof.ks) == 1


def test_species_marginal_is_negative_binomial():
    s = gen_species(10**5, GammaShapeScale(1.5, 2.0), 4)
    assert gof_pvalue(s.counts, lambda k: nbinom.pmf(k, 1.5, 1 / 3.0)) > 1e-3


def test_node_link_counts_marginal():
    sample = gen_node_link_counts(2000, GammaShapeScale(2.0, 0.5), (3.0, 3.0), 50.0, 8)
    assert np.allclose(sample.betas, 3.0)
    assert sample.degrees.sum() > 10**5 * 0.9
    counts = np.concatenate([np.repeat(t.ks, t.counts.astype(int)) for t in sample.tables])
    # observed links only: the zero class is dropped, so compare with the zero-truncated law
    p0 = nbinom.pmf(0, 2.0, 1 / 2.5)
    assert gof_pvalue(counts - 1, lambda k: nbinom.pmf(k + 1, 2.0, 1 / 2.5) / (1 - p0)) > 1e-3


def test_node_link_counts_degree_mean():
    sample = gen_node_link_counts(4000, GammaShapeScale(1.0, 1.0), (1.0, 10.0), 20.0, 1)
    se = math.sqrt(20.0 / 4000)
    assert abs(sample.degrees.mean() - 21.0) < 3 * se
    assert np.all((sample.betas >= 1.0) & (sample.betas <= 10.0))


def test_routing_star():
    m = gen_routing_model(6, "star")
    assert m.degrees.tolist() == [5, 0, 0, 0, 0, 0]


def test_routing_random_paths():
    m = gen_routing_model(5, "random", n_paths=30, path_length=4, rng=2)
    assert len(m.table.paths) == 30
    assert all(a != b for path in m.table.paths for a, b in zip(path, path[1:]))
    with pytest.raises(DataError):
        gen_routing_model(5, "ring")


def test_disclosure_census():
    s = gen_disclosure(20, np.full(20, 0.05), 1.0, PoissonPopulation(500.0), 3)
    assert [c.x for c in s.cells] == s.population.tolist()


def test_disclosure_thinning_mean():
    J, lam, p = 50, 10**5, 0.2
    pi = np.full(J, 1 / J)
    means = []
    for r in range(40):
        s = gen_disclosure(J, pi, p, PoissonPopulation(lam), RngContract(9, r))
        means.append(np.mean([c.x for c in s.cells]))
    mu = p * lam / J
    se = math.sqrt(mu / (J * 40))
    assert abs(np.mean(means) - mu) < 3 * se


def test_disclosure_marginal_is_poisson():
    J = 10**5
    s = gen_disclosure(J, np.full(J, 1 / J), 0.3, PoissonPopulation(3.0 * J), 6)
    x = np.array([c.x for c in s.cells])
    assert gof_pvalue(x, lambda k: poisson.pmf(k, 0.9)) > 1e-3


def test_disclosure_rejects():
    with pytest.raises(DataError):
        gen_disclosure(3, [0.2, 0.2, 0.2], 0.5, PoissonPopulation(10.0), 0)
    with pytest.raises(DataError):
        gen_disclosure(2, 0.5, 0.5, MuArgusPopulation(), 0)
    s = gen_disclosure(2, 0.5, 0.5, NegBinPopulation(2.0, 10.0), 0)
    assert len(s.cells) == 2


# ---- scenarios and replicates


def eb_scenario(estimator="plugin", reps=50, seed=7, **params):
    return Scenario("poisson-mixture", estimator, 500, {"tau": 1.0, "u": "one", **params}, replicates=reps, seed=seed)


def test_oracle_self_test():
    for sc in (eb_scenario("oracle"), Scenario("species", "oracle", 100, {"alpha": 1, "beta": 1}, replicates=20)):
        s = run_replicates(sc)
        assert coverage_report(s)["coverage"] == 1.0
        assert s.mean_error() == 0.0
        assert variance_check(s, 1.0) == 0.0


def test_replicate_uses_its_own_stream():
    sc = eb_scenario(reps=5)
    whole = run_replicates(sc)
    assert run_one(sc, 3).estimate == whole.records[3].estimate


def test_results_independent_of_workers():
    sc = eb_scenario(reps=30)
    a = summary_json(run_replicates(sc, workers=1))
    b = summary_json(run_replicates(sc, workers=3))
    assert a == b
    assert replicates_csv(run_replicates(sc)) == replicates_csv(run_replicates(sc, workers=2))


def test_failures_are_counted_and_excluded():
    # a one-species community is often seen only as singletons, which has no interior MLE
    sc = Scenario("species", "fit-gamma", 3, {"alpha": 1.0, "beta": 0.5}, replicates=40, seed=1)
    s = run_replicates(sc)
    assert s.failures and len(s.records) + len(s.failures) == 40
    body = json.loads(summary_json(s))
    assert len(body["failures"]) == len(s.failures)


def test_all_replicates_failed():
    with pytest.raises(DataError):
        Scenario("poisson-mixture", "uv", 10, {"atoms": [[1.0, 1.0]], "u": "indicator:-1"}, replicates=3)
    sc = Scenario("species", "fit-gamma", 1, {"atoms": [[0.001, 1.0]]}, replicates=3)
    with pytest.raises(AllReplicatesFailed):
        run_replicates(sc)


def test_uv_scenario_is_unbiased():
    sc = Scenario("poisson-mixture", "uv", 20000, {"atoms": ATOMS, "u": "indicator:2"}, replicates=40, seed=2)
    e = run_replicates(sc).errors() / sc.size
    assert abs(e.mean()) < 3 * e.std(ddof=1) / math.sqrt(e.size)


def test_plugin_coverage_is_plausible():
    s = run_replicates(eb_scenario(reps=200))
    cov = coverage_report(s)
    assert 0.88 <= cov["coverage"] <= 1.0 and cov["failures"] == 0


def test_scenario_round_trip():
    sc = eb_scenario()
    text = json.dumps(sc.to_dict())
    assert load_scenario(text) == sc
    sp = Scenario("node-degrees", "observed", 5, {"max_iter": 3}, replicates=2)
    assert Scenario.from_dict(sp.to_dict()) == sp


@pytest.mark.parametrize(
    "text",
    [
        "[1]",
        "{",
        '{"generator": "species"}',
        '{"generator": "zeta", "estimator": "x", "n": 3}',
        '{"generator": "species", "estimator": "plugin", "d": 3}',
        '{"generator": "species", "estimator": "chao", "d": 3, "replicates": 0}',
    ],
)
def test_scenario_rejects(text):
    with pytest.raises(DataError):
        load_scenario(text)


def test_node_degree_scenario_runs():
    sc = Scenario("node-degrees", "pooled-npmle", 10, {"mean_degree": 10.0, "max_iter": 20}, replicates=2, seed=1)
    body = json.loads(summary_json(run_replicates(sc)))
    assert 0.0 <= body["gain_fraction"] <= 1.0
    obs = run_replicates(Scenario("node-degrees", "observed", 10, {"mean_degree": 10.0}, replicates=2, seed=1))
    # the observed degrees never exceed the truth
    assert all(r.estimate <= r.truth for r in obs.records)


def test_replicates_csv_layout():
    s = run_replicates(eb_scenario(reps=3))
    lines = replicates_csv(s).splitlines()
    assert lines[0] == "rep,estimate,truth,se,covered"
    assert len(lines) == 4 and lines[1].split(",")[-1] in ("true", "false")
