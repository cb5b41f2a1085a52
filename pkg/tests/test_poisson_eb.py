import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sumlab.core import DiscreteMixingDistribution, FrequencyOfFrequencies, expect_truncated
from sumlab.errors import DataError, NonIdentifiable
from sumlab.poisson_eb import (
    TargetKind,
    UtilityFn,
    asymptotic_sd,
    ci_sum,
    geometric_pmf,
    identity,
    indicator,
    influence_components,
    leq,
    mu_tau,
    one,
    parse_utility,
    plugin_sum,
    tau_hat,
    uv_expectations,
    uv_sum,
    v_from_u,
    zero,
)

X = np.arange(12)


# ---- utilities


def test_v_from_u_examples():
    np.testing.assert_array_equal(v_from_u(indicator(0))(X), (X == 1).astype(float))
    np.testing.assert_array_equal(v_from_u(one())(X), X)
    np.testing.assert_array_equal(v_from_u(identity())(X), X * (X - 1))


def test_v_support_bound_shifts():
    assert v_from_u(indicator(3)).support_bound == 4
    assert v_from_u(identity()).degree == 2


def test_utility_declaration_checked():
    with pytest.raises(DataError):
        UtilityFn(lambda x: np.ones(x.shape), "bad", support_bound=3)
    with pytest.raises(DataError):
        UtilityFn(lambda x: np.exp(np.minimum(x, 5000) / 10.0), "bad", degree=2)
    with pytest.raises(DataError):
        UtilityFn(lambda x: x, "undeclared")


@pytest.mark.parametrize("spec", ["indicator:x", "leq:-1", "identity:3", "cube"])
def test_parse_utility_rejects(spec):
    with pytest.raises(DataError):
        parse_utility(spec)


def test_parse_utility():
    np.testing.assert_array_equal(parse_utility("leq:2")(X[:5]), [1, 1, 1, 0, 0])
    assert parse_utility("one").name == "one"


def test_target_kind_rejects_negative_variance():
    with pytest.raises(DataError):
        TargetKind.next_count((0.0, -1.0))
    with pytest.raises(DataError):
        TargetKind("other")


# ---- uv_sum / tau_hat


def test_uv_sum_examples():
    assert uv_sum([0, 1, 1, 2], indicator(0)).estimate == 2
    assert uv_sum([3], one()).estimate == 3
    assert uv_sum(FrequencyOfFrequencies({1: 2, 2: 1}), indicator(1)).estimate == 2


def test_uv_sum_has_no_se():
    rep = uv_sum([1, 2], one())
    assert rep.se is None and rep.ci is None


def test_tau_hat_examples():
    assert tau_hat([1, 1]) == 1.0
    with pytest.raises(NonIdentifiable):
        tau_hat([0, 0])
    assert tau_hat([2], a=1, b=1) == pytest.approx(2 / 3, abs=1e-15)


def test_tau_hat_counts_zero_rows_of_frequency_table():
    assert tau_hat(FrequencyOfFrequencies({1: 2}), n_zero=2) == pytest.approx(2.0)


def test_rejects_non_integer_data():
    with pytest.raises(DataError):
        uv_sum([0.5, 1], one())
    with pytest.raises(DataError):
        uv_sum([], one())


# ---- plugin_sum


def test_plugin_examples():
    assert plugin_sum([1, 1], one()).estimate == pytest.approx(2.0, abs=1e-15)
    assert plugin_sum([0, 0, 0], one()).estimate == 0.0
    # X = [0, 2], u = I{x=0}: mean 1, shrink 1 / (1 + 1), one term (0 + 1) * 1
    assert plugin_sum([0, 2], indicator(0)).estimate == pytest.approx(0.5, abs=1e-15)


def test_plugin_all_zero_counts():
    rep = plugin_sum([0, 0], one())
    assert rep.estimate == 0.0 and rep.se is None
    assert rep.diagnostics.warnings[0].startswith("NonIdentifiable")
    assert plugin_sum([0, 0], one(), a=1.0).se is not None


def test_plugin_ci_matches_se():
    rep = plugin_sum([0, 1, 3, 2, 0, 5], leq(1))
    half = (rep.ci[1] - rep.ci[0]) / 2
    assert half == pytest.approx(1.959963984540054 * rep.se, rel=1e-12)


counts = st.lists(st.integers(0, 40), min_size=1, max_size=40).filter(lambda xs: sum(xs) > 0)


@given(xs=counts, seed=st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_plugin_permutation_invariant(xs, seed):
    perm = np.random.default_rng(seed).permutation(xs)
    assert plugin_sum(perm, leq(2)).estimate == plugin_sum(xs, leq(2)).estimate


@given(xs=counts, a=st.floats(0, 5), b=st.floats(0, 5))
@settings(max_examples=40, deadline=None)
def test_plugin_nonnegative_for_nonnegative_u(xs, a, b):
    assert plugin_sum(xs, leq(3), a=a, b=b).estimate >= 0


def test_plugin_frequency_table_matches_raw():
    raw = [0, 0, 1, 2, 2, 2, 5]
    fof = FrequencyOfFrequencies.from_observations(raw)
    a = plugin_sum(raw, indicator(2))
    b = plugin_sum(fof, indicator(2), n_zero=2)
    assert a.estimate == pytest.approx(b.estimate, rel=1e-15)
    assert a.se == pytest.approx(b.se, rel=1e-12)


# ---- series quantities


def test_mu_tau_examples():
    assert mu_tau(indicator(0), 1.0) == pytest.approx(1 / (1 + 1) ** 2, abs=1e-12)
    assert mu_tau(one(), 2.0) == pytest.approx(0.5, abs=1e-12)
    assert mu_tau(zero(), 1.3) == 0.0


@given(tau=st.floats(0.05, 20))
@settings(max_examples=30, deadline=None)
def test_mu_tau_indicator_closed_form(tau):
    # E[lambda I{X=0}] = tau / (1 + tau)^2
    assert mu_tau(indicator(0), tau) == pytest.approx(tau / (1 + tau) ** 2, rel=1e-10)


def test_asymptotic_sd_zero_utility():
    sd, _ = asymptotic_sd(1.0, zero())
    assert sd == 0.0


def test_next_count_adds_poisson_noise():
    s1, _ = asymptotic_sd(1.0, indicator(0), TargetKind.lambda_weighted())
    s2, _ = asymptotic_sd(1.0, indicator(0), TargetKind.next_count())
    # E[lambda I{X=0}] under tau = 1, from the exponential-Poisson joint law
    extra = expect_truncated(lambda x: (x == 0) * (x + 1.0) / 2.0, geometric_pmf(1.0), 1e-14, tail_ratio=0.5).value
    assert s2**2 - s1**2 == pytest.approx(extra, abs=1e-12)
    assert extra == pytest.approx(0.25, abs=1e-15)


def _variance_by_enumeration(tau, u, xmax=400):
    # Var(phi_star(X) - lambda u(X)) from the joint law, not the decomposition used in the code
    comps = influence_components(tau, u)
    x = np.arange(xmax)
    f = geometric_pmf(tau)(x)
    phi = comps.phi_star(x)
    uv = u(x)
    m1 = (x + 1.0) / (1 + tau)
    m2 = (x + 1.0) * (x + 2.0) / (1 + tau) ** 2
    second = np.sum(f * (phi**2 - 2 * phi * uv * m1 + uv**2 * m2))
    first = np.sum(f * (phi - uv * m1))
    return second - first**2


@pytest.mark.parametrize("tau", [0.3, 1.0, 4.0])
@pytest.mark.parametrize("u", [one(), indicator(0), leq(2), identity()], ids=lambda u: u.name)
def test_asymptotic_sd_matches_joint_enumeration(tau, u):
    sd, _ = asymptotic_sd(tau, u)
    assert sd**2 == pytest.approx(_variance_by_enumeration(tau, u), rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("tau", [0.2, 1.0, 7.5])
def test_influence_components(tau):
    comps = influence_components(tau, leq(1))
    f = geometric_pmf(tau)
    r = 1 / (1 + tau)
    assert abs(expect_truncated(comps.rho, f, 1e-14, tail_ratio=r).value) < 1e-10
    assert abs(expect_truncated(comps.phi_star, f, 1e-14, tail_ratio=r).value) < 1e-10
    assert comps.fisher > 0
    # efficient influence for tau equals the delta-method influence of 1 / mean
    x = np.arange(101)
    np.testing.assert_allclose(comps.kappa_star(x), -(tau**2) * (x - 1 / tau), rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("tau", [0.5, 2.0])
def test_fisher_is_score_variance(tau):
    comps = influence_components(tau, one())
    var = expect_truncated(lambda x: comps.rho(x) ** 2, geometric_pmf(tau), 1e-14, tail_ratio=1 / (1 + tau)).value
    assert var == pytest.approx(comps.fisher, rel=1e-10)


# ---- ci_sum


def test_ci_examples():
    assert ci_sum(3.0, 0.0, 10) == (3.0, 3.0)
    lo, hi = ci_sum(50.0, 0.8, 100, 0.95)
    assert lo == pytest.approx(34.32, abs=0.01) and hi == pytest.approx(65.68, abs=0.01)


def test_ci_rejects():
    with pytest.raises(DataError):
        ci_sum(1.0, -1.0, 5)
    with pytest.raises(DataError):
        ci_sum(1.0, 1.0, 5, level=1.0)


# ---- u,v unbiasedness


atoms = st.lists(
    st.tuples(st.floats(0, 8), st.floats(0.05, 1)), min_size=1, max_size=4, unique_by=lambda a: a[0]
).map(lambda xs: DiscreteMixingDistribution.from_atoms([(y, w / sum(w for _, w in xs)) for y, w in xs]))


@given(G=atoms, k=st.integers(0, 6))
@settings(max_examples=40, deadline=None)
def test_uv_identity(G, k):
    ev, elu = uv_expectations(indicator(k), G)
    assert ev == pytest.approx(elu, abs=1e-10)


def test_uv_identity_identity_utility():
    G = DiscreteMixingDistribution.from_atoms([(0.5, 0.4), (2.0, 0.6)])
    ev, elu = uv_expectations(identity(), G)
    # E[lambda X] = E[lambda^2] for Poisson counts
    assert elu == pytest.approx(0.4 * 0.25 + 0.6 * 4.0, abs=1e-10)
    assert ev == pytest.approx(elu, abs=1e-10)
