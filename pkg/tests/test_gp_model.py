from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import norm

from clbayes import coords
from clbayes.adjust import PriorSpec
from clbayes.gp_model import (
    CovarianceNotPD,
    DegeneratePair,
    FullLikelihood,
    GpParams,
    PairIndex,
    PairwiseLikelihood,
    ReplicateData,
    SiteLayout,
    _chol_with_jitter,
    conjugate_conditionals_full,
    conjugate_conditionals_pairwise,
    correlation_matrix,
    full_loglik,
    load_dataset,
    pairwise_loglik,
    pairwise_score,
    save_dataset,
    simulate_gp,
)
from clbayes.sandwich import fit_sandwich

from conftest import small_instance


def bivariate_logpdf(u, v, mu, tau, rho):
    s2 = 1.0 - rho * rho
    q = ((u - mu) ** 2 - 2 * rho * (u - mu) * (v - mu) + (v - mu) ** 2) / s2
    return -np.log(2 * np.pi) - np.log(tau) - 0.5 * np.log(s2) - q / (2 * tau)


# -- domain types -------------------------------------------------------------


def test_gp_params_validation_and_vector_roundtrip():
    params = GpParams(mu=-0.5, tau=2.0, omega=0.7)
    assert GpParams.from_vector(params.to_vector()) == params
    with pytest.raises(ValueError, match="tau"):
        GpParams(mu=0.0, tau=0.0, omega=1.0)
    with pytest.raises(ValueError, match="omega"):
        GpParams(mu=0.0, tau=1.0, omega=-1.0)
    with pytest.raises(ValueError, match="finite"):
        GpParams(mu=np.nan, tau=1.0, omega=1.0)


def test_site_layout_validation():
    layout = SiteLayout(np.array([3.0, 1.0, 2.0]))
    assert layout.k_sites == 3
    # input order preserved, not sorted
    assert layout.locations.tolist() == [3.0, 1.0, 2.0]
    with pytest.raises(ValueError):
        SiteLayout(np.array([1.0]))
    with pytest.raises(ValueError):
        SiteLayout(np.array([0.0, np.inf]))


def test_replicate_data_validation():
    layout = SiteLayout(np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        ReplicateData(values=np.zeros((3, 5)), layout=layout)
    with pytest.raises(ValueError):
        ReplicateData(values=np.array([[0.0, np.nan]]), layout=layout)


def test_pair_index_is_all_lexicographic_pairs():
    pairs = PairIndex.all_pairs(5)
    assert pairs.n_pairs == 10
    assert pairs.as_tuples()[:4] == [(0, 1), (0, 2), (0, 3), (0, 4)]
    with pytest.raises(ValueError, match="lexicographically"):
        PairIndex(first=np.array([1, 0]), second=np.array([2, 1]))
    with pytest.raises(ValueError, match="lexicographically"):
        # missing a pair
        PairIndex(first=np.array([0]), second=np.array([2]))


# -- simulation ----------------------------------------------------------------


def test_simulate_far_sites_are_uncorrelated():
    layout = SiteLayout(np.array([0.0, 1e9]))
    data = simulate_gp(GpParams(0.0, 1.0, 3.0), layout, 10_000, 7)
    corr = np.corrcoef(data.values[:, 0], data.values[:, 1])[0, 1]
    assert abs(corr) < 3.0 / np.sqrt(10_000)


def test_simulate_reproduces_mean():
    layout = SiteLayout(np.array([0.0, 2.0, 5.0]))
    data = simulate_gp(GpParams(5.0, 1.0, 3.0), layout, 10_000, 11)
    assert np.all(np.abs(data.values.mean(axis=0) - 5.0) < 4.0 / np.sqrt(10_000))


def test_simulate_matches_analytic_covariance():
    # oracle: cov(y_a, y_b) = tau * exp(-h / omega)
    layout = SiteLayout(np.array([0.0, 1.0]))
    data = simulate_gp(GpParams(0.0, 1.0, 3.0), layout, 100_000, 13)
    expected = np.exp(-1.0 / 3.0)
    sample_cov = np.cov(data.values[:, 0], data.values[:, 1])[0, 1]
    assert abs(sample_cov - expected) < 0.01


def test_simulate_bit_reproducible():
    layout = SiteLayout(np.array([0.0, 1.5, 4.0]))
    a = simulate_gp(GpParams(0.0, 1.0, 3.0), layout, 100, 99)
    b = simulate_gp(GpParams(0.0, 1.0, 3.0), layout, 100, 99)
    c = simulate_gp(GpParams(0.0, 1.0, 3.0), layout, 100, 100)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    with pytest.raises(ValueError):
        simulate_gp(GpParams(0.0, 1.0, 3.0), layout, 0, 1)


def test_jitter_ladder_rejects_indefinite_matrix():
    indefinite = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(CovarianceNotPD, match="not PD"):
        _chol_with_jitter(indefinite, 1.0, "test matrix")
    # a PSD matrix with an exactly zero eigenvalue is rescued by the ladder
    psd = np.ones((2, 2))
    chol, jitter = _chol_with_jitter(psd, 1.0, "ones")
    assert jitter > 0
    assert np.allclose(chol @ chol.T, psd + jitter * np.eye(2))


# -- full likelihood ------------------------------------------------------------


def test_full_loglik_reduces_to_independent_scalars():
    # far-apart sites: joint density = product of univariate normals
    layout = SiteLayout(np.array([0.0, 1e9]))
    params = GpParams(mu=0.4, tau=1.7, omega=2.0)
    data = simulate_gp(params, layout, 12, 3)
    expected = norm.logpdf(data.values, loc=0.4, scale=np.sqrt(1.7)).sum()
    assert full_loglik(params, data) == pytest.approx(expected, rel=1e-9)


def test_full_loglik_perfectly_correlated_pair():
    layout = SiteLayout(np.array([0.0, 1.0]))
    data = ReplicateData(values=np.array([[0.0, 0.0]]), layout=layout)
    params = GpParams(mu=0.0, tau=1.0, omega=1e8)
    rho = np.exp(-1.0 / 1e8)
    expected = bivariate_logpdf(0.0, 0.0, 0.0, 1.0, rho)
    assert full_loglik(params, data) == pytest.approx(expected, rel=1e-6)


def test_full_loglik_site_relabeling_invariance():
    params, layout, data = small_instance(21, k=5, n=4)
    perm = np.array([3, 0, 4, 1, 2])
    permuted = ReplicateData(
        values=data.values[:, perm], layout=SiteLayout(layout.locations[perm])
    )
    assert full_loglik(params, data) == pytest.approx(full_loglik(params, permuted), rel=1e-12)


# -- pairwise likelihood ---------------------------------------------------------


def test_pairwise_equals_full_for_single_pair():
    params, _, data = small_instance(31, k=2, n=9)
    assert pairwise_loglik(params, data) == pytest.approx(full_loglik(params, data), rel=1e-12)


def test_pairwise_score_equals_full_score_for_single_pair():
    params, _, data = small_instance(32, k=2, n=9)
    theta = params.to_vector()
    pair_score = PairwiseLikelihood(data).score(theta)
    full_score = FullLikelihood(data).score(theta)
    assert np.allclose(pair_score, full_score, rtol=1e-10)


def test_pairwise_matches_three_term_bivariate_sum():
    layout = SiteLayout(np.array([0.0, 1.0, 2.5]))
    y = np.array([[0.3, -0.7, 1.1]])
    data = ReplicateData(values=y, layout=layout)
    params = GpParams(mu=0.1, tau=1.3, omega=2.0)
    expected = 0.0
    for i, j in [(0, 1), (0, 2), (1, 2)]:
        h = abs(layout.locations[i] - layout.locations[j])
        expected += bivariate_logpdf(y[0, i], y[0, j], 0.1, 1.3, np.exp(-h / 2.0))
    assert pairwise_loglik(params, data) == pytest.approx(expected, rel=1e-12)


def test_pairwise_additive_over_replicates():
    params, layout, data = small_instance(41, k=4, n=5)
    stacked = ReplicateData(values=np.vstack([data.values, data.values]), layout=layout)
    assert pairwise_loglik(params, stacked) == pytest.approx(
        2.0 * pairwise_loglik(params, data), rel=1e-12
    )


def test_pairwise_rejects_duplicate_sites():
    layout = SiteLayout(np.array([1.0, 1.0, 3.0]))
    data = ReplicateData(values=np.zeros((2, 3)), layout=layout)
    with pytest.raises(DegeneratePair, match="zero distance"):
        pairwise_loglik(GpParams(0.0, 1.0, 1.0), data)


def test_pairwise_rejects_correlation_rounding_to_one():
    layout = SiteLayout(np.array([0.0, 1e-13]))
    data = ReplicateData(values=np.zeros((2, 2)), layout=layout)
    with pytest.raises(DegeneratePair, match=">= 1"):
        pairwise_loglik(GpParams(0.0, 1.0, 1e6), data)


# -- scores ----------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_pairwise_score_matches_finite_differences(seed):
    params, _, data = small_instance(seed, k=min(3 + seed, 6), n=4 + seed)
    theta = params.to_vector()
    total = pairwise_score(params, data).sum(axis=0)
    model = PairwiseLikelihood(data)
    steps = 1e-5 * (1.0 + np.abs(theta))
    for i in range(3):
        e = np.zeros(3)
        e[i] = steps[i]
        fd = (model.loglik(theta + e) - model.loglik(theta - e)) / (2 * steps[i])
        assert total[i] == pytest.approx(fd, rel=1e-4)


def test_score_sums_to_zero_at_mcle(reference_pairwise):
    fit = fit_sandwich(reference_pairwise)
    total = reference_pairwise.score(fit.params.to_vector())
    loglik = reference_pairwise.loglik(fit.params.to_vector())
    assert np.linalg.norm(coords.score_to_working(total, fit.params.to_vector())) <= 1e-6 * (
        1 + abs(loglik)
    )


def test_mean_score_shrinks_at_root_n_rate():
    theta0 = GpParams(0.0, 1.0, 3.0)
    rng = np.random.default_rng(8)
    layout = SiteLayout(rng.uniform(0, 20, 8))
    data = simulate_gp(theta0, layout, 500, 55)
    scores = pairwise_score(theta0, data)
    mean = scores.mean(axis=0)
    sd = scores.std(axis=0, ddof=1)
    assert np.all(np.abs(mean) <= 4.0 * sd / np.sqrt(500))


def test_replicate_scores_sum_to_total(reference_pairwise):
    theta = np.array([0.1, 1.2, 2.5])
    total = reference_pairwise.score(theta)
    rows = reference_pairwise.replicate_scores(theta)
    assert rows.shape == (50, 3)
    assert np.allclose(rows.sum(axis=0), total, rtol=1e-10)


# -- conjugate conditionals -------------------------------------------------------


def test_full_conditionals_flat_prior_degenerates_to_observation():
    # duplicated observation at a nearly perfectly correlated pair behaves
    # like a single site: mu | rest -> y, var -> tau
    layout = SiteLayout(np.array([0.0, 1.0]))
    data = ReplicateData(values=np.array([[0.7, 0.7]]), layout=layout)
    priors = PriorSpec(mu_mean=0.0, mu_var=1e8)
    params = GpParams(mu=0.0, tau=1.3, omega=1e8)
    normal, _ = conjugate_conditionals_full(params, data, priors)
    assert normal.mean == pytest.approx(0.7, abs=1e-3)
    assert normal.var == pytest.approx(1.3, rel=1e-3)


def test_full_conditional_variance_two_sites_strong_correlation():
    # oracle: explicit 2x2 inverse with rho -> 1 gives 1'R^-1 1 -> 1
    layout = SiteLayout(np.array([0.0, 1.0]))
    data = ReplicateData(values=np.array([[0.2, -0.1]]), layout=layout)
    b = 2.0
    priors = PriorSpec(mu_mean=0.0, mu_var=b)
    params = GpParams(mu=0.0, tau=1.5, omega=1e8)
    normal, _ = conjugate_conditionals_full(params, data, priors)
    assert normal.var == pytest.approx(1.0 / (1.0 / b + 1.0 / 1.5), rel=1e-3)


def test_full_conditionals_match_dense_oracle():
    params, layout, data = small_instance(61, k=5, n=7)
    priors = PriorSpec(mu_mean=0.3, mu_var=4.0, tau_shape=2.0, tau_scale=3.0)
    normal, invgamma = conjugate_conditionals_full(params, data, priors)
    r_inv = np.linalg.inv(correlation_matrix(layout, params.omega))
    one = np.ones(layout.k_sites)
    n = data.n_replicates
    var = 1.0 / (1.0 / priors.mu_var + n * one @ r_inv @ one / params.tau)
    mean = var * (
        priors.mu_mean / priors.mu_var + one @ r_inv @ data.values.sum(axis=0) / params.tau
    )
    quad = sum(
        (row - params.mu) @ r_inv @ (row - params.mu) for row in data.values
    )
    assert normal.mean == pytest.approx(mean, rel=1e-9)
    assert normal.var == pytest.approx(var, rel=1e-9)
    assert invgamma.shape == pytest.approx(2.0 + 0.5 * n * 5)
    assert invgamma.scale == pytest.approx(3.0 + 0.5 * quad, rel=1e-9)


def test_pairwise_conditionals_match_dense_block_inverse_k4():
    params, layout, data = small_instance(71, k=4, n=3)
    priors = PriorSpec(mu_mean=0.0, mu_var=5.0, tau_shape=1.5, tau_scale=2.0)
    normal, invgamma = conjugate_conditionals_pairwise(params, data, priors)

    pairs = PairIndex.all_pairs(4).as_tuples()
    n_pairs = len(pairs)
    big = np.zeros((2 * n_pairs, 2 * n_pairs))
    for idx, (i, j) in enumerate(pairs):
        h = abs(layout.locations[i] - layout.locations[j])
        rho = np.exp(-h / params.omega)
        big[2 * idx : 2 * idx + 2, 2 * idx : 2 * idx + 2] = np.array([[1.0, rho], [rho, 1.0]])
    big_inv = np.linalg.inv(big)
    one = np.ones(2 * n_pairs)
    n = data.n_replicates
    # identity: 1' Sigma_p^-1 1 equals twice the sum of 1/(1 + rho) over pairs
    rhos = np.array(
        [np.exp(-abs(layout.locations[i] - layout.locations[j]) / params.omega) for i, j in pairs]
    )
    assert one @ big_inv @ one == pytest.approx(2.0 * (1.0 / (1.0 + rhos)).sum(), rel=1e-10)

    var = 1.0 / (1.0 / priors.mu_var + n * (one @ big_inv @ one) / params.tau)
    s_p = np.zeros(2 * n_pairs)
    quad = 0.0
    for row in data.values:
        y_p = np.concatenate([[row[i], row[j]] for (i, j) in pairs])
        s_p += y_p
        quad += (y_p - params.mu) @ big_inv @ (y_p - params.mu)
    mean = var * (priors.mu_mean / priors.mu_var + one @ big_inv @ s_p / params.tau)
    assert normal.var == pytest.approx(var, rel=1e-9)
    assert normal.mean == pytest.approx(mean, rel=1e-9)
    assert invgamma.shape == pytest.approx(1.5 + n * n_pairs)
    assert invgamma.scale == pytest.approx(2.0 + 0.5 * quad, rel=1e-9)


def test_pairwise_conditionals_equal_full_for_k2():
    params, _, data = small_instance(81, k=2, n=6)
    priors = PriorSpec()
    n_full, ig_full = conjugate_conditionals_full(params, data, priors)
    n_pair, ig_pair = conjugate_conditionals_pairwise(params, data, priors)
    assert n_pair.mean == pytest.approx(n_full.mean, rel=1e-10)
    assert n_pair.var == pytest.approx(n_full.var, rel=1e-10)
    assert ig_pair.shape == pytest.approx(ig_full.shape)
    assert ig_pair.scale == pytest.approx(ig_full.scale, rel=1e-10)


def _conditional_variance_ratio(k: int, tau: float, b: float, omega: float) -> float:
    x = np.linspace(0.0, 20.0, k)
    layout = SiteLayout(x)
    data = ReplicateData(values=np.zeros((1, k)), layout=layout)
    priors = PriorSpec(mu_mean=0.0, mu_var=b)
    params = GpParams(mu=0.0, tau=tau, omega=omega)
    n_full, _ = conjugate_conditionals_full(params, data, priors)
    n_pair, _ = conjugate_conditionals_pairwise(params, data, priors)
    return n_pair.var / n_full.var


@pytest.mark.parametrize("k", [3, 5, 10, 20])
def test_pairwise_variance_ratio_bound(k):
    tau, b = 1.0, 100.0
    ratio = _conditional_variance_ratio(k, tau, b, omega=3.0)
    bound = (1 + tau) * (tau + b * k) / ((1 + tau) * tau + b * tau * k * (k - 1))
    assert ratio <= bound + 1e-12


def test_pairwise_variance_ratio_strictly_decreasing_in_k():
    ratios = [_conditional_variance_ratio(k, 1.0, 100.0, 3.0) for k in range(3, 31)]
    assert all(a > b for a, b in zip(ratios, ratios[1:]))


# -- dataset persistence -----------------------------------------------------------


def test_dataset_roundtrip(tmp_path):
    params, layout, data = small_instance(91, k=4, n=5)
    path = tmp_path / "data.csv"
    save_dataset(data, path)
    loaded = load_dataset(path)
    assert np.array_equal(loaded.values, data.values)
    assert np.array_equal(loaded.layout.locations, layout.locations)


def test_dataset_reader_validates_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("# locations: 0.0,1.0\nsite_1,site_2,site_3\n0,0,0\n")
    with pytest.raises(ValueError, match="columns"):
        load_dataset(path)
    path.write_text("site_1,site_2\n0,0\n")
    with pytest.raises(ValueError, match="locations"):
        load_dataset(path)
