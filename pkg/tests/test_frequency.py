import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp

from defskill.court import Possession, ShotEvent
from helpers import fixed_lineup_data
from defskill.matchup import MatchupPosterior
from defskill.outcomes.design import (FrequencyDesign, build_frequency_design, decode_outcome,
                                      frequency_prob, outcome_index)
from defskill.outcomes.frequency import (ELBODecreaseError, FrequencyPrior, ShotFrequencyModel,
                                         bohning_bound, bohning_bound_matrix,
                                         fit_frequency_variational, heldout_loglik, lse0)


def test_outcome_indexing():
    # code 0 is "no shot"; shots are shooter-major after it
    assert outcome_index(2, 3) == 1 + 2 * 5 + 3
    slot, basis = decode_outcome(np.arange(26))
    assert slot[0] == -1 and basis[0] == -1
    np.testing.assert_array_equal(outcome_index(slot[1:], basis[1:]), np.arange(1, 26))


def _possession(shot):
    T = 10
    off = np.tile(np.array([[5.0, 25.0], [20, 5], [20, 45], [30, 25], [40, 10]]), (T, 1, 1))
    return Possession("x", np.arange(T) / 25.0, off, off, off[:, 0], np.zeros(T, int), shot)


def test_build_design_turnover_and_shot():
    E = np.tile(np.eye(5), (10, 1, 1))
    post = MatchupPosterior(E, None, 0.0)
    regions = np.full(2350, 3)
    p_to = _possession(None)
    p_shot = _possession(ShotEvent(2, (20.0, 45.0), True, 9))
    d = build_frequency_design([p_to, p_shot], [post, post], regions, 5)
    assert d.outcome[0] == 0
    assert d.outcome[1] == outcome_index(2, 3)
    np.testing.assert_allclose(d.Z[1], np.eye(5))


def test_uniform_logits():
    p = frequency_prob(np.zeros((5, 5)), np.zeros((5, 5)), np.eye(5))
    np.testing.assert_allclose(p, 1 / 26)
    assert p[0] == pytest.approx(0.038462, abs=1e-6)


@pytest.mark.parametrize("c", [-2.0, 0.0, 1.5])
def test_constant_shift_no_shot_probability(c):
    p = frequency_prob(np.full((5, 5), c), np.zeros((5, 5)), np.eye(5))
    assert p[0] == pytest.approx(1 / (1 + 25 * np.exp(c)), rel=1e-12)


def test_suppressed_offender():
    beta = np.zeros((5, 5))
    beta[1, 2] = -50.0
    Z = np.eye(5)[[3, 0, 1, 2, 4]]   # defender 1 guards offender 0 full time
    p = frequency_prob(np.zeros((5, 5)), beta, Z)
    assert p[outcome_index(0, 2)] < 1e-20


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 30))
def test_probabilities_sum_to_one(seed, scale):
    rng = np.random.default_rng(seed)
    Z = rng.dirichlet(np.ones(5), 5)
    p = frequency_prob(rng.normal(0, scale, (5, 5)), rng.normal(0, scale, (5, 5)), Z)
    assert abs(p.sum() - 1) < 1e-12 and np.all(p >= 0)


def test_bohning_matrix_small_cases():
    np.testing.assert_allclose(bohning_bound_matrix(1), [[0.25]])
    np.testing.assert_allclose(bohning_bound_matrix(2), [[1 / 3, -1 / 6], [-1 / 6, 1 / 3]])


def lse_hessian(eta):
    p = np.exp(eta - lse0(eta))
    return np.diag(p) - np.outer(p, p)


def test_bohning_dominates_hessian(rng):
    A = bohning_bound_matrix(25)
    for _ in range(200):
        eta = rng.normal(0, 3, 25)
        assert np.linalg.eigvalsh(A - lse_hessian(eta)).min() >= -1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.1, 5))
def test_bohning_bound_is_upper_bound(seed, scale):
    rng = np.random.default_rng(seed)
    eta, psi = rng.normal(0, scale, (2, 25))
    assert lse0(eta) <= bohning_bound(eta, psi) + 1e-10
    assert bohning_bound(psi, psi) == pytest.approx(float(lse0(psi)), abs=1e-12)
    assert lse0(eta) == pytest.approx(logsumexp(np.r_[0.0, eta]))


def test_prior_ratio_split():
    p = FrequencyPrior.from_ratio(0.2)
    assert p.sigma_alpha_sq + p.sigma_beta_sq == pytest.approx(1.01)
    assert p.sigma_beta_sq / p.sigma_alpha_sq == pytest.approx(0.2)
    with pytest.raises(ValueError):
        FrequencyPrior(sigma_alpha_sq=0.0)


def _empty_design():
    return FrequencyDesign(np.zeros(0, int), np.zeros((0, 5, 5)), np.zeros((0, 5), int),
                           np.zeros((0, 5), int), 5)


def test_no_data_gives_prior():
    post = fit_frequency_variational(_empty_design(), FrequencyPrior(), {}, 1, "offense")
    assert post.mean.size == 5        # only the league means remain
    np.testing.assert_allclose(post.mean, 0.0)
    np.testing.assert_allclose(post.covariance_diag(), 1.0)


def test_recovers_offensive_effects():
    rng = np.random.default_rng(0)
    design, alpha, _ = fixed_lineup_data(rng)
    post = fit_frequency_variational(design, FrequencyPrior(), None, 1, "offense")
    ids, m, sd = post.alpha()
    err = np.abs(m - alpha[ids])
    assert np.mean(err <= 0.15) >= 0.9 and err.mean() < 0.08
    # with fixed lineups and no defense the maximum-likelihood estimate is closed form
    for team in (0, 1):
        sel = design.offense_ids[:, 0] == 5 * team
        cnt = np.bincount(design.outcome[sel], minlength=26)
        mle = np.log(cnt[1:] / cnt[0]).reshape(5, 5)
        np.testing.assert_allclose(m[5 * team:5 * team + 5], mle, atol=0.05)
    assert np.all(np.diff(post.elbo_trace) >= -1e-6 * (1 + np.abs(post.elbo_trace[1:])))


def test_defender_effects_improve_fit():
    rng = np.random.default_rng(1)
    design, alpha, beta = fixed_lineup_data(rng, N=6000, beta_scale=1.0)
    train, test = design.take(np.arange(5000)), design.take(np.arange(5000, 6000))
    prior = FrequencyPrior(1.0, 1.0, 1.0, 1.0)
    group = {i: 0 for i in range(10)}
    full = fit_frequency_variational(train, prior, group, 1, "full", tol=1e-8)
    off = fit_frequency_variational(train, prior, group, 1, "offense", tol=1e-8)
    assert heldout_loglik(full, test)["full"] > heldout_loglik(off, test)["full"]
    ids, b_hat, _ = full.beta()
    np.testing.assert_array_equal(ids, np.arange(10))
    assert np.corrcoef(b_hat.ravel(), beta.ravel())[0, 1] > 0.5


def test_shooter_variant_has_six_outcomes():
    rng = np.random.default_rng(2)
    design, _, _ = fixed_lineup_data(rng, N=500)
    post = fit_frequency_variational(design, FrequencyPrior(), None, 1, "shooter")
    assert post.predict_proba(design).shape == (500, 6)
    ll = heldout_loglik(post, design)
    assert np.isnan(ll["basis"]) and np.isnan(ll["full"]) and np.isfinite(ll["shooter"])


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10_000))
def test_elbo_monotone_random_data(seed):
    rng = np.random.default_rng(seed)
    design, _, _ = fixed_lineup_data(rng, N=400, beta_scale=0.5)
    post = fit_frequency_variational(design, FrequencyPrior(), {i: i % 2 for i in range(10)}, 2,
                                     "full", tol=1e-12, max_iter=300)
    tr = np.asarray(post.elbo_trace)
    assert np.all(np.diff(tr) >= -1e-6 * (1 + np.abs(tr[1:])))


def test_unknown_variant_and_missing_groups():
    with pytest.raises(ValueError):
        fit_frequency_variational(_empty_design(), variant="nope")
    with pytest.raises(ValueError):
        fit_frequency_variational(_empty_design(), variant="full", group_of=None)


def test_estimator_score_is_heldout_loglik():
    rng = np.random.default_rng(3)
    design, _, _ = fixed_lineup_data(rng, N=800)
    est = ShotFrequencyModel(variant="offense").fit(design)
    assert est.predict_proba(design).shape == (800, 26)
    assert est.score(design) == pytest.approx(heldout_loglik(est.posterior_, design)["full"] / 800)
