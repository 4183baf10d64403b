import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from defskill.court import Possession
from defskill.matchup import (MatchupModel, MatchupPosterior, RankDeficientDesign,
                              attention_scores, constrained_gls, defensive_entropy, emission_mean,
                              fit_em, forward_backward, m_step_gamma, m_step_rho, team_entropies,
                              transition_masses, _emission_loglik)
from defskill.synth import SynthConfig, simulate_corpus

HOOP = (5.25, 25.0)


def random_possession(T, seed, pid="r"):
    rng = np.random.default_rng(seed)
    off = rng.uniform(5, 40, (T, 5, 2))
    dfn = off[:, rng.permutation(5)] + rng.normal(0, 3, (T, 5, 2))
    ball = off[:, 0] + rng.normal(0, 0.5, (T, 2))
    return Possession(pid, np.arange(T) / 25.0, off, dfn, ball, np.zeros(T, int))


def brute_force_marginals(p, model):
    """Enumerate every hidden path of each defender."""
    logb = _emission_loglik(np.asarray(p.defense)[None], np.asarray(p.offense)[None],
                            np.asarray(p.ball)[None], model, HOOP)[0]     # (T, J, K)
    T = len(p)
    logtrans = np.full((5, 5), np.log((1 - model.rho) / 4))
    np.fill_diagonal(logtrans, np.log(model.rho))
    E = np.zeros((T, 5, 5))
    A = np.zeros((T - 1, 5, 5, 5))
    total = 0.0
    for j in range(5):
        paths = np.array(list(itertools.product(range(5), repeat=T)))
        lw = np.log(0.2) + logb[np.arange(T), j, paths].sum(1)
        lw += logtrans[paths[:, :-1], paths[:, 1:]].sum(1)
        m = lw.max()
        w = np.exp(lw - m)
        z = w.sum()
        total += m + np.log(z)
        w /= z
        for t in range(T):
            np.add.at(E[t, j], paths[:, t], w)
        for t in range(1, T):
            np.add.at(A[t - 1, j], (paths[:, t], paths[:, t - 1]), w)
    return E, A, total


def test_emission_mean_examples():
    m = MatchupModel((0.62, 0.11, 0.27), 4.0, 0.98)
    np.testing.assert_allclose(emission_mean((20, 20), (20, 20), m), (16.0175, 21.35), atol=1e-12)
    m1 = MatchupModel((1.0, 0.0, 0.0), 4.0, 0.98)
    np.testing.assert_allclose(emission_mean((3, 7), (20, 20), m1), (3, 7))


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 2), st.floats(-1, 2), st.floats(0, 47), st.floats(0, 50))
def test_emission_mean_convexity(a, b, x, y):
    g = np.array([a, b, 1 - a - b])
    m = MatchupModel(tuple(g), 1.0, 0.9)
    np.testing.assert_allclose(emission_mean((x, y), (x, y), m, hoop=(x, y)), (x, y), atol=1e-9)


def test_model_validation():
    with pytest.raises(ValueError):
        MatchupModel((0.5, 0.2, 0.2), 1.0, 0.9)
    with pytest.raises(ValueError):
        MatchupModel((0.5, 0.3, 0.2), -1.0, 0.9)


@pytest.mark.parametrize("rho", [0.98, 0.6, 0.2])
def test_forward_backward_matches_enumeration(rho):
    p = random_possession(4, seed=int(rho * 100))
    model = MatchupModel((0.62, 0.11, 0.27), 6.0, rho)
    post = forward_backward(p, model)
    E, A, ll = brute_force_marginals(p, model)
    np.testing.assert_allclose(post.E, E, atol=1e-10)
    np.testing.assert_allclose(post.A, A, atol=1e-10)
    assert post.loglik == pytest.approx(ll, rel=1e-10)


def test_single_frame_is_normalized_emission():
    p = random_possession(1, seed=1)
    model = MatchupModel((0.62, 0.11, 0.27), 4.0, 0.98)
    logb = _emission_loglik(np.asarray(p.defense)[None], np.asarray(p.offense)[None],
                            np.asarray(p.ball)[None], model, HOOP)[0, 0]
    expect = np.exp(logb - logb.max(1, keepdims=True))
    expect /= expect.sum(1, keepdims=True)
    np.testing.assert_allclose(forward_backward(p, model).E[0], expect, atol=1e-12)


def test_uniform_transitions_give_per_frame_posteriors():
    p = random_possession(30, seed=2)
    model = MatchupModel((0.62, 0.11, 0.27), 4.0, 0.2)
    logb = _emission_loglik(np.asarray(p.defense)[None], np.asarray(p.offense)[None],
                            np.asarray(p.ball)[None], model, HOOP)[0]
    expect = np.exp(logb - logb.max(-1, keepdims=True))
    expect /= expect.sum(-1, keepdims=True)
    np.testing.assert_allclose(forward_backward(p, model).E, expect, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.999))
def test_posterior_normalization_and_pairwise_consistency(seed, rho):
    p = random_possession(12, seed)
    post = forward_backward(p, MatchupModel((0.62, 0.11, 0.27), 5.0, rho))
    np.testing.assert_allclose(post.E.sum(-1), 1.0, atol=1e-12)
    # summing over the current state recovers the previous frame's marginal
    np.testing.assert_allclose(post.A.sum(axis=2), post.E[:-1], atol=1e-10)
    np.testing.assert_allclose(post.A.sum(axis=3), post.E[1:], atol=1e-10)


def test_constrained_gls_matches_kkt_oracle(rng):
    X = rng.normal(size=(3, 3))
    d = rng.normal(size=3)
    G, h = X.T @ X, X.T @ d
    kkt = np.block([[2 * G, np.ones((3, 1))], [np.ones((1, 3)), np.zeros((1, 1))]])
    sol = np.linalg.solve(kkt, np.r_[2 * h, 1.0])[:3]
    g = constrained_gls(G, h)
    np.testing.assert_allclose(g, sol, atol=1e-10)
    assert g.sum() == pytest.approx(1.0, abs=1e-12)


def test_constrained_gls_orthonormal_toy():
    # orthonormal rows: minimizer of ||g - d||^2 subject to sum 1 is d projected
    d = np.array([0.7, 0.4, 0.1])
    g = constrained_gls(np.eye(3), d)
    np.testing.assert_allclose(g, d + (1 - d.sum()) / 3)


def test_rank_deficient_design_names_columns():
    G = np.ones((3, 3))
    with pytest.raises(RankDeficientDesign, match="collinear"):
        constrained_gls(G, np.ones(3))


def test_m_step_zero_residual():
    cfg = SynthConfig(sigma_d_ft=0.0, n_possessions=5, seed=1)
    poss, ledger = simulate_corpus(cfg)
    posts = []
    for p, rec in zip(poss, ledger["possessions"]):
        E = np.eye(5)[np.array(rec["hidden"])]
        posts.append(MatchupPosterior(E, None, 0.0, p.id))
    gamma, s2 = m_step_gamma(poss, posts)
    np.testing.assert_allclose(gamma, cfg.gamma, atol=1e-8)
    assert s2 < 1e-8


def test_m_step_rho_is_transition_mle():
    # maximizes stay*log(rho) + switch*log((1 - rho)/4)
    assert m_step_rho(90, 10) == pytest.approx(0.9)
    grid = np.linspace(0.01, 0.99, 9801)
    obj = 90 * np.log(grid) + 10 * np.log((1 - grid) / 4)
    assert m_step_rho(90, 10) == pytest.approx(grid[np.argmax(obj)], abs=1e-4)
    # a uniform chain spends 1/5 of its transitions staying put
    assert m_step_rho(1, 4) == pytest.approx(0.2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert m_step_rho(10, 0) < 1
    with pytest.raises(ValueError):
        m_step_rho(0, 0)


def test_transition_masses_total():
    p = random_possession(10, 3)
    post = forward_backward(p, MatchupModel((0.62, 0.11, 0.27), 5.0, 0.9))
    stay, move = transition_masses(post)
    assert stay + move == pytest.approx(9 * 5)


def test_em_recovers_parameters(corpus30, fitted30):
    model, trace, _ = fitted30
    np.testing.assert_allclose(model.gamma, (0.62, 0.11, 0.27), atol=0.05)
    assert 0.96 <= model.rho < 1.0
    assert np.all(np.diff(trace) >= -1e-8 * np.abs(trace[1:]))


def test_em_fixed_point_from_truth():
    cfg = SynthConfig(sigma_d_ft=1e-3, n_possessions=5, seed=8, rho=1.0)
    poss, _ = simulate_corpus(cfg)
    init = MatchupModel(cfg.gamma, 1e-6, 0.9999)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model, trace, _ = fit_em(poss, init=init, tol=1e-9, max_iters=2)
    np.testing.assert_allclose(model.gamma, cfg.gamma, atol=1e-4)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10_000))
def test_em_loglik_nondecreasing(seed):
    poss, _ = simulate_corpus(SynthConfig(n_possessions=4, frames_per_possession=60, seed=seed))
    _, trace, _ = fit_em(poss, tol=0, max_iters=15)
    assert np.all(np.diff(trace) >= -1e-8 * np.abs(np.asarray(trace[1:])))


def test_posterior_accuracy_on_synthetic(corpus30, fitted30):
    poss, ledger = corpus30
    _, _, posts = fitted30
    hits = total = 0
    for post, rec in zip(posts, ledger["possessions"]):
        hits += np.sum(post.E.argmax(-1) == np.array(rec["hidden"]))
        total += post.E.shape[0] * 5
    assert hits / total >= 0.9


def _posterior(E):
    return MatchupPosterior(np.asarray(E, float), None, 0.0)


def test_attention_single_and_double_team():
    T = 10
    p = random_possession(T, 0)
    E = np.tile(np.eye(5), (T, 1, 1))
    att = attention_scores([p], [_posterior(E)])
    assert att[p.offense_ids[0]]["on_ball"] == pytest.approx(1.0)
    assert att[p.offense_ids[1]]["off_ball"] == pytest.approx(1.0)
    # defender 1 leaves offender 1 to double the ball for 2 of 10 frames
    E2 = E.copy()
    E2[:2, 1] = np.eye(5)[0]
    att = attention_scores([p], [_posterior(E2)])
    assert att[p.offense_ids[0]]["on_ball"] == pytest.approx(1.2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_attention_conservation(seed):
    rng = np.random.default_rng(seed)
    p = random_possession(8, seed)
    E = rng.dirichlet(np.ones(5), size=(8, 5))
    load = E.sum(axis=1)
    assert np.allclose(load.sum(-1), 5.0)
    att = attention_scores([p], [_posterior(E)])
    assert all(v >= 0 for d in att.values() for v in d.values())


def test_entropy_values():
    assert defensive_entropy([[1, 0, 0, 0, 0]])[0] == 0.0
    assert defensive_entropy([[0.5, 0.5, 0, 0, 0]])[0] == 1.0
    assert defensive_entropy([[0.2] * 5])[0] == pytest.approx(np.log2(5), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=5, max_size=5).filter(lambda v: sum(v) > 1e-6))
def test_entropy_bounds(v):
    z = np.array(v) / np.sum(v)
    h = defensive_entropy(z[None])[0]
    assert -1e-12 <= h <= np.log2(5) + 1e-12


def test_team_entropies():
    p = Possession("a", np.arange(3) / 25.0, np.ones((3, 5, 2)), np.ones((3, 5, 2)),
                   np.ones((3, 2)), np.zeros(3, int), offense_team=4, defense_team=7)
    Z = np.tile([0.5, 0.5, 0, 0, 0], (5, 1))
    d, o = team_entropies([p], [Z])
    assert d == {7: 1.0} and o == {4: 1.0}
