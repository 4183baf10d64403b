"""Synthetic constructions shared by several test modules."""

import numpy as np


def planted_blobs(K=60, V=2350, n_blobs=5, noise_share=0.2, jitter=0.1, seed=0):
    """Player surfaces mixing disjoint uniform blobs with a diffuse component.

    The diffuse share varies by player around ``noise_share``; a constant
    share would make the diffuse surface indistinguishable from an even
    spread over the blobs.

    Returns ``(surfaces (K, V), blobs (n_blobs, V), diffuse (V,))``.
    """
    rng = np.random.default_rng(seed)
    blobs = np.zeros((n_blobs, V))
    for b in range(n_blobs):
        blobs[b, b * 300:b * 300 + 200] = 1
    blobs /= blobs.sum(axis=1, keepdims=True)
    diffuse = np.full(V, 1.0 / V)
    share = rng.uniform(0.0, 2 * noise_share, K)
    W = rng.dirichlet(np.ones(n_blobs), K) * (1 - share)[:, None]
    lam = W @ blobs + share[:, None] * diffuse[None]
    lam *= rng.uniform(1 - jitter, 1 + jitter, lam.shape)
    return lam / lam.sum(axis=1, keepdims=True), blobs, diffuse


def fixed_lineup_data(rng, N=20000, beta_scale=0.0):
    """Two fixed lineups facing each other; returns ``(design, alpha, beta)``."""
    from defskill.outcomes.design import FrequencyDesign, frequency_prob

    alpha = np.log(0.85 / 0.15 / 25) + rng.normal(0, 0.5, (10, 5))
    beta = rng.normal(0, beta_scale, (10, 5))
    off = np.where(rng.random(N)[:, None] < 0.5, np.arange(5), np.arange(5, 10))
    dfn = np.where(off < 5, off + 5, off - 5)
    Z = rng.dirichlet(np.full(5, 0.3), (N, 5)) if beta_scale else np.tile(np.eye(5), (N, 1, 1))
    p = frequency_prob(alpha[off], beta[dfn], Z)
    out = np.minimum((rng.random((N, 1)) > p.cumsum(1)).sum(1), 25)
    return FrequencyDesign(out, Z, off, dfn, 5), alpha, beta


def sbc_problem(seed, n_teams=5, n_shots=3000):
    """Efficiency data simulated from parameters drawn from the model's own prior.

    Returns ``(design, graph, roles, x_true, problem)``.
    """
    from defskill.outcomes.design import EfficiencyDesign
    from defskill.outcomes.efficiency import EfficiencyProblem, draw_from_prior
    from defskill.similarity import build_offender_graph
    from defskill.synth import draw_truth, league_rosters

    rng = np.random.default_rng(seed)
    _, roles = league_rosters(n_teams)
    n = len(roles)
    truth = draw_truth(n, rng, roles=roles)
    graph = build_offender_graph(truth.offense_profile, k=10, zeta=0.9, scale=0.1,
                                 player_ids=np.arange(n))
    shooter = rng.integers(0, n, n_shots)
    defender = rng.integers(0, n, n_shots)
    basis = rng.integers(0, 5, n_shots)
    dist = np.minimum(rng.gamma(3, 1.5, n_shots), 6.0)
    design = EfficiencyDesign(np.zeros(n_shots), shooter, basis, defender, dist)
    x = draw_from_prior(EfficiencyProblem(design, graph, roles), rng)
    eta = EfficiencyProblem(design, graph, roles).X @ x
    made = (rng.random(n_shots) < 1 / (1 + np.exp(-eta))).astype(int)
    design = EfficiencyDesign(made, shooter, basis, defender, dist)
    return design, graph, roles, x, EfficiencyProblem(design, graph, roles)


def planted_parameter_mask(layout):
    """Boolean mask selecting theta, phi and xi entries (not the group means)."""
    mask = np.zeros(layout.size, dtype=bool)
    mask[layout.theta0:layout.mu_theta0] = True
    mask[layout.phi0:layout.mu_phi0] = True
    mask[layout.xi0:layout.size] = True
    return mask
