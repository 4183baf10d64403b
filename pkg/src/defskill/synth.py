"""Synthetic possessions drawn from the full generative model.

Everything the downstream estimators try to recover (matchup weights,
switching rate, hidden matchups, frequency and efficiency coefficients) is
known here, so the simulator doubles as the verification oracle.

Offender and ball motion are not part of the model; they only need to be
smooth and stay inside the half court.
"""

import json
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
from scipy.special import logit

from .court import DEFAULT_COURT, FRAME_RATE, CourtGeometry, Possession, ShotEvent
from .matchup import MatchupModel, emission_mean
from .outcomes.design import (EfficiencyDesign, FrequencyDesign, decode_outcome,
                              frequency_prob, make_prob)
from .similarity import build_offender_graph
from .validation import check_simplex_weights

N_BASIS = 5
REGION_NAMES = ("restricted_area", "paint", "midrange", "corner_three", "above_break_three")
# guards, wings, bigs
ROLE_PROFILES = np.array([
    [0.15, 0.10, 0.25, 0.15, 0.35],
    [0.22, 0.15, 0.25, 0.18, 0.20],
    [0.50, 0.30, 0.14, 0.02, 0.04],
])
ROLE_OF_SLOT = np.array([0, 0, 1, 1, 2])
BETA_GROUP_MEANS = np.array([
    [0.25, 0.15, -0.10, -0.30, -0.30],
    [0.00, 0.00, -0.20, -0.15, -0.15],
    [-0.35, -0.30, 0.10, 0.20, 0.20],
])
PHI_GROUP_MEANS = np.array([
    [0.20, 0.15, -0.05, -0.10, -0.10],
    [0.10, 0.05, -0.05, -0.05, -0.05],
    [-0.25, -0.20, 0.05, 0.10, 0.10],
])
BASE_MAKE = np.array([0.62, 0.42, 0.40, 0.39, 0.35])
XI_TRUE = np.array([0.20, 0.12, 0.08, 0.10, 0.10])
MEAN_DISTANCE = np.array([2.5, 3.5, 4.5, 5.0, 5.5])


def synthetic_regions(geometry: CourtGeometry = DEFAULT_COURT) -> np.ndarray:
    """Label every tile with a shot region 0..4, or -1 outside all regions."""
    xy = geometry.tile_centers()
    hx, hy = geometry.hoop
    r = np.hypot(xy[:, 0] - hx, xy[:, 1] - hy)
    lateral = np.abs(xy[:, 1] - hy)
    corner = xy[:, 0] <= 14.0
    three = np.where(corner, lateral >= 22.0, r >= 23.75)
    paint = (xy[:, 0] <= 19.0) & (lateral <= 8.0)
    lab = np.full(len(xy), -1)
    lab[(~three) & (r >= 4.0)] = 2
    lab[paint & (r >= 4.0) & ~three] = 1
    lab[r < 4.0] = 0
    lab[three & corner] = 3
    lab[three & ~corner & (r <= 27.0)] = 4
    return lab


@dataclass
class OutcomeTruth:
    """True frequency and efficiency coefficients for a league of players.

    Player ids index the rows; every player has both an offensive and a
    defensive role. ``role`` doubles as the planted defender group.
    """

    alpha: np.ndarray
    beta: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    xi: np.ndarray
    role: np.ndarray
    mu_alpha: np.ndarray
    mu_beta: np.ndarray
    mu_theta: np.ndarray
    mu_phi: np.ndarray
    offense_profile: np.ndarray
    distance_offset: np.ndarray
    distance_cap: float = 6.0

    @property
    def n_players(self):
        return len(self.alpha)

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        kw = {k: (np.asarray(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**kw)


def draw_truth(n_players, rng, roles=None, sigma_alpha_sq=0.25, sigma_beta_sq=0.01,
               role_effects=True, beta_group_means=BETA_GROUP_MEANS, car_scale=0.1,
               sigma_phi_sq=0.05, phi_group_means=PHI_GROUP_MEANS, xi=XI_TRUE, zeta=0.9,
               shot_rate=0.85, n_neighbors=10):
    """Draw a league's coefficients from the hierarchical model.

    Offensive propensities are ``alpha[k, b] = mu_alpha[b] + role term +
    N(0, sigma_alpha_sq)``; defender effects scatter around their group's
    mean; offender shooting skill follows the CAR prior over the 10-NN
    graph of offensive shot profiles.
    """
    rng = np.random.default_rng(rng)
    if roles is None:
        roles = ROLE_OF_SLOT[np.arange(n_players) % 5]
    roles = np.asarray(roles)
    # baseline share of shots by region across the league
    share = ROLE_PROFILES.mean(axis=0)
    total = shot_rate / (1 - shot_rate)          # sum of exp(eta) giving the shot rate
    mu_alpha = np.log(total * share / 5)
    if role_effects:
        role_term = np.log(ROLE_PROFILES / share)[roles]
    else:
        role_term = np.zeros((n_players, N_BASIS))
    alpha = mu_alpha + role_term + rng.normal(0, np.sqrt(sigma_alpha_sq), (n_players, N_BASIS))
    beta_group_means = np.asarray(beta_group_means)
    beta = beta_group_means[roles] + rng.normal(0, np.sqrt(sigma_beta_sq), (n_players, N_BASIS))

    profile = np.exp(alpha)
    profile /= profile.sum(axis=1, keepdims=True)
    mu_theta = logit(BASE_MAKE) - np.asarray(xi) * 4.0
    theta = np.tile(mu_theta, (n_players, 1))
    if n_players > n_neighbors:
        graph = build_offender_graph(profile, k=n_neighbors, zeta=zeta, scale=car_scale)
        cov = np.linalg.inv(graph.precision)
        L = np.linalg.cholesky(0.5 * (cov + cov.T))
        theta = theta + (L @ rng.standard_normal((n_players, N_BASIS)))
    phi_group_means = np.asarray(phi_group_means)
    phi = phi_group_means[roles] + rng.normal(0, np.sqrt(sigma_phi_sq), (n_players, N_BASIS))
    return OutcomeTruth(alpha=alpha, beta=beta, theta=theta, phi=phi, xi=np.asarray(xi, float),
                        role=roles, mu_alpha=mu_alpha, mu_beta=beta_group_means,
                        mu_theta=mu_theta, mu_phi=phi_group_means, offense_profile=profile,
                        distance_offset=rng.normal(0, 0.5, n_players))


@dataclass(frozen=True)
class SynthConfig:
    """Ground truth and sizes for a synthetic tracking corpus."""

    gamma: tuple = (0.62, 0.11, 0.27)
    rho: float = 0.98
    sigma_d_ft: float = 2.0
    n_possessions: int = 100
    frames_per_possession: int = 125
    seed: int = 0
    n_teams: int = 6
    frame_rate: float = FRAME_RATE
    shots: bool = True
    pass_rate: float = 0.25
    truth: Optional[OutcomeTruth] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        check_simplex_weights(self.gamma, "gamma")
        if not 0 < self.rho <= 1:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if self.sigma_d_ft < 0:
            raise ValueError("sigma_d_ft must be nonnegative")
        if self.n_possessions < 0 or self.frames_per_possession < 1:
            raise ValueError("sizes must be positive")

    @property
    def n_players(self):
        return 5 * self.n_teams

    def resolved_truth(self) -> OutcomeTruth:
        if self.truth is not None:
            return self.truth
        rng = np.random.default_rng([self.seed, 0x7e57])
        return draw_truth(self.n_players, rng, roles=ROLE_OF_SLOT[np.arange(self.n_players) % 5])


def _sample_in_region(rng, region_tiles, geometry):
    tile = region_tiles[rng.integers(len(region_tiles))]
    center = geometry.tile_center(tile)
    s = geometry.tile_size_ft
    return center + rng.uniform(-0.5 * s, 0.5 * s, 2) * 0.999


def _hidden_matchups(rng, T, rho):
    hidden = np.empty((T, 5), dtype=int)
    hidden[0] = np.arange(5)
    for t in range(1, T):
        switch = rng.random(5) >= rho
        offs = rng.integers(1, 5, size=5)
        hidden[t] = np.where(switch, (hidden[t - 1] + offs) % 5, hidden[t - 1])
    return hidden


def _offender_paths(rng, T, dt, anchors_fn):
    pos = np.empty((T, 5, 2))
    anchors = anchors_fn()
    pos[0] = np.clip(anchors + rng.normal(0, 1.0, (5, 2)), [4.0, 3.0], [40.0, 47.0])
    kappa, noise = 0.6, 3.0
    for t in range(1, T):
        redraw = rng.random(5) < dt / 3.0
        if redraw.any():
            fresh = anchors_fn()
            anchors[redraw] = fresh[redraw]
        pos[t] = pos[t - 1] + kappa * (anchors - pos[t - 1]) * dt \
            + noise * np.sqrt(dt) * rng.standard_normal((5, 2))
        pos[t] = np.clip(pos[t], [4.0, 3.0], [40.0, 47.0])
    return pos


def _ball_path(rng, offense, dt, pass_rate, final_handler=None):
    T = len(offense)
    flight = max(1, int(round(0.4 / dt)))
    handler = np.empty(T, dtype=int)
    holder = 0
    events = []
    t = 0
    while True:
        t += int(np.ceil(rng.exponential(1.0 / pass_rate) / dt))
        if t >= T:
            break
        receiver = (holder + rng.integers(1, 5)) % 5
        events.append((t, holder, receiver))
        holder = receiver
        t += flight
    if final_handler is not None:
        cutoff = T - 2 * flight - 3
        events = [e for e in events if e[0] + flight < cutoff]
        last = events[-1][2] if events else 0
        if last != final_handler:
            start = max(cutoff, (events[-1][0] + flight + 1) if events else 0)
            events.append((start, last, final_handler))
    ball = np.empty((T, 2))
    holder = 0
    handler[:] = 0
    ev = iter(events + [(T + 1, None, None)])
    nxt = next(ev)
    t = 0
    while t < T:
        if t == nxt[0]:
            _, src, dst = nxt
            for s in range(flight):
                if t + s >= T:
                    break
                w = (s + 1) / (flight + 1)
                ball[t + s] = (1 - w) * offense[t, src] + w * offense[min(t + flight, T - 1), dst]
                handler[t + s] = -1
            t += flight
            holder = dst
            nxt = next(ev)
            continue
        ball[t] = offense[t, holder]
        handler[t] = holder
        t += 1
    return ball, handler


def _reflect_into(pos, geometry):
    hi = np.array([geometry.depth_ft, geometry.width_ft])
    pos = np.abs(pos)
    return hi - np.abs(hi - pos)


def simulate_possession(config: SynthConfig, rng, truth: Optional[OutcomeTruth] = None,
                        pid="0", teams=None, geometry: CourtGeometry = DEFAULT_COURT,
                        regions=None):
    """Simulate one possession and its hidden matchups.

    Returns
    -------
    possession : Possession
    hidden : ndarray (T, 5)
        ``hidden[t, j]`` is the offender slot defender ``j`` guards.
    info : dict
        True outcome code, region and guarding fractions for the ledger.
    """
    rng = np.random.default_rng(rng)
    truth = truth if truth is not None else config.resolved_truth()
    regions = synthetic_regions(geometry) if regions is None else regions
    region_tiles = [np.flatnonzero(regions == b) for b in range(N_BASIS)]
    T = config.frames_per_possession
    dt = 1.0 / config.frame_rate
    if teams is None:
        teams = rng.choice(config.n_teams, size=2, replace=False)
    off_team, def_team = int(teams[0]), int(teams[1])
    off_ids = np.arange(5) + 5 * off_team
    def_ids = np.arange(5) + 5 * def_team

    hidden = _hidden_matchups(rng, T, config.rho) if config.rho < 1 else np.tile(np.arange(5), (T, 1))
    Z = np.zeros((5, 5))
    np.add.at(Z, (np.repeat(np.arange(5)[None], T, 0), hidden), 1.0 / T)

    code = 0
    shot_loc = None
    if config.shots:
        probs = frequency_prob(truth.alpha[off_ids], truth.beta[def_ids], Z)
        code = int(rng.choice(len(probs), p=probs))
    slot, region = (int(v) for v in decode_outcome(code, N_BASIS))
    if code:
        shot_loc = _sample_in_region(rng, region_tiles[region], geometry)

    profiles = truth.offense_profile[off_ids]

    def anchors_fn():
        out = np.empty((5, 2))
        for k in range(5):
            b = rng.choice(N_BASIS, p=profiles[k])
            out[k] = _sample_in_region(rng, region_tiles[b], geometry)
        return out

    offense = _offender_paths(rng, T, dt, anchors_fn)
    if shot_loc is not None:
        ramp = np.clip((np.arange(T) - (T - 26)) / 25.0, 0, 1)
        offense[:, slot] = (1 - ramp[:, None]) * offense[:, slot] + ramp[:, None] * shot_loc
    ball, handler = _ball_path(rng, offense, dt, config.pass_rate,
                               final_handler=slot if code else None)
    model = MatchupModel(tuple(config.gamma), max(config.sigma_d_ft, 1e-12) ** 2,
                         min(config.rho, 0.999999))
    mu = emission_mean(offense, ball, model, geometry.hoop)               # (T, K, 2)
    guarded = np.take_along_axis(mu, hidden[..., None], axis=1)         # (T, J, 2)
    defense = guarded + config.sigma_d_ft * rng.standard_normal((T, 5, 2))
    defense = _reflect_into(defense, geometry)

    shot = None
    info = {"outcome": code, "region": region, "Z": Z.tolist()}
    if code:
        f = T - 1
        j = int(np.argmin(np.where(hidden[f] == slot,
                                   np.linalg.norm(defense[f] - shot_loc, axis=1), np.inf)))
        if not np.any(hidden[f] == slot):
            j = int(np.argmin(np.linalg.norm(defense[f] - shot_loc, axis=1)))
        dist = float(np.linalg.norm(defense[f, j] - shot_loc))
        capped = min(dist, truth.distance_cap)
        sid, did = off_ids[slot], def_ids[j]
        p_make = make_prob(truth.theta[sid, region], truth.phi[did, region], truth.xi[region], capped)
        made = bool(rng.random() < p_make)
        shot = ShotEvent(slot, (float(shot_loc[0]), float(shot_loc[1])), made, f)
        info.update(made=made, primary_defender=j, distance=dist)
    possession = Possession(str(pid), np.arange(T) * dt, offense, defense, ball, handler, shot,
                            off_team, def_team, tuple(off_ids.tolist()), tuple(def_ids.tolist()))
    return possession, hidden, info


def simulate_corpus(config: SynthConfig, geometry: CourtGeometry = DEFAULT_COURT):
    """Simulate ``config.n_possessions`` possessions and their ground-truth ledger.

    Each possession gets its own child seed, so results do not depend on
    generation order.
    """
    truth = config.resolved_truth()
    regions = synthetic_regions(geometry)
    children = np.random.SeedSequence(config.seed).spawn(config.n_possessions)
    possessions, records = [], []
    for i, child in enumerate(children):
        p, hidden, info = simulate_possession(config, np.random.default_rng(child), truth,
                                              pid=f"syn-{i:06d}", geometry=geometry,
                                              regions=regions)
        possessions.append(p)
        records.append({"possession_id": p.id, "hidden": hidden.tolist(), **info})
    ledger = {
        "config": {k: v for k, v in asdict(config).items() if k != "truth"},
        "truth": truth.to_dict(),
        "regions": regions.tolist(),
        "possessions": records,
    }
    ledger["config"]["gamma"] = list(config.gamma)
    return possessions, ledger


def write_ledger(ledger, path):
    with open(path, "w") as fh:
        json.dump(ledger, fh, sort_keys=True)


def read_ledger(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# outcome-level simulation (no tracking), for large model-comparison studies

def league_rosters(n_teams, roster_size=10):
    """Player ids and roles for a league; roster roles are 3 guards, 4 wings, 3 bigs."""
    base = np.array([0, 0, 0, 1, 1, 1, 1, 2, 2, 2])
    roles = np.resize(base, roster_size)
    ids = np.arange(n_teams * roster_size).reshape(n_teams, roster_size)
    return ids, np.tile(roles, n_teams)


def _lineup(rng, roster, roles_of):
    r = roles_of[roster]
    g = rng.choice(roster[r == 0], 2, replace=False)
    w = rng.choice(roster[r == 1], 2, replace=False)
    b = rng.choice(roster[r == 2], 1, replace=False)
    return np.concatenate([g, w, b])


def simulate_outcome_data(truth: OutcomeTruth, n_possessions, rng, n_teams, roster_size=10,
                          switch_concentration=6.0, cross_match=0.0):
    """Possession outcomes drawn straight from the frequency and efficiency models.

    Guarding fractions mix a same-role man-to-man assignment with a random
    row-stochastic switching component. With probability ``cross_match`` a
    possession uses a random cross-role assignment instead. The defender distance at release
    is gamma distributed with a region-specific mean plus a per-defender
    offset, then capped.

    Returns ``(FrequencyDesign, EfficiencyDesign)``.
    """
    rng = np.random.default_rng(rng)
    ids, _ = league_rosters(n_teams, roster_size)
    roles = truth.role
    off_ids = np.empty((n_possessions, 5), dtype=int)
    def_ids = np.empty((n_possessions, 5), dtype=int)
    Z = np.empty((n_possessions, 5, 5))
    for n in range(n_possessions):
        a, b = rng.choice(n_teams, 2, replace=False)
        off_ids[n] = _lineup(rng, ids[a], roles)
        def_ids[n] = _lineup(rng, ids[b], roles)
        perm = np.arange(5)
        for grp in (np.array([0, 1]), np.array([2, 3])):
            if rng.random() < 0.5:
                perm[grp] = perm[grp[::-1]]
        if rng.random() < cross_match:
            perm = rng.permutation(5)
        eps = rng.beta(1.0, switch_concentration)
        noise = rng.dirichlet(np.ones(5), size=5)
        Z[n] = (1 - eps) * np.eye(5)[perm] + eps * noise
    probs = frequency_prob(truth.alpha[off_ids], truth.beta[def_ids], Z)
    cum = probs.cumsum(axis=1)
    u = rng.random((n_possessions, 1))
    outcome = np.minimum((u > cum).sum(axis=1), probs.shape[1] - 1)
    freq = FrequencyDesign(outcome, Z, off_ids, def_ids, N_BASIS)

    shots = np.flatnonzero(outcome > 0)
    slot, basis = decode_outcome(outcome[shots], N_BASIS)
    shooter = off_ids[shots, slot]
    # primary defender: the one guarding the shooter most
    j = np.argmax(Z[shots, :, slot], axis=1)
    defender = def_ids[shots, j]
    mean = np.maximum(MEAN_DISTANCE[basis] + truth.distance_offset[defender], 0.5)
    raw = rng.gamma(3.0, mean / 3.0)
    capped = np.minimum(raw, truth.distance_cap)
    p = make_prob(truth.theta[shooter, basis], truth.phi[defender, basis], truth.xi[basis], capped)
    made = (rng.random(len(shots)) < p).astype(int)
    eff = EfficiencyDesign(made, shooter, basis, defender, capped, truth.distance_cap, raw, N_BASIS)
    return freq, eff


def defender_profiles(truth: OutcomeTruth, rng, noise=0.03):
    """Time-in-basis profiles for defenders, driven by the role they guard."""
    rng = np.random.default_rng(rng)
    base = ROLE_PROFILES[truth.role]
    prof = np.abs(base + rng.normal(0, noise, base.shape))
    return prof / prof.sum(axis=1, keepdims=True)
