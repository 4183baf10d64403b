"""Who's guarding whom: a per-defender hidden Markov model fit by EM.

Each defender follows an independent Markov chain over the five offenders
(stay with probability ``rho``, otherwise switch uniformly). Given the man
being guarded, the defender's position is isotropic Gaussian around a
convex combination of the offender, ball and hoop locations.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .court import DEFAULT_COURT, Possession
from .validation import check_possessions, check_positive, check_probability

logger = logging.getLogger(__name__)

N_PLAYERS = 5
RHO_MAX = 0.9999
RHO_MIN = 1e-4
SIGMA_SQ_FLOOR = 1e-10
DESIGN_COLUMNS = ("offender", "ball", "hoop")


class RankDeficientDesign(ValueError):
    """The offender/ball/hoop design matrix has collinear columns."""


@dataclass(frozen=True)
class MatchupModel:
    gamma: tuple = (1 / 3, 1 / 3, 1 / 3)
    sigma_d_sq: float = 4.0
    rho: float = 0.9

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=float)
        if g.shape != (3,) or abs(g.sum() - 1.0) > 1e-9:
            raise ValueError(f"gamma must have three weights summing to 1, got {self.gamma}")
        object.__setattr__(self, "gamma", tuple(float(v) for v in g))
        check_positive(self.sigma_d_sq, "sigma_d_sq")
        check_probability(self.rho, "rho")

    def to_dict(self):
        return {"gamma": list(self.gamma), "sigma_d_sq": self.sigma_d_sq, "rho": self.rho}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["gamma"]), float(d["sigma_d_sq"]), float(d["rho"]))


@dataclass(frozen=True)
class MatchupPosterior:
    """Smoothed matchup probabilities for one possession.

    ``E[t, j, k]`` is the probability defender ``j`` guards offender ``k`` at
    frame ``t``. ``A[t - 1, j, k, k2]`` is the joint probability that ``j``
    guards ``k`` at ``t`` and guarded ``k2`` at ``t - 1``.
    """

    E: np.ndarray
    A: Optional[np.ndarray]
    loglik: float
    possession_id: str = ""

    @property
    def Z(self) -> np.ndarray:
        """Guarding-fraction matrix ``Z[j, k]``: time average of ``E``."""
        return self.E.mean(axis=0)


def emission_mean(offender, ball, model: MatchupModel, hoop=DEFAULT_COURT.hoop):
    """Canonical defender location for guarding ``offender``.

    Broadcasts over leading axes, so ``offender`` may be a single point,
    a frame's (5, 2) offense or a possession's (T, 5, 2) offense (with ball
    shaped (T, 2), which is then broadcast against the offender axis).
    """
    go, gb, gh = model.gamma
    offender = np.asarray(offender, dtype=float)
    ball = np.asarray(ball, dtype=float)
    if offender.ndim == ball.ndim + 1:
        ball = ball[..., None, :]
    return go * offender + gb * ball + gh * np.asarray(hoop, dtype=float)


def _emission_loglik(defense, offense, ball, model, hoop):
    """log N(D_tj | mu_tk, sigma^2 I) with shape (..., T, J, K)."""
    mu = emission_mean(offense, ball, model, hoop)                 # (..., T, K, 2)
    d2 = ((defense[..., :, None, :] - mu[..., None, :, :]) ** 2).sum(-1)
    s2 = model.sigma_d_sq
    return -np.log(2 * np.pi * s2) - 0.5 * d2 / s2


def _forward_backward_batch(logb, mask, rho, want_pairwise=False):
    """Scaled forward-backward on padded batches.

    Parameters
    ----------
    logb : ndarray (N, T, J, K)
        Emission log-likelihoods; padded frames are ignored.
    mask : ndarray (N, T) of bool
        Valid frames; each row must be a prefix of True values.

    Returns
    -------
    gamma : ndarray (N, T, J, K)
        Smoothed marginals (zero on padded frames).
    loglik : ndarray (N,)
    stay : ndarray (N,)
        Expected number of (t, j) transitions that keep the same offender.
    moves : ndarray (N,)
        Expected number of switching transitions.
    pair : ndarray (N, T-1, J, K, K) or None
    """
    n, T, J, K = logb.shape
    switch = (1.0 - rho) / (K - 1)
    m = logb.max(axis=-1, keepdims=True)
    e = np.exp(logb - m)
    alpha = np.empty_like(e)
    logc = np.zeros((n, T, J))
    a = e[:, 0] / K
    c = a.sum(-1)
    alpha[:, 0] = a / c[..., None]
    logc[:, 0] = np.log(c)
    for t in range(1, T):
        pred = switch + (rho - switch) * alpha[:, t - 1]
        a = e[:, t] * pred
        c = a.sum(-1)
        valid = mask[:, t][:, None]
        alpha[:, t] = np.where(valid[..., None], a / c[..., None], alpha[:, t - 1])
        logc[:, t] = np.where(valid, np.log(c), 0.0)
    loglik = ((logc + np.where(mask[..., None], m[..., 0], 0.0)).sum(axis=(1, 2)))

    beta = np.ones_like(e)
    for t in range(T - 2, -1, -1):
        valid = mask[:, t + 1][:, None, None]
        eb = e[:, t + 1] * beta[:, t + 1]
        nxt = (switch * eb.sum(-1, keepdims=True) + (rho - switch) * eb) / np.exp(logc[:, t + 1])[..., None]
        beta[:, t] = np.where(valid, nxt, 1.0)
    gamma = alpha * beta
    gamma /= gamma.sum(-1, keepdims=True)
    gamma *= mask[..., None, None]

    # stay mass: sum_t sum_k alpha_{t-1}(k) rho e_t(k) beta_t(k) / c_t
    if T > 1:
        ct = np.exp(logc[:, 1:])[..., None]
        stay_t = (alpha[:, :-1] * rho * e[:, 1:] * beta[:, 1:] / ct).sum(-1)   # (N, T-1, J)
        valid = mask[:, 1:]
        stay = (stay_t * valid[..., None]).sum(axis=(1, 2))
        moves = valid.sum(1) * J - stay
    else:
        stay = np.zeros(n)
        moves = np.zeros(n)
    pair = None
    if want_pairwise and T > 1:
        trans = np.full((K, K), switch)
        np.fill_diagonal(trans, rho)
        # pair[t-1, j, k, k2] = alpha_{t-1}(k2) P(k2 -> k) e_t(k) beta_t(k) / c_t
        pair = (alpha[:, :-1, :, None, :] * trans.T[None, None, None]
                * (e[:, 1:] * beta[:, 1:])[..., None]
                / np.exp(logc[:, 1:])[..., None, None])
    return gamma, loglik, stay, moves, pair


def _stack(possessions):
    T = max(len(p) for p in possessions)
    n = len(possessions)
    off = np.zeros((n, T, N_PLAYERS, 2))
    dfn = np.zeros((n, T, N_PLAYERS, 2))
    ball = np.zeros((n, T, 2))
    mask = np.zeros((n, T), dtype=bool)
    for i, p in enumerate(possessions):
        L = len(p)
        off[i, :L] = p.offense
        dfn[i, :L] = p.defense
        ball[i, :L] = p.ball
        mask[i, :L] = True
    return off, dfn, ball, mask


def forward_backward(possession: Possession, model: MatchupModel,
                     hoop=DEFAULT_COURT.hoop) -> MatchupPosterior:
    """Exact smoothing marginals and pairwise expectations for one possession."""
    check_possessions([possession])
    off = np.asarray(possession.offense)[None]
    dfn = np.asarray(possession.defense)[None]
    ball = np.asarray(possession.ball)[None]
    logb = _emission_loglik(dfn, off, ball, model, hoop)
    mask = np.ones((1, len(possession)), dtype=bool)
    g, ll, _, _, pair = _forward_backward_batch(logb, mask, model.rho, want_pairwise=True)
    return MatchupPosterior(g[0], None if pair is None else pair[0], float(ll[0]), possession.id)


def _batches(possessions, max_cells=4_000_000):
    """Group possessions into padded batches of bounded size, by length."""
    order = sorted(range(len(possessions)), key=lambda i: len(possessions[i]))
    batch = []
    for i in order:
        L = len(possessions[i])
        if batch and (len(batch) + 1) * L * 25 > max_cells:
            yield batch
            batch = []
        batch.append(i)
    if batch:
        yield batch


def gamma_sufficient_stats(possessions, posteriors, hoop=DEFAULT_COURT.hoop):
    """Weighted normal equations for the stacked (x and y) design.

    Returns ``(G, h, total_weight)`` with ``G = sum w x x^T`` and
    ``h = sum w x d`` over rows indexed by (t, j, k, coordinate) with weight
    ``E[t, j, k]``.
    """
    G = np.zeros((3, 3))
    h = np.zeros(3)
    total = 0.0
    H = np.asarray(hoop, dtype=float)
    for p, post in zip(possessions, posteriors):
        E = post.E
        O = np.asarray(p.offense)                          # (T, K, 2)
        B = np.broadcast_to(np.asarray(p.ball)[:, None, :], O.shape)
        Hb = np.broadcast_to(H, O.shape)
        X = np.stack([O, B, Hb], axis=-1)                  # (T, K, 2, 3)
        wk = E.sum(axis=1)                                 # (T, K)
        G += np.einsum("tk,tkci,tkcj->ij", wk, X, X)
        ED = np.einsum("tjk,tjc->tkc", E, np.asarray(p.defense))
        h += np.einsum("tkci,tkc->i", X, ED)
        total += 2.0 * E.sum()
    return G, h, total


def constrained_gls(G, h, columns=DESIGN_COLUMNS):
    """Minimize weighted squared error subject to the weights summing to 1.

    ``G`` and ``h`` are the weighted normal-equation terms ``X^T W X`` and
    ``X^T W d``. The unconstrained estimate is projected onto the
    constraint with the closed-form Lagrangian correction.
    """
    G = np.asarray(G, dtype=float)
    h = np.asarray(h, dtype=float)
    evals, evecs = np.linalg.eigh(G)
    if evals[0] <= 1e-10 * max(evals[-1], 1e-300):
        null = evecs[:, 0]
        involved = [columns[i] for i in np.flatnonzero(np.abs(null) > 1e-3)]
        raise RankDeficientDesign("design matrix is rank deficient; collinear columns: "
                                  + ", ".join(involved))
    ones = np.ones(len(h))
    g_gls = np.linalg.solve(G, h)
    Ginv1 = np.linalg.solve(G, ones)
    return g_gls + Ginv1 * (1.0 - ones @ g_gls) / (ones @ Ginv1)


def m_step_gamma(possessions, posteriors, hoop=DEFAULT_COURT.hoop):
    """Constrained GLS update of the convex weights and the emission variance.

    The variance divides the weighted residual sum of squares by the total
    weight, i.e. the number of scalar (x or y) observations, since each
    defender's weights over offenders sum to one per frame.
    """
    G, h, total = gamma_sufficient_stats(possessions, posteriors, hoop)
    if total <= 0:
        raise ValueError("posterior weights have no mass")
    gamma = constrained_gls(G, h)
    rss = 0.0
    for p, post in zip(possessions, posteriors):
        mu = gamma[0] * np.asarray(p.offense) + gamma[1] * np.asarray(p.ball)[:, None, :] \
            + gamma[2] * np.asarray(hoop)
        d2 = ((np.asarray(p.defense)[:, :, None, :] - mu[:, None, :, :]) ** 2).sum(-1)
        rss += float((post.E * d2).sum())
    return gamma, max(rss / total, SIGMA_SQ_FLOOR)


def m_step_rho(stay_mass, switch_mass, rho_max=RHO_MAX):
    """Maximum-likelihood retention probability from expected transition counts.

    Maximizes ``stay * log(rho) + switch * log((1 - rho) / 4)``, whose
    solution is the fraction of expected transitions that stay put.
    """
    stay_mass = float(stay_mass)
    switch_mass = float(switch_mass)
    if stay_mass < 0 or switch_mass < 0 or stay_mass + switch_mass <= 0:
        raise ValueError("transition masses must be nonnegative with positive total")
    rho = stay_mass / (stay_mass + switch_mass)
    if rho > rho_max:
        warnings.warn(f"no switching mass; clamping rho at {rho_max}", RuntimeWarning)
        rho = rho_max
    if rho < RHO_MIN:
        warnings.warn(f"no staying mass; clamping rho at {RHO_MIN}", RuntimeWarning)
        rho = RHO_MIN
    return rho


def transition_masses(posterior: MatchupPosterior):
    """Expected (stay, switch) transition counts from a pairwise posterior."""
    if posterior.A is None:
        return 0.0, 0.0
    A = posterior.A
    stay = float(np.einsum("tjkk->", A))
    return stay, float(A.sum()) - stay


def initial_sigma_sq(possessions):
    """Sample variance of each defender's distance to the nearest offender."""
    dists = []
    for p in possessions:
        d = np.linalg.norm(np.asarray(p.defense)[:, :, None, :]
                           - np.asarray(p.offense)[:, None, :, :], axis=-1)
        dists.append(d.min(axis=-1).ravel())
    v = float(np.var(np.concatenate(dists)))
    return v if v > 1e-6 else 1.0


def _e_step_stats(possessions, model, hoop):
    posts = [None] * len(possessions)
    lls = np.zeros(len(possessions))
    stays = np.zeros(len(possessions))
    moves = np.zeros(len(possessions))
    for idx in _batches(possessions):
        ps = [possessions[i] for i in idx]
        off, dfn, ball, mask = _stack(ps)
        logb = _emission_loglik(dfn, off, ball, model, hoop)
        g, ll, st, mv, _ = _forward_backward_batch(logb, mask, model.rho)
        for b, i in enumerate(idx):
            posts[i] = MatchupPosterior(g[b, : len(ps[b])], None, float(ll[b]), ps[b].id)
            lls[i], stays[i], moves[i] = ll[b], st[b], mv[b]
    # sum in corpus order so results do not depend on batching
    return posts, float(np.sum(lls)), float(np.sum(stays)), float(np.sum(moves))


def fit_em(possessions, init: Optional[MatchupModel] = None, tol=1e-6, max_iters=200,
           hoop=DEFAULT_COURT.hoop, fix_rho=False):
    """Fit the matchup HMM by expectation-maximization.

    Returns
    -------
    model : MatchupModel
    trace : list of float
        Observed-data log-likelihood evaluated at each iterate, starting
        with the initial model. EM guarantees it never decreases.
    posteriors : list of MatchupPosterior
        E-step output under the returned model.
    """
    possessions = check_possessions(possessions)
    if init is None:
        init = MatchupModel((1 / 3, 1 / 3, 1 / 3), initial_sigma_sq(possessions), 0.9)
    model = init
    posts, ll, stay, moves = _e_step_stats(possessions, model, hoop)
    trace = [ll]
    for it in range(max_iters):
        gamma, s2 = m_step_gamma(possessions, posts, hoop)
        rho = model.rho if fix_rho else m_step_rho(stay, moves)
        model = MatchupModel(tuple(gamma / gamma.sum()), s2, rho)
        posts, ll, stay, moves = _e_step_stats(possessions, model, hoop)
        trace.append(ll)
        change = (trace[-1] - trace[-2]) / max(abs(trace[-2]), 1e-300)
        logger.debug("EM iter %d: loglik %.6f gamma %s sigma^2 %.4f rho %.4f",
                     it + 1, ll, np.round(gamma, 4), s2, rho)
        if abs(change) < tol:
            break
    return model, trace, posts


class MatchupHMM(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_em`.

    ``transform`` maps possessions to their (N, 5, 5) guarding-fraction
    matrices; ``predict_proba`` returns the full per-frame posteriors.
    """

    def __init__(self, gamma_init=(1 / 3, 1 / 3, 1 / 3), sigma_d_sq_init=None, rho_init=0.9,
                 tol=1e-6, max_iter=200, hoop=DEFAULT_COURT.hoop):
        self.gamma_init = gamma_init
        self.sigma_d_sq_init = sigma_d_sq_init
        self.rho_init = rho_init
        self.tol = tol
        self.max_iter = max_iter
        self.hoop = hoop

    def fit(self, X, y=None):
        X = check_possessions(X)
        s2 = self.sigma_d_sq_init if self.sigma_d_sq_init is not None else initial_sigma_sq(X)
        init = MatchupModel(tuple(self.gamma_init), s2, self.rho_init)
        self.model_, self.loglik_trace_, _ = fit_em(X, init, self.tol, self.max_iter, self.hoop)
        self.n_iter_ = len(self.loglik_trace_) - 1
        return self

    def predict_proba(self, X) -> List[MatchupPosterior]:
        check_is_fitted(self, "model_")
        X = check_possessions(X)
        return _e_step_stats(X, self.model_, self.hoop)[0]

    def transform(self, X):
        return np.stack([p.Z for p in self.predict_proba(X)])

    def score(self, X, y=None):
        check_is_fitted(self, "model_")
        return _e_step_stats(check_possessions(X), self.model_, self.hoop)[1]


# ---------------------------------------------------------------------------
# attention and entropy

def attention_scores(possessions, posteriors):
    """Average defensive attention each offender draws, on and off the ball.

    Attention is total defender-time spent guarding the player divided by
    the player's time on court, computed separately over frames where the
    player does and does not hold the ball. Returns
    ``{player_id: {"on_ball": float, "off_ball": float}}``; a split with no
    playing time is omitted for that player.
    """
    guarded = {}
    played = {}
    for p, post in zip(possessions, posteriors):
        load = post.E.sum(axis=1)                                  # (T, K)
        handler = np.asarray(p.ball_handler)
        for slot, pid in enumerate(p.offense_ids):
            on = handler == slot
            for key, sel in (("on_ball", on), ("off_ball", ~on)):
                guarded[(pid, key)] = guarded.get((pid, key), 0.0) + float(load[sel, slot].sum())
                played[(pid, key)] = played.get((pid, key), 0) + int(sel.sum())
    out = {}
    for (pid, key), n in sorted(played.items()):
        if n > 0:
            out.setdefault(pid, {})[key] = guarded[(pid, key)] / n
    return out


def defensive_entropy(Z) -> np.ndarray:
    """Base-2 entropy of each defender's guarding fractions (rows of ``Z``)."""
    Z = np.asarray(Z, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(Z > 0, Z * np.log2(np.where(Z > 0, Z, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=-1), 0.0)


def team_entropies(possessions, Zs):
    """Team defensive entropy and induced entropy.

    Returns ``(defense, induced)`` dicts keyed by team id: the mean entropy
    over all defenders in the team's defensive possessions, and the mean
    over all defenders faced by the team's offense.
    """
    d_sum, d_n, o_sum, o_n = {}, {}, {}, {}
    for p, Z in zip(possessions, Zs):
        h = defensive_entropy(Z)
        d_sum[p.defense_team] = d_sum.get(p.defense_team, 0.0) + h.sum()
        d_n[p.defense_team] = d_n.get(p.defense_team, 0) + len(h)
        o_sum[p.offense_team] = o_sum.get(p.offense_team, 0.0) + h.sum()
        o_n[p.offense_team] = o_n.get(p.offense_team, 0) + len(h)
    return ({t: d_sum[t] / d_n[t] for t in sorted(d_sum)},
            {t: o_sum[t] / o_n[t] for t in sorted(o_sum)})
