"""Shot-frequency multinomial logit fit by local variational inference.

Each possession ends in one of ``5 B + 1`` outcomes with logits
``eta[k, b] = alpha[k, b] + sum_j Z[j, k] beta[j, b]`` against the no-shot
baseline. Log-sum-exp is bounded above by a quadratic with the fixed
curvature matrix ``A = (I - 11^T / (K + 1)) / 2``, which makes the bound on
the likelihood Gaussian in the coefficients. With normal hierarchical
priors the approximate posterior is Gaussian with a precision matrix that
does not depend on the tangent points, so only the mean is iterated.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg, sparse
from scipy.special import logsumexp
from sklearn.base import BaseEstimator

from .design import FrequencyDesign, N_SLOTS, decode_outcome

logger = logging.getLogger(__name__)

VARIANTS = ("full", "common", "offense", "shooter")


class ELBODecreaseError(RuntimeError):
    """The variational bound went down; this signals a bug, not bad data."""


def bohning_bound_matrix(K):
    """Curvature bound ``A = (I_K - 1 1^T / (K + 1)) / 2`` for ``K`` free logits."""
    if K < 1:
        raise ValueError("K must be at least 1")
    return 0.5 * (np.eye(K) - np.ones((K, K)) / (K + 1))


def lse0(eta):
    """``log(1 + sum exp(eta))`` along the last axis."""
    eta = np.asarray(eta, dtype=float)
    pad = np.zeros(eta.shape[:-1] + (1,))
    return logsumexp(np.concatenate([pad, eta], axis=-1), axis=-1)


def bohning_bound(eta, psi):
    """Quadratic upper bound on :func:`lse0` at ``eta``, expanded around ``psi``."""
    eta = np.asarray(eta, dtype=float)
    psi = np.asarray(psi, dtype=float)
    A = bohning_bound_matrix(eta.shape[-1])
    g = np.exp(psi - lse0(psi)[..., None])
    d = eta - psi
    return lse0(psi) + (g * d).sum(-1) + 0.5 * np.einsum("...i,ij,...j->...", d, A, d)


@dataclass(frozen=True)
class FrequencyPrior:
    """Prior variances of the individual effects and of their group means."""

    sigma_alpha_sq: float = 1.0
    sigma_beta_sq: float = 0.01
    tau_alpha_sq: float = 1.0
    tau_beta_sq: float = 0.01

    def __post_init__(self):
        for name in ("sigma_alpha_sq", "sigma_beta_sq", "tau_alpha_sq", "tau_beta_sq"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_ratio(cls, ratio, sigma_total=1.01, tau_alpha_sq=1.0, tau_beta_sq=0.01):
        """Split ``sigma_total`` so that ``sigma_beta_sq / sigma_alpha_sq = ratio``."""
        sa = sigma_total / (1.0 + ratio)
        return cls(sa, sigma_total - sa, tau_alpha_sq, tau_beta_sq)


def variant_design(design: FrequencyDesign, variant):
    """Recode a design for the shooter-only variant (6 outcomes, one basis)."""
    if variant != "shooter":
        return design
    slot, _ = decode_outcome(design.outcome, design.n_basis)
    return FrequencyDesign(np.where(design.outcome > 0, slot + 1, 0), design.Z,
                           design.offense_ids, design.defense_ids, 1)


class _Layout:
    """Column positions of ``[alpha, mu_alpha, beta, mu_beta]`` in the parameter vector."""

    def __init__(self, offense_players, defense_players, defender_group, n_groups, n_basis,
                 with_defense):
        self.B = n_basis
        self.off = np.asarray(offense_players, dtype=int)
        self.dfn = np.asarray(defense_players, dtype=int) if with_defense else np.zeros(0, int)
        self.group = np.asarray(defender_group, dtype=int) if with_defense else np.zeros(0, int)
        self.n_groups = n_groups if with_defense else 0
        self.with_defense = with_defense
        self.alpha0 = 0
        self.mu_alpha0 = len(self.off) * n_basis
        self.beta0 = self.mu_alpha0 + n_basis
        self.mu_beta0 = self.beta0 + len(self.dfn) * n_basis
        self.size = self.mu_beta0 + self.n_groups * n_basis
        self.off_pos = {int(p): i for i, p in enumerate(self.off)}
        self.dfn_pos = {int(p): i for i, p in enumerate(self.dfn)}

    def prior_precision(self, prior: FrequencyPrior):
        B = self.B
        rows, cols, vals = [], [], []

        def tie(child, parent, var):
            w = 1.0 / var
            rows.extend([child, parent, child, parent])
            cols.extend([child, parent, parent, child])
            vals.extend([w, w, -w, -w])

        for i in range(len(self.off)):
            for b in range(B):
                tie(self.alpha0 + i * B + b, self.mu_alpha0 + b, prior.sigma_alpha_sq)
        for i in range(len(self.dfn)):
            for b in range(B):
                tie(self.beta0 + i * B + b, self.mu_beta0 + self.group[i] * B + b,
                    prior.sigma_beta_sq)
        hyper = [(self.mu_alpha0 + b, prior.tau_alpha_sq) for b in range(B)]
        hyper += [(self.mu_beta0 + g, prior.tau_beta_sq) for g in range(self.n_groups * B)]
        for idx, var in hyper:
            rows.append(idx)
            cols.append(idx)
            vals.append(1.0 / var)
        return sparse.coo_matrix((vals, (rows, cols)), shape=(self.size, self.size)).toarray()

    def design_matrix(self, design: FrequencyDesign):
        """Sparse ``X`` with rows ``(n, k, b)`` so that ``eta = (X m).reshape(N, 5 B)``."""
        N, B = len(design), self.B
        K = N_SLOTS * B
        n_idx = np.arange(N)[:, None, None]
        k_idx = np.arange(N_SLOTS)[None, :, None]
        b_idx = np.arange(B)[None, None, :]
        row = n_idx * K + k_idx * B + b_idx
        off_col = np.vectorize(self.off_pos.__getitem__, otypes=[int])(design.offense_ids)
        rows = [np.broadcast_to(row, (N, N_SLOTS, B)).ravel()]
        cols = [np.broadcast_to(self.alpha0 + off_col[:, :, None] * B + b_idx,
                                (N, N_SLOTS, B)).ravel()]
        vals = [np.ones(N * K)]
        if self.with_defense:
            dcol = np.vectorize(self.dfn_pos.__getitem__, otypes=[int])(design.defense_ids)
            # entry for (n, k, b) and defender slot j: Z[n, j, k] at beta[j, b]
            r = np.broadcast_to(row[:, None], (N, N_SLOTS, N_SLOTS, B))
            c = np.broadcast_to(self.beta0 + dcol[:, :, None, None] * B + b_idx[:, None],
                                (N, N_SLOTS, N_SLOTS, B))
            v = np.broadcast_to(design.Z[:, :, :, None], (N, N_SLOTS, N_SLOTS, B))
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(v.ravel())
        return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                 shape=(N * K, self.size))

    def coefficients(self, m, offense_ids, defense_ids, group_of):
        """Per-possession ``alpha`` (N, 5, B) and ``beta`` (N, 5, B) with prior-mean fallback."""
        B = self.B
        alpha_tab = m[self.alpha0:self.mu_alpha0].reshape(-1, B)
        mu_alpha = m[self.mu_alpha0:self.beta0]
        alpha = np.empty(offense_ids.shape + (B,))
        for idx, pid in np.ndenumerate(offense_ids):
            i = self.off_pos.get(int(pid))
            alpha[idx] = alpha_tab[i] if i is not None else mu_alpha
        beta = np.zeros(defense_ids.shape + (B,))
        if self.with_defense:
            beta_tab = m[self.beta0:self.mu_beta0].reshape(-1, B)
            mu_beta = m[self.mu_beta0:].reshape(self.n_groups, B)
            for idx, pid in np.ndenumerate(defense_ids):
                i = self.dfn_pos.get(int(pid))
                if i is not None:
                    beta[idx] = beta_tab[i]
                else:
                    beta[idx] = mu_beta[_group(group_of, pid, self.n_groups)]
        return alpha, beta


def _group(group_of, pid, n_groups):
    if n_groups <= 1 or group_of is None:
        return 0
    g = group_of.get(int(pid)) if isinstance(group_of, dict) else np.asarray(group_of)[int(pid)]
    return int(g)


@dataclass
class FrequencyPosterior:
    """Gaussian approximate posterior ``N(mean, precision^-1)``.

    The covariance is kept as the Cholesky factor of the precision; use
    :meth:`covariance_diag` or :meth:`solve` instead of forming it.
    """

    mean: np.ndarray
    chol: tuple
    elbo_trace: list
    layout: _Layout
    variant: str
    n_basis: int
    group_of: Optional[object] = None
    converged: bool = True

    def solve(self, v):
        return linalg.cho_solve(self.chol, v)

    def covariance_diag(self):
        P = len(self.mean)
        return np.einsum("ij,ij->j", linalg.cho_solve(self.chol, np.eye(P)), np.eye(P))

    def _table(self, start, stop, players):
        B = self.n_basis
        sd = np.sqrt(self.covariance_diag()[start:stop]).reshape(-1, B)
        return players, self.mean[start:stop].reshape(-1, B), sd

    def alpha(self):
        """``(player_ids, mean (K, B), sd (K, B))`` for offensive effects."""
        L = self.layout
        return self._table(L.alpha0, L.mu_alpha0, L.off)

    def beta(self):
        """``(player_ids, mean (J, B), sd (J, B))`` for defensive effects."""
        L = self.layout
        return self._table(L.beta0, L.mu_beta0, L.dfn)

    def group_means(self):
        L = self.layout
        return (self.mean[L.mu_alpha0:L.beta0],
                self.mean[L.mu_beta0:].reshape(L.n_groups, self.n_basis))

    def predict_proba(self, design: FrequencyDesign):
        """Plug-in outcome probabilities (N, 5 B + 1), no-shot first."""
        design = variant_design(design, self.variant)
        alpha, beta = self.layout.coefficients(self.mean, design.offense_ids,
                                               design.defense_ids, self.group_of)
        eta = alpha + np.einsum("njk,njb->nkb", design.Z, beta)
        full = np.concatenate([np.zeros((len(design), 1)), eta.reshape(len(design), -1)], axis=1)
        return np.exp(full - logsumexp(full, axis=1, keepdims=True))


def fit_frequency_variational(design: FrequencyDesign, prior: FrequencyPrior = FrequencyPrior(),
                              group_of=None, n_groups=3, variant="full", tol=1e-10,
                              max_iter=1000, monotone_slack=1e-6) -> FrequencyPosterior:
    """Fit the frequency model by coordinate ascent on the variational bound.

    Parameters
    ----------
    design : FrequencyDesign
    prior : FrequencyPrior
    group_of : dict or array, optional
        Defender group (0-based) by player id; required for ``variant="full"``.
    variant : {"full", "common", "offense", "shooter"}
        ``common`` shrinks all defenders to one mean per basis, ``offense``
        drops the defensive terms, ``shooter`` additionally collapses the
        bases, leaving 6 outcomes.
    monotone_slack : float
        Allowed relative decrease of the bound between sweeps before
        :class:`ELBODecreaseError` is raised.

    Returns
    -------
    FrequencyPosterior
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    design = variant_design(design, variant)
    B = design.n_basis
    K = N_SLOTS * B
    with_defense = variant in ("full", "common")
    if variant == "full":
        if group_of is None:
            raise ValueError("the full variant needs defender groups")
        groups_used = n_groups
    else:
        groups_used = 1
    off_players = np.unique(design.offense_ids)
    dfn_players = np.unique(design.defense_ids)
    dgroup = [_group(group_of, p, groups_used) for p in dfn_players]
    layout = _Layout(off_players, dfn_players, dgroup, groups_used, B, with_defense)

    P0 = layout.prior_precision(prior)
    N = len(design)
    X = layout.design_matrix(design)
    # sum over the K rows of each possession
    Ssum = sparse.csr_matrix((np.ones(N * K), (np.repeat(np.arange(N), K), np.arange(N * K))),
                             shape=(N, N * K))
    U = Ssum @ X
    H = 0.5 * (X.T @ X).toarray() - (U.T @ U).toarray() / (2.0 * (K + 1))
    prec = P0 + H
    chol = linalg.cho_factor(prec, lower=True)
    logdet_prec = 2.0 * np.log(np.diag(chol[0])).sum()
    logdet_p0 = np.linalg.slogdet(P0)[1]
    A = bohning_bound_matrix(K)

    S = np.zeros((N, K))
    if N:
        slot, basis = decode_outcome(design.outcome, B)
        shot = design.outcome > 0
        S[np.flatnonzero(shot), (slot * B + basis)[shot]] = 1.0

    m = np.zeros(layout.size)
    trace = []
    converged = False
    for it in range(max_iter):
        psi = (X @ m).reshape(N, K)
        lse_psi = lse0(psi)
        g = np.exp(psi - lse_psi[:, None])
        bvec = psi @ A - g
        c = 0.5 * np.einsum("nk,nk->n", psi @ A, psi) - (g * psi).sum(1) + lse_psi
        m = linalg.cho_solve(chol, X.T @ (S + bvec).ravel(), check_finite=False)
        eta = (X @ m).reshape(N, K)
        data = float(((S + bvec) * eta).sum() - 0.5 * np.einsum("nk,nk->", eta @ A, eta) - c.sum())
        elbo = data - 0.5 * m @ P0 @ m + 0.5 * logdet_p0 - 0.5 * logdet_prec
        if trace and elbo < trace[-1] - monotone_slack * (1.0 + abs(trace[-1])):
            raise ELBODecreaseError(f"bound decreased from {trace[-1]:.10g} to {elbo:.10g} "
                                    f"at sweep {it}")
        trace.append(elbo)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * (1.0 + abs(trace[-1])):
            converged = True
            break
        if N == 0:
            converged = True
            break
    if not converged:
        logger.warning("variational fit stopped after %d sweeps without converging", max_iter)
    return FrequencyPosterior(m, chol, trace, layout, variant, B, group_of, converged)


def heldout_loglik(posterior: FrequencyPosterior, design: FrequencyDesign):
    """Held-out log-likelihood split into shooter, basis and full outcome terms.

    The shooter term uses the outcome collapsed to (shooter or no shot), the
    basis term collapses to (basis or no shot). ``basis`` and ``full`` are
    ``nan`` for the shooter-only variant, which has no spatial component.
    """
    probs = posterior.predict_proba(design)
    N = len(design)
    out = {"n": N}
    B = posterior.n_basis
    p0 = probs[:, 0]
    shots = probs[:, 1:].reshape(N, N_SLOTS, B)
    slot, basis = decode_outcome(design.outcome, design.n_basis)
    shot = design.outcome > 0
    idx = np.arange(N)
    by_shooter = shots.sum(axis=2)
    out["shooter"] = float(np.log(np.where(shot, by_shooter[idx, np.maximum(slot, 0)], p0)).sum())
    if posterior.variant == "shooter":
        out["basis"] = np.nan
        out["full"] = np.nan
        return out
    by_basis = shots.sum(axis=1)
    out["basis"] = float(np.log(np.where(shot, by_basis[idx, np.maximum(basis, 0)], p0)).sum())
    out["full"] = float(np.log(probs[idx, design.outcome]).sum())
    return out


class ShotFrequencyModel(BaseEstimator):
    """Estimator wrapper around :func:`fit_frequency_variational`.

    ``fit`` takes a :class:`FrequencyDesign`; ``predict_proba`` returns
    outcome probabilities and ``score`` the mean held-out log-likelihood.
    """

    def __init__(self, sigma_alpha_sq=1.0, sigma_beta_sq=0.01, tau_alpha_sq=1.0, tau_beta_sq=0.01,
                 variant="full", tol=1e-10, max_iter=1000):
        self.sigma_alpha_sq = sigma_alpha_sq
        self.sigma_beta_sq = sigma_beta_sq
        self.tau_alpha_sq = tau_alpha_sq
        self.tau_beta_sq = tau_beta_sq
        self.variant = variant
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, design, y=None, group_of=None, n_groups=3):
        prior = FrequencyPrior(self.sigma_alpha_sq, self.sigma_beta_sq, self.tau_alpha_sq,
                               self.tau_beta_sq)
        self.posterior_ = fit_frequency_variational(design, prior, group_of, n_groups,
                                                    self.variant, self.tol, self.max_iter)
        self.elbo_trace_ = self.posterior_.elbo_trace
        return self

    def predict_proba(self, design):
        return self.posterior_.predict_proba(design)

    def score(self, design, y=None):
        return heldout_loglik(self.posterior_, design)["full" if self.variant != "shooter"
                                                       else "shooter"] / max(len(design), 1)
