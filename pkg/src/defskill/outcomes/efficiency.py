"""Shot-efficiency Bayesian logistic regression.

A shot by offender ``k`` in basis ``b`` against primary defender ``j`` at
capped distance ``D`` is made with probability
``sigmoid(theta[k, b] + phi[j, b] + xi[b] D)``. Shooting skill ``theta`` has
a CAR prior over the offender similarity graph, defender effects ``phi``
scatter around their group's mean and ``xi >= 0`` is half-normal. Every
prior is Gaussian (truncated for ``xi``), so the log posterior is the
logistic log-likelihood minus a fixed quadratic form.

Sampling is Hamiltonian Monte Carlo with the Hessian at the posterior mode
as the mass matrix, several chains advanced in lockstep, dual-averaging
step-size adaptation during warmup and reflection at ``xi = 0``.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg, optimize, sparse
from scipy.special import expit, log_expit
from sklearn.base import BaseEstimator

from ..similarity import OffenderGraph, car_precision_check
from .design import EfficiencyDesign

logger = logging.getLogger(__name__)

VARIANTS = ("full", "common", "offense", "shooter")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class EfficiencyPrior:
    """Prior scales; ``sigma_theta_sq`` is used for offenders outside the graph
    and for the variant without the CAR prior (default: the average CAR
    marginal variance)."""

    sigma_phi_sq: float = 0.05
    tau_theta_sq: float = 1.0
    tau_phi_sq: float = 1.0
    tau_xi_sq: float = 1.0
    sigma_theta_sq: Optional[float] = None

    def __post_init__(self):
        for name in ("sigma_phi_sq", "tau_theta_sq", "tau_phi_sq", "tau_xi_sq"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


class EfficiencyLayout:
    """Positions of ``[theta, mu_theta, phi, mu_phi, xi]`` in the parameter vector."""

    def __init__(self, offenders, defenders, defender_group, n_groups, n_basis, theta_basis,
                 with_defense):
        self.B = n_basis
        self.Bt = theta_basis
        self.off = np.asarray(offenders, dtype=int)
        self.dfn = np.asarray(defenders, dtype=int) if with_defense else np.zeros(0, int)
        self.group = np.asarray(defender_group, dtype=int) if with_defense else np.zeros(0, int)
        self.n_groups = n_groups if with_defense else 0
        self.with_defense = with_defense
        self.theta0 = 0
        self.mu_theta0 = len(self.off) * self.Bt
        self.phi0 = self.mu_theta0 + self.Bt
        self.mu_phi0 = self.phi0 + len(self.dfn) * n_basis
        self.xi0 = self.mu_phi0 + self.n_groups * n_basis
        self.size = self.xi0 + (n_basis if with_defense else 0)
        self.off_pos = {int(p): i for i, p in enumerate(self.off)}
        self.dfn_pos = {int(p): i for i, p in enumerate(self.dfn)}

    @property
    def xi_slice(self):
        return slice(self.xi0, self.size)

    def names(self):
        out = [f"theta[{p},{b}]" for p in self.off for b in range(self.Bt)]
        out += [f"mu_theta[{b}]" for b in range(self.Bt)]
        out += [f"phi[{p},{b}]" for p in self.dfn for b in range(self.B)]
        out += [f"mu_phi[{g},{b}]" for g in range(self.n_groups) for b in range(self.B)]
        out += [f"xi[{b}]" for b in range(self.size - self.xi0)]
        return out

    def unpack(self, x):
        x = np.asarray(x)
        lead = x.shape[:-1]
        return {
            "theta": x[..., :self.mu_theta0].reshape(lead + (len(self.off), self.Bt)),
            "mu_theta": x[..., self.mu_theta0:self.phi0],
            "phi": x[..., self.phi0:self.mu_phi0].reshape(lead + (len(self.dfn), self.B)),
            "mu_phi": x[..., self.mu_phi0:self.xi0].reshape(lead + (self.n_groups, self.B)),
            "xi": x[..., self.xi0:self.size],
        }

    def design_matrix(self, design: EfficiencyDesign):
        n = len(design)
        bt = design.basis if self.Bt > 1 else np.zeros(n, dtype=int)
        rows = [np.arange(n)]
        cols = [self.theta0 + np.array([self.off_pos[int(k)] for k in design.shooter_id],
                                       dtype=int) * self.Bt + bt]
        vals = [np.ones(n)]
        if self.with_defense:
            rows += [np.arange(n), np.arange(n)]
            cols += [self.phi0 + np.array([self.dfn_pos[int(j)] for j in design.defender_id],
                                          dtype=int) * self.B + design.basis,
                     self.xi0 + design.basis]
            vals += [np.ones(n), design.distance]
        return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                 shape=(n, self.size))


def _theta_precision(offenders, graph: Optional[OffenderGraph], prior: EfficiencyPrior):
    """Precision of the offender effects around their basis mean.

    Offenders in ``graph`` get the CAR precision restricted to the graph,
    everyone else is independent with variance ``sigma_theta_sq``.
    """
    K = len(offenders)
    if graph is None:
        var = prior.sigma_theta_sq if prior.sigma_theta_sq is not None else 1.0
        return np.eye(K) / var
    Qg = graph.precision
    gids = (np.arange(len(Qg)) if graph.player_ids is None
            else np.asarray(graph.player_ids, dtype=int))
    var = prior.sigma_theta_sq
    if var is None:
        var = float(np.mean(np.diag(np.linalg.inv(Qg))))
    pos = {int(p): i for i, p in enumerate(gids)}
    Q = np.eye(K) / var
    inside = np.array([pos.get(int(p), -1) for p in offenders])
    sel = np.flatnonzero(inside >= 0)
    Q[np.ix_(sel, sel)] = Qg[np.ix_(inside[sel], inside[sel])]
    return Q


def prior_precision(layout: EfficiencyLayout, prior: EfficiencyPrior, Qtheta):
    """Dense prior precision of the full parameter vector (xi as untruncated)."""
    P = layout.size
    Q = np.zeros((P, P))
    K, Bt, B = len(layout.off), layout.Bt, layout.B
    one = np.ones(K)
    for b in range(Bt):
        idx = layout.theta0 + np.arange(K) * Bt + b
        mu = layout.mu_theta0 + b
        Q[np.ix_(idx, idx)] += Qtheta
        Q[idx, mu] -= Qtheta @ one
        Q[mu, idx] -= Qtheta @ one
        Q[mu, mu] += one @ Qtheta @ one + 1.0 / prior.tau_theta_sq
    w = 1.0 / prior.sigma_phi_sq
    for i in range(len(layout.dfn)):
        for b in range(B):
            a, m = layout.phi0 + i * B + b, layout.mu_phi0 + layout.group[i] * B + b
            Q[a, a] += w
            Q[m, m] += w
            Q[a, m] -= w
            Q[m, a] -= w
    for g in range(layout.n_groups * B):
        Q[layout.mu_phi0 + g, layout.mu_phi0 + g] += 1.0 / prior.tau_phi_sq
    for b in range(layout.size - layout.xi0):
        Q[layout.xi0 + b, layout.xi0 + b] += 1.0 / prior.tau_xi_sq
    return Q


class EfficiencyProblem:
    """Log posterior, gradient and Hessian for one design and variant."""

    def __init__(self, design: EfficiencyDesign, graph: Optional[OffenderGraph] = None,
                 group_of=None, n_groups=3, prior: EfficiencyPrior = EfficiencyPrior(),
                 variant="full", offenders=None, defenders=None):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        if graph is not None:
            car_precision_check(graph)
        self.variant = variant
        self.design = design
        with_defense = variant in ("full", "common")
        groups_used = n_groups if variant == "full" else 1
        if variant == "full" and group_of is None:
            raise ValueError("the full variant needs defender groups")
        if offenders is None:
            offenders = np.unique(design.shooter_id)
            if graph is not None and graph.player_ids is not None:
                offenders = np.union1d(offenders, graph.player_ids)
        defenders = np.unique(design.defender_id) if defenders is None else np.asarray(defenders)
        dgroup = [_group(group_of, p, groups_used) for p in defenders]
        theta_basis = 1 if variant == "shooter" else design.n_basis
        self.layout = EfficiencyLayout(offenders, defenders, dgroup, groups_used, design.n_basis,
                                       theta_basis, with_defense)
        use_graph = graph if variant != "common" else None
        if variant == "common" and prior.sigma_theta_sq is None and graph is not None:
            prior = EfficiencyPrior(prior.sigma_phi_sq, prior.tau_theta_sq, prior.tau_phi_sq,
                                    prior.tau_xi_sq,
                                    float(np.mean(np.diag(np.linalg.inv(graph.precision)))))
        self.prior = prior
        self.group_of = group_of
        self.Q = prior_precision(self.layout, prior,
                                 _theta_precision(self.layout.off, use_graph, prior))
        self.X = self.layout.design_matrix(design)
        self.XT = self.X.T.tocsr()
        self.y = design.made.astype(float)
        self._sign = 2.0 * self.y - 1.0
        self.Qs = sparse.csr_matrix(self.Q)

    @property
    def size(self):
        return self.layout.size

    def lower_bounds(self):
        lb = np.full(self.size, -np.inf)
        lb[self.layout.xi_slice] = 0.0
        return lb

    def log_posterior(self, x):
        """Unnormalized log density; ``x`` is (P,) or (P, chains)."""
        return self.value_and_gradient(x)[0]

    def gradient(self, x):
        return self.value_and_gradient(x)[1]

    def value_and_gradient(self, x):
        eta = self.X @ x
        sign = self._sign[:, None] if eta.ndim == 2 else self._sign
        log_p = log_expit(sign * eta)
        Qx = self.Qs @ x
        val = log_p.sum(axis=0) - 0.5 * np.einsum("i...,i...->...", x, Qx)
        # d/d eta of log sigmoid(s eta) is s (1 - sigmoid(s eta))
        return val, self.XT @ (sign * -np.expm1(log_p)) - Qx

    def hessian(self, x):
        """Negative Hessian of the log posterior."""
        p = expit(self.X @ x)
        W = sparse.diags(p * (1 - p))
        return (self.XT @ W @ self.X).toarray() + self.Q


def _group(group_of, pid, n_groups):
    if n_groups <= 1 or group_of is None:
        return 0
    if isinstance(group_of, dict):
        return int(group_of.get(int(pid), 0))
    group_of = np.asarray(group_of)
    # players outside the roster fall back to the first group
    return int(group_of[int(pid)]) if 0 <= pid < len(group_of) else 0


def fit_efficiency_map(problem: EfficiencyProblem, x0=None, gtol=1e-8):
    """Posterior mode under ``xi >= 0`` by bounded quasi-Newton."""
    x0 = np.zeros(problem.size) if x0 is None else np.asarray(x0, dtype=float)
    lb = problem.lower_bounds()
    x0 = np.maximum(x0, np.where(np.isfinite(lb), lb, -np.inf))

    def fun(x):
        v, g = problem.value_and_gradient(x)
        return -v, -g

    bounds = [(None if not np.isfinite(b) else b, None) for b in lb]
    res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": 5000, "gtol": gtol, "ftol": 1e-14})
    if not res.success:
        logger.warning("efficiency MAP: %s", res.message)
    return res.x


def split_rhat(draws):
    """Split potential scale reduction factor.

    Parameters
    ----------
    draws : ndarray (chains, n, P)

    Returns
    -------
    ndarray (P,)
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 2:
        draws = draws[:, :, None]
    c, n = draws.shape[:2]
    half = n // 2
    parts = np.concatenate([draws[:, :half], draws[:, n - half:]], axis=0)
    m = parts.shape[1]
    chain_mean = parts.mean(axis=1)
    W = parts.var(axis=1, ddof=1).mean(axis=0)
    B = m * chain_mean.var(axis=0, ddof=1)
    var_plus = (m - 1) / m * W + B / m
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.sqrt(var_plus / W)
    return np.where(W > 0, r, 1.0)


@dataclass
class HMCResult:
    draws: np.ndarray          # (chains, n, P)
    step_size: float
    accept_rate: float
    n_divergent: int
    n_leapfrog: int
    warmup_accept: list = field(default_factory=list)


def _reflect(u, p, planes, offsets):
    """Reflect position and momentum until ``planes @ u + offsets >= 0``."""
    for _ in range(20):
        viol = planes @ u + offsets[:, None]
        bad = viol < 0
        if not bad.any():
            break
        for i in range(len(planes)):
            cols = bad[i]
            if not cols.any():
                continue
            a = planes[i]
            aa = a @ a
            u[:, cols] -= 2.0 * np.outer(a, viol[i, cols]) / aa
            p[:, cols] -= 2.0 * np.outer(a, a @ p[:, cols]) / aa
            viol = planes @ u + offsets[:, None]
            bad = viol < 0
    return u, p


def hmc_sample(problem: EfficiencyProblem, n_samples=2000, n_chains=4, warmup=None, seed=0,
               x_map=None, target_accept=0.8, path_length=1.5, max_steps=64,
               divergence_threshold=1000.0, max_divergent_frac=0.01):
    """Hamiltonian Monte Carlo around the posterior mode.

    The chains run in coordinates ``u`` with ``x = x_map + R^-1 u`` where
    ``R^T R`` is the negative Hessian at the mode, so the target is close to
    a standard normal in ``u``. The ``xi >= 0`` constraints become
    hyperplanes in ``u`` and trajectories bounce off them. ``warmup``
    (default half of ``n_samples``) iterations tune the step size by dual
    averaging and are discarded.
    """
    rng = np.random.default_rng(seed)
    warmup = n_samples // 2 if warmup is None else warmup
    P = problem.size
    x_map = fit_efficiency_map(problem) if x_map is None else x_map
    H = problem.hessian(x_map)
    R = linalg.cholesky(H, lower=False)            # H = R^T R
    Rinv = linalg.solve_triangular(R, np.eye(P), lower=False)
    xi = np.arange(problem.layout.xi0, problem.layout.size)
    planes = Rinv[xi]                               # xi = x_map[xi] + planes @ u
    offsets = x_map[xi]

    def to_x(u):
        return x_map[:, None] + Rinv @ u

    def logp_grad(u):
        v, g = problem.value_and_gradient(to_x(u))
        return v, Rinv.T @ g

    # start near the mode, inside the support
    u = 0.5 * rng.standard_normal((P, n_chains))
    u, _ = _reflect(u, np.zeros_like(u), planes, offsets)
    lp, grad = logp_grad(u)

    eps = 0.5
    mu = np.log(10 * eps)
    h_bar, log_eps_bar, t0, gamma, kappa = 0.0, 0.0, 10.0, 0.05, 0.75
    draws = np.empty((n_chains, n_samples - warmup, P))
    accepts, n_div, n_leap, warm_acc = [], 0, 0, []
    for it in range(n_samples):
        step = eps if it < warmup else np.exp(log_eps_bar)
        n_steps = int(np.clip(np.ceil(path_length * rng.uniform(0.8, 1.2) / step), 1, max_steps))
        p0 = rng.standard_normal((P, n_chains))
        uu, pp, g = u.copy(), p0.copy(), grad
        pp = pp + 0.5 * step * g
        for s in range(n_steps):
            uu = uu + step * pp
            uu, pp = _reflect(uu, pp, planes, offsets)
            lp_new, g = logp_grad(uu)
            if s < n_steps - 1:
                pp = pp + step * g
        pp = pp + 0.5 * step * g
        n_leap += n_steps
        h0 = -lp + 0.5 * (p0 * p0).sum(axis=0)
        h1 = -lp_new + 0.5 * (pp * pp).sum(axis=0)
        dH = np.where(np.isfinite(h1), h1 - h0, np.inf)
        acc = np.minimum(1.0, np.exp(-np.maximum(dH, -700)))
        take = rng.random(n_chains) < acc
        u[:, take], lp[take], grad = uu[:, take], lp_new[take], np.where(take, g, grad)
        if it < warmup:
            m = it + 1
            h_bar = (1 - 1 / (m + t0)) * h_bar + (target_accept - acc.mean()) / (m + t0)
            log_eps = mu - np.sqrt(m) / gamma * h_bar
            w = m ** (-kappa)
            log_eps_bar = w * log_eps + (1 - w) * log_eps_bar
            eps = float(np.exp(log_eps))
            warm_acc.append(float(acc.mean()))
        else:
            n_div += int((dH > divergence_threshold).sum())
            accepts.append(acc.mean())
            draws[:, it - warmup] = to_x(u).T
    n_post = (n_samples - warmup) * n_chains
    if n_post and n_div > max_divergent_frac * n_post:
        raise DivergenceError(f"{n_div} divergent transitions out of {n_post} "
                              f"at step size {np.exp(log_eps_bar):.3g}")
    return HMCResult(draws, float(np.exp(log_eps_bar)), float(np.mean(accepts)) if accepts else 0.0,
                     n_div, n_leap, warm_acc)


@dataclass
class EfficiencyPosterior:
    """Posterior draws (or a point estimate) of the efficiency coefficients."""

    problem: EfficiencyProblem
    x_map: np.ndarray
    draws: Optional[np.ndarray] = None   # (chains, n, P)
    rhat: Optional[np.ndarray] = None
    hmc: Optional[HMCResult] = None

    @property
    def layout(self):
        return self.problem.layout

    def samples(self):
        if self.draws is None:
            return self.x_map[None]
        return self.draws.reshape(-1, self.draws.shape[-1])

    def mean(self):
        return self.samples().mean(axis=0)

    def sd(self):
        return self.samples().std(axis=0)

    def interval(self, level=0.9):
        q = (1 - level) / 2
        s = self.samples()
        return np.quantile(s, q, axis=0), np.quantile(s, 1 - q, axis=0)

    def coefficients(self, x=None):
        return self.layout.unpack(self.mean() if x is None else x)

    def linear_predictor(self, design: EfficiencyDesign, x=None):
        """Log-odds for each shot with prior-mean fallback for unseen players."""
        L = self.layout
        c = self.coefficients(x)
        n = len(design)
        bt = design.basis if L.Bt > 1 else np.zeros(n, dtype=int)
        eta = np.empty(n)
        for i, (k, b) in enumerate(zip(design.shooter_id, bt)):
            pos = L.off_pos.get(int(k))
            eta[i] = c["theta"][pos, b] if pos is not None else c["mu_theta"][b]
        if L.with_defense:
            for i, (j, b) in enumerate(zip(design.defender_id, design.basis)):
                pos = L.dfn_pos.get(int(j))
                if pos is not None:
                    eta[i] += c["phi"][pos, b]
                else:
                    g = _group(self.problem.group_of, j, L.n_groups)
                    eta[i] += c["mu_phi"][g, b]
            eta += c["xi"][design.basis] * design.distance
        return eta

    def predict_proba(self, design: EfficiencyDesign):
        return expit(self.linear_predictor(design))


def fit_efficiency(design: EfficiencyDesign, graph: Optional[OffenderGraph] = None, group_of=None,
                   n_groups=3, prior: EfficiencyPrior = EfficiencyPrior(), variant="full",
                   method="hmc", chains=4, samples=2000, seed=0, rhat_threshold=1.05,
                   **hmc_kwargs) -> EfficiencyPosterior:
    """Fit the efficiency model by HMC (``method="hmc"``) or at the mode (``"map"``)."""
    if len(design) == 0:
        raise ValueError("efficiency design has no shots")
    problem = EfficiencyProblem(design, graph, group_of, n_groups, prior, variant)
    x_map = fit_efficiency_map(problem)
    if method == "map":
        return EfficiencyPosterior(problem, x_map)
    if method != "hmc":
        raise ValueError(f"method must be 'hmc' or 'map', got {method!r}")
    res = hmc_sample(problem, samples, chains, seed=seed, x_map=x_map, **hmc_kwargs)
    rhat = split_rhat(res.draws)
    if np.nanmax(rhat) >= rhat_threshold:
        warnings.warn(f"max R-hat {np.nanmax(rhat):.3f} exceeds {rhat_threshold}", RuntimeWarning)
    return EfficiencyPosterior(problem, x_map, res.draws, rhat, res)


fit_efficiency_mcmc = fit_efficiency


def heldout_loglik(posterior: EfficiencyPosterior, design: EfficiencyDesign):
    """Bernoulli log-likelihood of held-out shots at the posterior mean."""
    eta = posterior.linear_predictor(design)
    y = design.made
    return float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))


def draw_from_prior(problem: EfficiencyProblem, rng):
    """One parameter vector from the prior (``xi`` from its half-normal)."""
    rng = np.random.default_rng(rng)
    L = problem.layout
    Q = problem.Q.copy()
    free = np.setdiff1d(np.arange(L.size), np.arange(L.xi0, L.size))
    C = linalg.cholesky(Q[np.ix_(free, free)], lower=False)
    x = np.zeros(L.size)
    x[free] = linalg.solve_triangular(C, rng.standard_normal(len(free)), lower=False)
    x[L.xi0:] = np.abs(rng.normal(0, np.sqrt(problem.prior.tau_xi_sq), L.size - L.xi0))
    return x


class ShotEfficiencyModel(BaseEstimator):
    """Estimator wrapper; ``fit`` takes an :class:`EfficiencyDesign`."""

    def __init__(self, variant="full", method="hmc", chains=4, samples=2000, sigma_phi_sq=0.05,
                 tau_theta_sq=1.0, tau_phi_sq=1.0, tau_xi_sq=1.0, random_state=0):
        self.variant = variant
        self.method = method
        self.chains = chains
        self.samples = samples
        self.sigma_phi_sq = sigma_phi_sq
        self.tau_theta_sq = tau_theta_sq
        self.tau_phi_sq = tau_phi_sq
        self.tau_xi_sq = tau_xi_sq
        self.random_state = random_state

    def fit(self, design, y=None, graph=None, group_of=None, n_groups=3):
        prior = EfficiencyPrior(self.sigma_phi_sq, self.tau_theta_sq, self.tau_phi_sq,
                                self.tau_xi_sq)
        self.posterior_ = fit_efficiency(design, graph, group_of, n_groups, prior, self.variant,
                                         self.method, self.chains, self.samples, self.random_state)
        return self

    def predict_proba(self, design):
        return self.posterior_.predict_proba(design)

    def score(self, design, y=None):
        return heldout_loglik(self.posterior_, design) / max(len(design), 1)
