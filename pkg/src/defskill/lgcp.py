"""Discretized log-Gaussian Cox process shot surfaces.

Each player's shot counts on the tile grid are Poisson with log-rate
``z + z0``, where ``z`` has a zero-mean Gaussian process prior with a
squared-exponential kernel. The kernel length scales get a gamma prior and
are sampled with random-walk Metropolis-Hastings given the current surface;
the surface itself is the posterior mode for the current length scales.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import gammaln
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .court import DEFAULT_COURT, CourtGeometry
from .validation import check_nonnegative_matrix, check_positive

logger = logging.getLogger(__name__)


class LGCPConvergenceError(RuntimeError):
    pass


class KernelNotPositiveDefinite(linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class LgcpConfig:
    """Prior and optimizer settings for the intensity surfaces.

    The length-scale prior is gamma(``lengthscale_shape``, scale
    ``lengthscale_scale``) on each axis, mean 8 ft by default.
    """

    marginal_var: float = 1.0
    lengthscale_shape: float = 4.0
    lengthscale_scale: float = 2.0
    jitter: float = 1e-6
    max_iter: int = 100
    grad_tol_per_tile: float = 1e-5
    lengthscale_samples: int = 0
    sweeps: int = 1
    proposal_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        check_positive(self.marginal_var, "marginal_var")
        check_positive(self.lengthscale_shape, "lengthscale_shape")
        check_positive(self.lengthscale_scale, "lengthscale_scale")

    @property
    def prior_mean_lengthscale(self):
        return self.lengthscale_shape * self.lengthscale_scale


def count_matrix(shots_by_player, geometry: CourtGeometry = DEFAULT_COURT, ids=None):
    """Per-player tile counts.

    Parameters
    ----------
    shots_by_player : sequence of (N_k, 2) arrays
        Shot locations in normalized half-court coordinates.
    ids : sequence, optional
        Labels used in error messages (e.g. possession ids per shot).

    Returns
    -------
    X : ndarray (K, V) of int
    """
    X = np.zeros((len(shots_by_player), geometry.n_tiles), dtype=int)
    for k, shots in enumerate(shots_by_player):
        shots = np.asarray(shots, dtype=float).reshape(-1, 2)
        if len(shots) == 0:
            continue
        inside = geometry.contains(shots)
        if not inside.all():
            bad = int(np.flatnonzero(~inside)[0])
            where = f" (possession {ids[k][bad]})" if ids is not None else ""
            raise ValueError(f"shot {shots[bad].tolist()} of player {k} is out of bounds{where}")
        np.add.at(X[k], geometry.tile_index(shots), 1)
    return X


def se_kernel(points, marginal_var, lengthscale):
    """Squared-exponential covariance between all pairs of ``points`` (N, 2)."""
    pts = np.asarray(points, dtype=float)
    nu = np.broadcast_to(np.asarray(lengthscale, dtype=float), (pts.shape[1],))
    if np.any(nu <= 0):
        raise ValueError("length scales must be positive")
    scaled = pts / nu
    d2 = ((scaled[:, None, :] - scaled[None, :, :]) ** 2).sum(-1)
    return marginal_var * np.exp(-0.5 * d2)


def _axis_kernel(coords, nu):
    d = coords[:, None] - coords[None, :]
    return np.exp(-0.5 * (d / nu) ** 2)


class GridKernel:
    """SE covariance on a regular grid, ``C = var * kron(Kx, Ky) + jitter * I``.

    The Kronecker structure gives cheap solves and log-determinants through
    the per-axis eigendecompositions.
    """

    def __init__(self, xs, ys, marginal_var, lengthscale, jitter=1e-6):
        self.xs = np.asarray(xs, dtype=float)
        self.ys = np.asarray(ys, dtype=float)
        self.marginal_var = float(marginal_var)
        self.lengthscale = np.broadcast_to(np.asarray(lengthscale, dtype=float), (2,)).copy()
        if np.any(self.lengthscale <= 0):
            raise ValueError("length scales must be positive")
        self.jitter = float(jitter) * self.marginal_var
        self.Kx = _axis_kernel(self.xs, self.lengthscale[0])
        self.Ky = _axis_kernel(self.ys, self.lengthscale[1])
        ex, self.Qx = np.linalg.eigh(self.Kx)
        ey, self.Qy = np.linalg.eigh(self.Ky)
        eig = self.marginal_var * np.outer(np.clip(ex, 0, None), np.clip(ey, 0, None))
        self.eig = eig + self.jitter
        if not np.all(self.eig > 0):
            raise KernelNotPositiveDefinite("kernel is not positive definite after jitter")

    @classmethod
    def for_court(cls, geometry: CourtGeometry, marginal_var, lengthscale, jitter=1e-6):
        s = geometry.tile_size_ft
        xs = (np.arange(geometry.nx) + 0.5) * s
        ys = (np.arange(geometry.ny) + 0.5) * s
        return cls(xs, ys, marginal_var, lengthscale, jitter)

    @property
    def size(self):
        return len(self.xs) * len(self.ys)

    def dense(self):
        C = self.marginal_var * np.kron(self.Kx, self.Ky)
        C[np.diag_indices_from(C)] += self.jitter
        return C

    def _rotate(self, v, forward=True):
        V = np.asarray(v).reshape(len(self.xs), len(self.ys))
        if forward:
            return self.Qx.T @ V @ self.Qy
        return self.Qx @ V @ self.Qy.T

    def solve(self, v):
        return (self._rotate(self._rotate(v) / self.eig, forward=False)).ravel()

    def logdet(self):
        return float(np.log(self.eig).sum())

    def log_density(self, z):
        """log N(z | 0, C)."""
        r = self._rotate(z)
        quad = float((r * r / self.eig).sum())
        return -0.5 * (quad + self.logdet() + self.size * np.log(2 * np.pi))

    def sample(self, rng):
        rng = np.random.default_rng(rng)
        w = rng.standard_normal((len(self.xs), len(self.ys))) * np.sqrt(self.eig)
        return self._rotate(w, forward=False).ravel()


def _as_solver(C, jitter):
    if isinstance(C, GridKernel):
        return C.solve
    C = np.asarray(C, dtype=float)
    scale = float(np.mean(np.diag(C))) if len(C) else 1.0
    try:
        factor = linalg.cho_factor(C + jitter * scale * np.eye(len(C)), lower=True)
    except linalg.LinAlgError as exc:
        raise KernelNotPositiveDefinite(f"covariance not positive definite after jitter: {exc}")
    return lambda v: linalg.cho_solve(factor, v)


def lgcp_log_posterior_and_gradient(z, counts, C, z0, jitter=1e-6):
    """Unnormalized log posterior of the latent field and its gradient.

    ``sum_v [x_v (z_v + z0) - exp(z_v + z0)] - z^T C^-1 z / 2``, dropping the
    ``log x_v!`` and Gaussian normalizing constants.

    ``C`` may be a dense covariance (jitter is added before factorizing) or
    a :class:`GridKernel`, which carries its own jitter.
    """
    z = np.asarray(z, dtype=float)
    x = np.asarray(counts, dtype=float)
    cinv_z = _as_solver(C, jitter)(z)
    lam = np.exp(z + z0)
    value = float(x @ (z + z0) - lam.sum() - 0.5 * z @ cinv_z)
    return value, x - lam - cinv_z


def poisson_loglik(counts, lam):
    """Sum of per-tile Poisson log pmf values."""
    x = np.asarray(counts, dtype=float)
    lam = np.asarray(lam, dtype=float)
    return float(np.sum(x * np.log(np.where(lam > 0, lam, 1.0)) - lam - gammaln(x + 1)))


@dataclass
class MapResult:
    z: np.ndarray
    z0: float
    grad_norm: float
    n_iter: int
    trace: list = field(default_factory=list)

    @property
    def intensity(self):
        return np.exp(self.z + self.z0)


def fit_lgcp_map(counts, kernel, z0=None, max_iter=100, grad_tol=None):
    """Posterior mode of the latent field by damped Newton ascent.

    Newton steps use the matrix-inversion form ``z = C a`` with
    ``B = I + W^1/2 C W^1/2`` (``W = diag(exp(z + z0))``), so ``C^-1`` is never
    formed and ``a = C^-1 z`` is tracked exactly. A backtracking line search
    keeps every accepted step strictly uphill.

    Parameters
    ----------
    counts : ndarray (V,)
    kernel : GridKernel or ndarray (V, V)
    z0 : float, optional
        Log mean rate; defaults to ``log(sum(counts) / V)``.
    grad_tol : float, optional
        Stop when the gradient norm drops below this; ``1e-5 * V`` by default.
    """
    x = np.asarray(counts, dtype=float)
    V = len(x)
    if z0 is None:
        if x.sum() <= 0:
            raise ValueError("cannot set the mean rate from an empty count vector; pass z0")
        z0 = float(np.log(x.sum() / V))
    grad_tol = 1e-5 * V if grad_tol is None else grad_tol
    K = kernel.dense() if isinstance(kernel, GridKernel) else np.asarray(kernel, dtype=float)
    if not isinstance(kernel, GridKernel):
        K = K + 1e-6 * np.mean(np.diag(K)) * np.eye(V)

    def objective(z, a):
        return float(x @ (z + z0) - np.exp(z + z0).sum() - 0.5 * a @ z)

    z = np.zeros(V)
    a = np.zeros(V)
    f = objective(z, a)
    trace = [f]
    gnorm = np.inf
    for it in range(1, max_iter + 1):
        lam = np.exp(z + z0)
        grad = x - lam - a
        gnorm = float(np.linalg.norm(grad))
        if gnorm < grad_tol:
            return MapResult(z, z0, gnorm, it - 1, trace)
        sw = np.sqrt(lam)
        B = np.eye(V) + sw[:, None] * K * sw[None, :]
        try:
            L = linalg.cholesky(B, lower=True)
        except linalg.LinAlgError as exc:
            raise KernelNotPositiveDefinite(str(exc))
        b = lam * z + (x - lam)
        v = linalg.solve_triangular(L, sw * (K @ b), lower=True)
        a_new = b - sw * linalg.solve_triangular(L.T, v, lower=False)
        z_new = K @ a_new
        dz, da = z_new - z, a_new - a
        step = 1.0
        while True:
            z_try, a_try = z + step * dz, a + step * da
            f_try = objective(z_try, a_try)
            if f_try > f or step < 1e-10:
                break
            step *= 0.5
        if f_try <= f:
            # no ascent possible at machine precision
            return MapResult(z, z0, gnorm, it, trace)
        z, a, f = z_try, a_try, f_try
        trace.append(f)
    lam = np.exp(z + z0)
    gnorm = float(np.linalg.norm(x - lam - a))
    if gnorm >= grad_tol:
        raise LGCPConvergenceError(f"MAP did not converge in {max_iter} iterations "
                                   f"(gradient norm {gnorm:.3g}, tolerance {grad_tol:.3g})")
    return MapResult(z, z0, gnorm, max_iter, trace)


def log_gamma_prior(nu, shape, scale):
    nu = np.asarray(nu, dtype=float)
    if np.any(nu <= 0):
        return -np.inf
    return float(np.sum((shape - 1) * np.log(nu) - nu / scale - gammaln(shape) - shape * np.log(scale)))


def mh_accept_prob(log_target_new, log_target_old, log_proposal_correction=0.0):
    """Metropolis-Hastings acceptance probability."""
    return float(min(1.0, np.exp(min(0.0, log_target_new - log_target_old + log_proposal_correction))))


@dataclass
class LengthscaleChain:
    samples: np.ndarray
    acceptance_rate: float


def sample_lengthscale_mh(z, n_samples, rng, config: LgcpConfig = LgcpConfig(), init=None,
                          xs=None, ys=None, geometry: CourtGeometry = DEFAULT_COURT):
    """Random-walk Metropolis-Hastings on the two kernel length scales.

    Targets ``p(nu | z) ∝ N(z | 0, C(nu)) gamma(nu)``; with ``z=None`` the
    target is the gamma prior alone. Proposals are Gaussian steps in
    ``log nu`` with the matching Jacobian correction.
    """
    rng = np.random.default_rng(rng)
    if xs is None:
        s = geometry.tile_size_ft
        xs = (np.arange(geometry.nx) + 0.5) * s
        ys = (np.arange(geometry.ny) + 0.5) * s
    shape, scale = config.lengthscale_shape, config.lengthscale_scale

    def log_target(nu):
        lp = log_gamma_prior(nu, shape, scale)
        if z is None or not np.isfinite(lp):
            return lp
        return lp + GridKernel(xs, ys, config.marginal_var, nu, config.jitter).log_density(z)

    nu = np.full(2, config.prior_mean_lengthscale) if init is None else np.asarray(init, float)
    cur = log_target(nu)
    out = np.empty((n_samples, 2))
    accepted = 0
    for i in range(n_samples):
        prop = nu * np.exp(config.proposal_scale * rng.standard_normal(2))
        new = log_target(prop)
        correction = float(np.sum(np.log(prop) - np.log(nu)))
        if rng.random() < mh_accept_prob(new, cur, correction):
            nu, cur = prop, new
            accepted += 1
        out[i] = nu
    rate = accepted / max(n_samples, 1)
    logger.info("length-scale MH acceptance rate %.3f over %d steps", rate, n_samples)
    return LengthscaleChain(out, rate)


@dataclass
class IntensitySurface:
    """Fitted intensity for one player; ``normalized`` sums to one."""

    intensity: np.ndarray
    player_id: int
    lengthscale: np.ndarray
    lengthscale_samples: Optional[np.ndarray] = None

    @property
    def normalized(self):
        return self.intensity / self.intensity.sum()


def fit_intensity_surface(counts, config: LgcpConfig = LgcpConfig(), rng=None, player_id=0,
                          geometry: CourtGeometry = DEFAULT_COURT) -> IntensitySurface:
    """Alternate MAP surfaces and length-scale MH sweeps for one player."""
    rng = np.random.default_rng(config.seed if rng is None else rng)
    nu = np.full(2, config.prior_mean_lengthscale)
    samples = []
    for sweep in range(max(config.sweeps, 1)):
        kernel = GridKernel.for_court(geometry, config.marginal_var, nu, config.jitter)
        res = fit_lgcp_map(counts, kernel, max_iter=config.max_iter,
                           grad_tol=config.grad_tol_per_tile * len(counts))
        if config.lengthscale_samples <= 0:
            break
        chain = sample_lengthscale_mh(res.z, config.lengthscale_samples, rng, config, init=nu,
                                      geometry=geometry)
        samples.append(chain.samples)
        nu = chain.samples.mean(axis=0)
    if samples:
        kernel = GridKernel.for_court(geometry, config.marginal_var, nu, config.jitter)
        res = fit_lgcp_map(counts, kernel, max_iter=config.max_iter,
                           grad_tol=config.grad_tol_per_tile * len(counts))
    return IntensitySurface(res.intensity, player_id, nu,
                            np.concatenate(samples) if samples else None)


class LGCPSurfaces(TransformerMixin, BaseEstimator):
    """Fit one LGCP surface per row of a (K, V) count matrix.

    After fitting, ``transform`` returns the (K, V) matrix of unit-volume
    surfaces that feeds the shot-type factorization.
    """

    def __init__(self, marginal_var=1.0, lengthscale_shape=4.0, lengthscale_scale=2.0,
                 lengthscale_samples=0, sweeps=1, jitter=1e-6, max_iter=100, random_state=0,
                 geometry=DEFAULT_COURT):
        self.marginal_var = marginal_var
        self.lengthscale_shape = lengthscale_shape
        self.lengthscale_scale = lengthscale_scale
        self.lengthscale_samples = lengthscale_samples
        self.sweeps = sweeps
        self.jitter = jitter
        self.max_iter = max_iter
        self.random_state = random_state
        self.geometry = geometry

    def _config(self):
        return LgcpConfig(self.marginal_var, self.lengthscale_shape, self.lengthscale_scale,
                          self.jitter, self.max_iter, 1e-5, self.lengthscale_samples, self.sweeps,
                          seed=self.random_state)

    def fit(self, X, y=None, player_ids=None):
        X = check_nonnegative_matrix(X, "count matrix")
        if X.shape[1] != self.geometry.n_tiles:
            raise ValueError(f"expected {self.geometry.n_tiles} tiles, got {X.shape[1]}")
        if np.any(X.sum(axis=1) == 0):
            raise ValueError("every player needs at least one shot")
        ids = np.arange(len(X)) if player_ids is None else np.asarray(player_ids)
        seeds = np.random.SeedSequence(self.random_state).spawn(len(X))
        cfg = self._config()
        self.surfaces_ = [fit_intensity_surface(X[k], cfg, np.random.default_rng(seeds[k]),
                                                int(ids[k]), self.geometry)
                          for k in range(len(X))]
        self.player_ids_ = ids
        return self

    def transform(self, X=None):
        check_is_fitted(self, "surfaces_")
        return np.vstack([s.normalized for s in self.surfaces_])
