"""Shot-type bases from KL-divergence nonnegative matrix factorization.

The (K, V) matrix of unit-volume player surfaces is factored as ``W L`` with
``W`` (K, B) loadings and ``L`` (B, V) basis surfaces. One basis usually ends
up soaking up diffuse mass; it is flagged as the residual and dropped.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_nonnegative_matrix

logger = logging.getLogger(__name__)

EPS = 1e-12


def generalized_kl(A, B):
    """Generalized KL divergence ``sum A log(A/B) - A + B`` with ``0 log 0 = 0``.

    Returns ``inf`` if ``B`` vanishes where ``A`` is positive.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    pos = A > 0
    if np.any(B[pos] <= 0):
        return np.inf
    return float(np.sum(A[pos] * np.log(A[pos] / B[pos])) - A.sum() + B.sum())


def nmf_multiplicative_step(W, L, Lam):
    """One Lee-Seung KL update of ``L`` then ``W``; never increases the divergence."""
    W = np.asarray(W, dtype=float)
    L = np.asarray(L, dtype=float)
    Lam = np.asarray(Lam, dtype=float)
    R = Lam / np.maximum(W @ L, EPS)
    L = L * (W.T @ R) / np.maximum(W.sum(axis=0), EPS)[:, None]
    R = Lam / np.maximum(W @ L, EPS)
    W = W * (R @ L.T) / np.maximum(L.sum(axis=1), EPS)[None, :]
    return W, L


@dataclass
class ShotBasis:
    """Nonnegative factorization ``Lam ≈ W L``.

    Attributes
    ----------
    L : ndarray (B, V)
    W : ndarray (K, B)
    residual_index : int or None
        Index (into the fitted basis) of the residual surface once flagged.
    kl_trace : list of float
        Divergence after each multiplicative step of the winning restart.
    """

    L: np.ndarray
    W: np.ndarray
    residual_index: Optional[int] = None
    kl_trace: list = field(default_factory=list)
    kept: Optional[np.ndarray] = None

    @property
    def n_basis(self):
        return self.L.shape[0]

    def reconstruction(self):
        return self.W @ self.L

    def basis_of_tile(self):
        """Index of the largest basis surface on each tile."""
        return np.argmax(self.L, axis=0)


def _init_factors(Lam, n_basis, rng):
    K, V = Lam.shape
    W = np.abs(rng.standard_normal((K, n_basis))) + EPS
    L = np.abs(rng.standard_normal((n_basis, V))) + EPS
    scale = np.sqrt(Lam.sum() / (W @ L).sum())
    return W * scale, L * scale


def _fit_once(Lam, n_basis, rng, max_iter, tol):
    W, L = _init_factors(Lam, n_basis, rng)
    pos = Lam > 0
    lam_pos = Lam[pos]
    const = float(np.sum(lam_pos * np.log(lam_pos)) - Lam.sum())

    def kl(WL):
        return const - float(lam_pos @ np.log(np.maximum(WL[pos], EPS))) + float(WL.sum())

    WL = W @ L
    trace = [kl(WL)]
    for _ in range(max_iter):
        # same updates as nmf_multiplicative_step, reusing the product
        L = L * (W.T @ (Lam / np.maximum(WL, EPS))) / np.maximum(W.sum(axis=0), EPS)[:, None]
        WL = W @ L
        W = W * ((Lam / np.maximum(WL, EPS)) @ L.T) / np.maximum(L.sum(axis=1), EPS)[None, :]
        WL = W @ L
        trace.append(kl(WL))
        if abs(trace[-2] - trace[-1]) <= tol * max(abs(trace[-2]), EPS):
            break
    return W, L, trace


def fit_shot_basis(Lam, n_basis=6, restarts=5, seed=0, max_iter=5000, tol=1e-7) -> ShotBasis:
    """Best of ``restarts`` random-start KL factorizations.

    Parameters
    ----------
    Lam : ndarray (K, V)
        Nonnegative surfaces, one per row.
    n_basis : int
        Rank ``B``; must not exceed the number of rows.
    tol : float
        Relative change in divergence that ends a restart.
    """
    Lam = check_nonnegative_matrix(Lam, "surface matrix")
    if Lam.shape[0] < n_basis:
        raise ValueError(f"need at least {n_basis} surfaces for rank {n_basis}, got {Lam.shape[0]}")
    best = None
    for r, ss in enumerate(np.random.SeedSequence(seed).spawn(restarts)):
        W, L, trace = _fit_once(Lam, n_basis, np.random.default_rng(ss), max_iter, tol)
        logger.debug("restart %d: KL %.6g after %d steps", r, trace[-1], len(trace) - 1)
        if best is None or trace[-1] < best[2][-1]:
            best = (W, L, trace)
    W, L, trace = best
    # move scale from surfaces into loadings so each basis sums to one
    mass = np.maximum(L.sum(axis=1), EPS)
    return ShotBasis(L / mass[:, None], W * mass[None, :], None, trace)


def peak_to_mean(L):
    L = np.asarray(L, dtype=float)
    return L.max(axis=1) / np.maximum(L.mean(axis=1), EPS)


def identify_and_drop_residual(basis: ShotBasis) -> ShotBasis:
    """Flag the least concentrated basis as the residual and drop it.

    Concentration is the peak-to-mean ratio of each surface; ties go to the
    lower index. Retained surfaces are renormalized to unit sum and ordered
    by total loading mass, largest first.
    """
    ratio = peak_to_mean(basis.L)
    # ratios equal up to rounding count as ties
    residual = int(np.flatnonzero(ratio <= ratio.min() * (1 + 1e-9))[0])
    keep = np.array([b for b in range(basis.n_basis) if b != residual])
    L = basis.L[keep]
    mass = np.maximum(L.sum(axis=1), EPS)
    L = L / mass[:, None]
    W = basis.W[:, keep] * mass[None, :]
    order = np.argsort(-W.sum(axis=0), kind="stable")
    return ShotBasis(L[order], W[:, order], residual, list(basis.kl_trace), keep[order])


def cosine_match(estimated, planted):
    """Greedy best-first matching of rows by cosine similarity.

    Returns ``{planted_row: (estimated_row, similarity)}``.
    """
    E = np.asarray(estimated, dtype=float)
    P = np.asarray(planted, dtype=float)
    S = (P / np.linalg.norm(P, axis=1, keepdims=True)) @ (E / np.linalg.norm(E, axis=1, keepdims=True)).T
    out, used_p, used_e = {}, set(), set()
    for flat in np.argsort(-S, axis=None, kind="stable"):
        i, j = np.unravel_index(flat, S.shape)
        if i in used_p or j in used_e:
            continue
        out[int(i)] = (int(j), float(S[i, j]))
        used_p.add(i)
        used_e.add(j)
    return out


class ShotTypeNMF(TransformerMixin, BaseEstimator):
    """KL-NMF of player surfaces with residual removal.

    ``transform`` returns the loadings on the retained bases for the rows
    used in ``fit``; ``components_`` holds the retained surfaces.
    """

    def __init__(self, n_components=6, restarts=5, max_iter=5000, tol=1e-7, random_state=0,
                 drop_residual=True):
        self.n_components = n_components
        self.restarts = restarts
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state
        self.drop_residual = drop_residual

    def fit(self, X, y=None):
        full = fit_shot_basis(X, self.n_components, self.restarts, self.random_state,
                              self.max_iter, self.tol)
        self.full_basis_ = full
        self.basis_ = identify_and_drop_residual(full) if self.drop_residual else full
        self.components_ = self.basis_.L
        self.residual_index_ = self.basis_.residual_index
        return self

    def transform(self, X=None):
        check_is_fitted(self, "basis_")
        return self.basis_.W
