"""Possession-outcome designs for the frequency and efficiency models."""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, logsumexp

from ..court import DEFAULT_COURT

logger = logging.getLogger(__name__)

N_SLOTS = 5
DEFAULT_DISTANCE_CAP = 6.0


def outcome_index(shooter_slot, basis, n_basis=5):
    """Outcome code of a shot by offender slot ``shooter_slot`` from ``basis``.

    Both arguments are 0-based; code 0 is reserved for "no shot", so shots
    occupy ``1 .. 5 * n_basis`` in shooter-major order.
    """
    return 1 + np.asarray(shooter_slot) * n_basis + np.asarray(basis)


def decode_outcome(code, n_basis=5):
    """Inverse of :func:`outcome_index`; returns ``(slot, basis)`` or ``(-1, -1)``."""
    code = np.asarray(code)
    slot = np.where(code > 0, (code - 1) // n_basis, -1)
    basis = np.where(code > 0, (code - 1) % n_basis, -1)
    return slot, basis


def shot_logits(alpha_lineup, beta_lineup, Z):
    """Logits ``eta[k, b] = alpha[k, b] + sum_j Z[j, k] beta[j, b]``.

    ``alpha_lineup`` is (..., 5, B) for the offenders on court, ``beta_lineup``
    (..., 5, B) for the defenders and ``Z`` (..., 5, 5) indexed ``[j, k]``.
    """
    return np.asarray(alpha_lineup) + np.einsum("...jk,...jb->...kb", Z, beta_lineup)


def frequency_prob(alpha_lineup, beta_lineup, Z):
    """Probabilities of the ``5 B + 1`` outcomes, no-shot first."""
    eta = shot_logits(alpha_lineup, beta_lineup, Z)
    flat = eta.reshape(eta.shape[:-2] + (-1,))
    full = np.concatenate([np.zeros(flat.shape[:-1] + (1,)), flat], axis=-1)
    return np.exp(full - logsumexp(full, axis=-1, keepdims=True))


def make_prob(theta, phi, xi, distance):
    """Logistic make probability ``sigmoid(theta + phi + xi * distance)``."""
    return expit(np.asarray(theta) + np.asarray(phi) + np.asarray(xi) * np.asarray(distance))


@dataclass(frozen=True)
class FrequencyDesign:
    """One categorical outcome per possession with its matchup covariates.

    Attributes
    ----------
    outcome : ndarray (N,)
        0 for no shot, otherwise :func:`outcome_index` of (slot, basis).
    Z : ndarray (N, 5, 5)
        Guarding fractions ``Z[n, j, k]``; rows sum to 1.
    offense_ids, defense_ids : ndarray (N, 5)
        Player ids occupying each slot.
    """

    outcome: np.ndarray
    Z: np.ndarray
    offense_ids: np.ndarray
    defense_ids: np.ndarray
    n_basis: int = 5

    def __post_init__(self):
        n = len(self.outcome)
        Z = np.asarray(self.Z, dtype=float).reshape(n, N_SLOTS, N_SLOTS)
        if n and not np.allclose(Z.sum(axis=2), 1.0, atol=1e-6):
            raise ValueError("each defender's guarding fractions must sum to 1")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "outcome", np.asarray(self.outcome, dtype=int))
        object.__setattr__(self, "offense_ids", np.asarray(self.offense_ids, dtype=int).reshape(n, N_SLOTS))
        object.__setattr__(self, "defense_ids", np.asarray(self.defense_ids, dtype=int).reshape(n, N_SLOTS))
        if n and (self.outcome.min() < 0 or self.outcome.max() > N_SLOTS * self.n_basis):
            raise ValueError("outcome codes out of range")

    def __len__(self):
        return len(self.outcome)

    @property
    def n_outcomes(self):
        return N_SLOTS * self.n_basis + 1

    def take(self, idx) -> "FrequencyDesign":
        return FrequencyDesign(self.outcome[idx], self.Z[idx], self.offense_ids[idx],
                               self.defense_ids[idx], self.n_basis)


@dataclass(frozen=True)
class EfficiencyDesign:
    """Made/missed shots with shooter, region, primary defender and distance."""

    made: np.ndarray
    shooter_id: np.ndarray
    basis: np.ndarray
    defender_id: np.ndarray
    distance: np.ndarray
    cap: float = DEFAULT_DISTANCE_CAP
    raw_distance: Optional[np.ndarray] = None
    n_basis: int = 5
    location: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "made", np.asarray(self.made, dtype=int))
        object.__setattr__(self, "shooter_id", np.asarray(self.shooter_id, dtype=int))
        object.__setattr__(self, "basis", np.asarray(self.basis, dtype=int))
        object.__setattr__(self, "defender_id", np.asarray(self.defender_id, dtype=int))
        d = np.asarray(self.distance, dtype=float)
        if d.size and (d.min() < 0 or d.max() > self.cap + 1e-12):
            raise ValueError("capped distances must lie in [0, cap]")
        object.__setattr__(self, "distance", d)
        if self.raw_distance is None:
            object.__setattr__(self, "raw_distance", d.copy())
        if self.location is not None:
            object.__setattr__(self, "location", np.asarray(self.location, dtype=float).reshape(-1, 2))

    def __len__(self):
        return len(self.made)

    def take(self, idx) -> "EfficiencyDesign":
        return EfficiencyDesign(self.made[idx], self.shooter_id[idx], self.basis[idx],
                                self.defender_id[idx], self.distance[idx], self.cap,
                                self.raw_distance[idx], self.n_basis,
                                None if self.location is None else self.location[idx])

    def with_cap(self, cap) -> "EfficiencyDesign":
        return EfficiencyDesign(self.made, self.shooter_id, self.basis, self.defender_id,
                                np.minimum(self.raw_distance, cap), cap, self.raw_distance,
                                self.n_basis, self.location)


def basis_of_location(xy, basis_of_tile, geometry=DEFAULT_COURT):
    return np.asarray(basis_of_tile)[geometry.tile_index(xy)]


def build_frequency_design(possessions, posteriors, basis_of_tile, n_basis=5,
                           geometry=DEFAULT_COURT) -> FrequencyDesign:
    """Outcome codes and full-possession guarding fractions.

    The shot's basis is the retained basis with the highest intensity at the
    shot's tile (always defined).
    """
    outcomes, Zs, off, dfn = [], [], [], []
    for p, post in zip(possessions, posteriors):
        code = 0
        if p.shot is not None:
            b = int(basis_of_location(p.shot.location, basis_of_tile, geometry))
            code = int(outcome_index(p.shot.shooter, b, n_basis))
        outcomes.append(code)
        Zs.append(post.Z)
        off.append(p.offense_ids)
        dfn.append(p.defense_ids)
    n = len(outcomes)
    return FrequencyDesign(np.array(outcomes, dtype=int), np.reshape(Zs, (n, 5, 5)),
                           np.reshape(off, (n, 5)), np.reshape(dfn, (n, 5)), n_basis)


def build_efficiency_design(possessions, posteriors, basis_of_tile, cap=DEFAULT_DISTANCE_CAP,
                            n_basis=5, geometry=DEFAULT_COURT) -> EfficiencyDesign:
    """Shots with the most likely defender at release and that defender's capped distance.

    The primary defender is the one with the highest posterior probability of
    guarding the shooter at the release frame.
    """
    rows = []
    for p, post in zip(possessions, posteriors):
        if p.shot is None:
            continue
        f, k = p.shot.frame, p.shot.shooter
        j = int(np.argmax(post.E[f, :, k]))
        dpos = np.asarray(p.defense[f, j])
        if not np.all(np.isfinite(dpos)):
            logger.warning("possession %s: no defender position at release, shot dropped", p.id)
            continue
        dist = float(np.linalg.norm(dpos - np.asarray(p.shot.location)))
        b = int(basis_of_location(p.shot.location, basis_of_tile, geometry))
        rows.append((int(p.shot.made), p.offense_ids[k], b, p.defense_ids[j], dist,
                     tuple(p.shot.location)))
    if not rows:
        empty = np.zeros(0)
        return EfficiencyDesign(empty, empty, empty, empty, empty, cap, empty, n_basis,
                                np.zeros((0, 2)))
    made, sid, basis, did, dist, loc = (np.array(c) for c in zip(*rows))
    return EfficiencyDesign(made, sid, basis, did, np.minimum(dist, cap), cap, dist, n_basis, loc)
