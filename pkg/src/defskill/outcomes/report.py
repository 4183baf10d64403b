"""Defender effect tables and expected points per possession."""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..court import DEFAULT_COURT, CourtGeometry, is_three_point
from .design import EfficiencyDesign, N_SLOTS, frequency_prob
from .efficiency import EfficiencyPosterior
from .frequency import FrequencyPosterior


def points_by_basis(L, geometry: CourtGeometry = DEFAULT_COURT, rule="mass"):
    """Point value (2 or 3) of each basis surface.

    ``rule="mass"`` counts a basis as three-point when more than half of its
    intensity lies beyond the arc; ``rule="centroid"`` uses the location of
    its intensity-weighted centroid. The centroid of a surface covering both
    corners falls inside the arc, so the mass rule is the default.
    """
    L = np.asarray(L, dtype=float)
    centers = geometry.tile_centers()
    three = is_three_point(centers, geometry)
    if rule == "mass":
        frac = (L * three).sum(axis=1) / L.sum(axis=1)
        return np.where(frac > 0.5, 3, 2)
    if rule == "centroid":
        cen = (L @ centers) / L.sum(axis=1, keepdims=True)
        return np.where(is_three_point(cen, geometry), 3, 2)
    raise ValueError(f"rule must be 'mass' or 'centroid', got {rule!r}")


def release_distance_medians(design: EfficiencyDesign):
    """Median capped release distance per (defender, basis) and pooled per basis.

    Returns ``(per_defender, pooled)`` where ``per_defender`` maps
    ``(defender_id, basis)`` to ``(median, n_shots)``.
    """
    B = design.n_basis
    pooled = np.array([np.median(design.distance[design.basis == b]) if np.any(design.basis == b)
                       else np.nan for b in range(B)])
    per = {}
    for j in np.unique(design.defender_id):
        mj = design.defender_id == j
        for b in range(B):
            sel = mj & (design.basis == b)
            if sel.any():
                per[(int(j), b)] = (float(np.median(design.distance[sel])), int(sel.sum()))
    return per, pooled


@dataclass
class EffectRow:
    player_id: int
    basis: int
    frequency_effect: float
    frequency_sd: float
    efficiency_effect: float
    efficiency_sd: float
    distance_diff: float
    n_shots: int
    prior_dominated: bool
    efficiency_rank: int = 0

    def to_dict(self):
        return dict(self.__dict__)


def defender_effect_table(freq: FrequencyPosterior, eff: EfficiencyPosterior,
                          design: EfficiencyDesign, center=True):
    """Frequency effect ``beta[j, b]`` and efficiency effect ``phi[j, b] + xi[b] D*[j, b]``.

    ``D*`` is the defender's median release distance in the basis minus the
    pooled median; defenders who faced no shots there get ``D* = 0`` and are
    flagged ``prior_dominated``. With ``center`` both effects are shifted to
    mean zero per basis across the listed defenders. Negative efficiency
    effects mean the defender lowers the log-odds of a make; rows are ranked
    per basis from most negative.

    Returns
    -------
    list of EffectRow, sorted by basis then rank
    """
    per, pooled = release_distance_medians(design)
    L = eff.layout
    samples = eff.samples()
    c = L.unpack(samples)
    phi, xi = c["phi"], c["xi"]                     # (S, J, B), (S, B)
    f_ids, f_mean, f_sd = freq.beta()
    f_pos = {int(p): i for i, p in enumerate(f_ids)}
    rows = []
    for jpos, j in enumerate(L.dfn):
        for b in range(L.B):
            med, n = per.get((int(j), b), (np.nan, 0))
            dstar = med - pooled[b] if n else 0.0
            draws = phi[:, jpos, b] + xi[:, b] * dstar
            fi = f_pos.get(int(j))
            rows.append(EffectRow(int(j), b,
                                  float(f_mean[fi, b]) if fi is not None else np.nan,
                                  float(f_sd[fi, b]) if fi is not None else np.nan,
                                  float(draws.mean()), float(draws.std()), float(dstar), n,
                                  n == 0))
    if center:
        for b in range(L.B):
            sub = [r for r in rows if r.basis == b]
            fm = np.nanmean([r.frequency_effect for r in sub]) if sub else 0.0
            em = np.mean([r.efficiency_effect for r in sub]) if sub else 0.0
            for r in sub:
                r.frequency_effect -= fm
                r.efficiency_effect -= em
    out = []
    for b in range(L.B):
        sub = sorted((r for r in rows if r.basis == b), key=lambda r: (r.efficiency_effect, r.player_id))
        for rank, r in enumerate(sub, start=1):
            r.efficiency_rank = rank
        out.extend(sub)
    return out


def expected_points_per_possession(offender, defender, freq: FrequencyPosterior,
                                   eff: EfficiencyPosterior, points, design: EfficiencyDesign = None,
                                   return_parts=False):
    """Expected points when ``offender`` is guarded full-time by ``defender``.

    The other four offenders are league-average (basis means) and guarded
    by an average defender; the shot probability for each basis comes from
    the 26-way frequency model and the make probability uses the defender's
    median release distance in that basis (pooled median if unseen).
    """
    B = freq.n_basis
    points = np.asarray(points, dtype=float)
    mu_alpha, mu_beta = freq.group_means()
    a_ids, a_mean, _ = freq.alpha()
    b_ids, b_mean, _ = freq.beta()
    alpha = np.tile(mu_alpha, (N_SLOTS, 1))
    hit = np.flatnonzero(a_ids == offender)
    if hit.size:
        alpha[0] = a_mean[hit[0]]
    avg_beta = b_mean.mean(axis=0) if len(b_mean) else np.zeros(B)
    beta = np.tile(avg_beta, (N_SLOTS, 1))
    hit = np.flatnonzero(b_ids == defender)
    if hit.size:
        beta[0] = b_mean[hit[0]]
    elif mu_beta.size:
        g = 0
        if freq.group_of is not None and freq.layout.n_groups > 1:
            g = int(np.asarray(freq.group_of)[defender]) if not isinstance(freq.group_of, dict) \
                else int(freq.group_of[defender])
        beta[0] = mu_beta[g]
    probs = frequency_prob(alpha, beta, np.eye(N_SLOTS))
    p_shot = probs[1:].reshape(N_SLOTS, B)[0]

    c = eff.coefficients()
    L = eff.layout
    kpos, jpos = L.off_pos.get(int(offender)), L.dfn_pos.get(int(defender))
    theta = c["theta"][kpos] if kpos is not None else c["mu_theta"]
    theta = np.broadcast_to(theta, (B,))
    if jpos is not None:
        phi = c["phi"][jpos]
    else:
        phi = c["mu_phi"].mean(axis=0) if c["mu_phi"].size else np.zeros(B)
    xi = c["xi"] if c["xi"].size else np.zeros(B)
    dist = np.zeros(B)
    if design is not None:
        per, pooled = release_distance_medians(design)
        for b in range(B):
            dist[b] = per.get((int(defender), b), (pooled[b], 0))[0]
    p_make = expit(theta + phi + xi * dist)
    epp = float(np.sum(p_shot * p_make * points))
    if return_parts:
        return epp, p_shot, p_make
    return epp
