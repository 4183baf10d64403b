"""K-fold comparison of nested outcome models.

Four variants of increasing simplicity are compared on held-out data:

``full``
    offense and defense with group-level shrinkage (CAR prior on shooting)
``common``
    offense and defense shrunk to one common mean per basis
``offense``
    offense only
``shooter``
    offense only without the spatial component (6 frequency outcomes)
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .design import EfficiencyDesign, FrequencyDesign
from . import efficiency as eff_mod
from . import frequency as freq_mod

logger = logging.getLogger(__name__)

VARIANTS = ("full", "common", "offense", "shooter")
VARIANT_LABELS = {
    "full": "offense+defense, group shrinkage",
    "common": "offense+defense, common shrinkage",
    "offense": "offense only",
    "shooter": "offense only, no spatial",
}
ROWS = ("shooter", "basis", "full", "efficiency")


def fold_labels(n, folds, seed):
    """Balanced random fold assignment, deterministic given ``seed``."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % folds
    rng.shuffle(labels)
    return labels


@dataclass
class CVTable:
    """Held-out log-likelihood sums, ``values[row][variant]``."""

    values: dict
    per_fold: dict = field(default_factory=dict)
    folds: int = 10

    def ordering_holds(self, row, variants=VARIANTS, slack=0.0):
        """Whether the row is nonincreasing across ``variants`` (``nan`` entries skipped)."""
        vals = [self.values[row][v] for v in variants if np.isfinite(self.values[row][v])]
        return all(a >= b - slack for a, b in zip(vals, vals[1:]))

    def to_rows(self):
        out = []
        for row in ROWS:
            rec = {"loglik": row}
            rec.update({v: self.values[row][v] for v in VARIANTS if v in self.values[row]})
            out.append(rec)
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["loglik"] + list(VARIANTS))
            for row in ROWS:
                w.writerow([row] + ["N/A" if not np.isfinite(self.values[row][v])
                                    else format(self.values[row][v], ".17g") for v in VARIANTS])


def cross_validate(freq_design: FrequencyDesign, eff_design: EfficiencyDesign, group_of, graph=None,
                   folds=10, seed=0, variants=VARIANTS,
                   freq_prior: freq_mod.FrequencyPrior = freq_mod.FrequencyPrior(),
                   eff_prior: eff_mod.EfficiencyPrior = eff_mod.EfficiencyPrior(),
                   eff_method="map", n_groups=3, freq_tol=1e-8) -> CVTable:
    """Held-out log-likelihoods of each variant summed over folds.

    Possessions and shots are split into folds independently with the same
    seed. Players absent from a training fold are predicted from their
    prior means. The efficiency model is evaluated at its posterior mode
    unless ``eff_method="hmc"``.
    """
    if len(freq_design) < folds:
        raise ValueError(f"need at least {folds} possessions for {folds}-fold CV")
    f_lab = fold_labels(len(freq_design), folds, seed)
    e_lab = fold_labels(len(eff_design), folds, seed + 1)
    values = {row: {v: 0.0 for v in variants} for row in ROWS}
    per_fold = {row: {v: [] for v in variants} for row in ROWS}
    for f in range(folds):
        f_tr, f_te = freq_design.take(f_lab != f), freq_design.take(f_lab == f)
        e_tr, e_te = eff_design.take(e_lab != f), eff_design.take(e_lab == f)
        for v in variants:
            fp = freq_mod.fit_frequency_variational(f_tr, freq_prior, group_of, n_groups, v,
                                                    tol=freq_tol)
            ll = freq_mod.heldout_loglik(fp, f_te)
            ep = eff_mod.fit_efficiency(e_tr, graph, group_of, n_groups, eff_prior, v,
                                        method=eff_method, seed=seed + f)
            ll["efficiency"] = eff_mod.heldout_loglik(ep, e_te)
            for row in ROWS:
                values[row][v] += ll[row]
                per_fold[row][v].append(ll[row])
        logger.info("fold %d/%d done", f + 1, folds)
    return CVTable(values, per_fold, folds)
