"""Staged analysis pipeline with a content-addressed artifact cache.

Stages run in dependency order::

    ingest -> matchups -> metrics
           -> surfaces -> basis -> similarity -> frequency, efficiency -> report

Each stage's cache key hashes its own parameters, its code version and the
keys of the stages it reads, so changing a parameter recomputes exactly
that stage and everything downstream. A finished stage directory holds a
``DONE`` file recording the hash of its contents; a mismatch on reuse
(e.g. a truncated file) triggers recomputation.
"""

import configparser
import logging
import pickle
import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import charts
from .court import DEFAULT_COURT, admit_possession, normalize_half_court, read_tracking_jsonl, \
    write_tracking_jsonl
from .io import content_hash, directory_hash, ensure_dir, file_hash, read_json, write_csv, \
    write_json, write_jsonl, write_vector_csv
from .lgcp import LgcpConfig, count_matrix, fit_intensity_surface
from .matchup import MatchupModel, MatchupPosterior, attention_scores, defensive_entropy, fit_em, \
    team_entropies
from .nmf import fit_shot_basis, identify_and_drop_residual
from .outcomes.design import build_efficiency_design, build_frequency_design
from .outcomes.efficiency import EfficiencyPrior, fit_efficiency
from .outcomes.frequency import FrequencyPrior, fit_frequency_variational
from .outcomes.report import defender_effect_table, expected_points_per_possession, \
    points_by_basis
from .similarity import build_offender_graph, car_precision_check, defender_time_in_basis, \
    pca_kmeans_groups

logger = logging.getLogger(__name__)

STAGES = ("ingest", "matchups", "metrics", "surfaces", "basis", "similarity", "frequency",
          "efficiency", "report")
DEPENDS = {
    "ingest": (),
    "matchups": ("ingest",),
    "metrics": ("ingest", "matchups"),
    "surfaces": ("ingest",),
    "basis": ("surfaces",),
    "similarity": ("ingest", "matchups", "basis"),
    "frequency": ("ingest", "matchups", "basis", "similarity"),
    "efficiency": ("ingest", "matchups", "basis", "similarity"),
    "report": ("basis", "similarity", "frequency", "efficiency"),
}
# bump when a stage's computation changes
STAGE_VERSION = {s: 1 for s in STAGES}


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    """All pipeline settings; INI sections only group keys for readability."""

    input: Optional[str] = None
    out: str = "out"
    seed: int = 0
    threads: int = 1
    # ingest
    min_seconds: float = 5.0
    attacking: str = "auto"
    # matchups
    em_tol: float = 1e-6
    em_max_iter: int = 200
    # surfaces
    marginal_var: float = 1.0
    lengthscale_shape: float = 4.0
    lengthscale_scale: float = 2.0
    lengthscale_samples: int = 0
    lgcp_sweeps: int = 1
    # basis
    n_basis: int = 6
    nmf_restarts: int = 5
    nmf_max_iter: int = 5000
    nmf_tol: float = 1e-7
    # similarity
    n_groups: int = 3
    knn: int = 10
    zeta: float = 0.9
    car_scale: float = 0.1
    # frequency
    sigma_alpha_sq: float = 1.0
    sigma_beta_sq: float = 0.01
    tau_alpha_sq: float = 1.0
    tau_beta_sq: float = 0.01
    # efficiency
    distance_cap: float = 6.0
    efficiency_method: str = "hmc"
    chains: int = 4
    samples: int = 2000
    sigma_phi_sq: float = 0.05
    tau_theta_sq: float = 1.0
    tau_phi_sq: float = 1.0
    tau_xi_sq: float = 1.0
    # report
    point_rule: str = "mass"

    STAGE_PARAMS = {
        "ingest": ("min_seconds", "attacking"),
        "matchups": ("em_tol", "em_max_iter"),
        "metrics": (),
        "surfaces": ("marginal_var", "lengthscale_shape", "lengthscale_scale",
                     "lengthscale_samples", "lgcp_sweeps", "seed"),
        "basis": ("n_basis", "nmf_restarts", "nmf_max_iter", "nmf_tol", "seed"),
        "similarity": ("n_groups", "knn", "zeta", "car_scale", "seed"),
        "frequency": ("sigma_alpha_sq", "sigma_beta_sq", "tau_alpha_sq", "tau_beta_sq"),
        "efficiency": ("distance_cap", "efficiency_method", "chains", "samples", "sigma_phi_sq",
                       "tau_theta_sq", "tau_phi_sq", "tau_xi_sq", "seed"),
        "report": ("point_rule",),
    }

    def validate(self, need_input=True):
        if need_input:
            if self.input is None:
                raise ValueError("no input corpus given")
            if not Path(self.input).is_file():
                raise FileNotFoundError(f"input {self.input} does not exist")
        positive = ("min_seconds", "em_tol", "marginal_var", "lengthscale_shape",
                    "lengthscale_scale", "nmf_tol", "car_scale", "sigma_alpha_sq",
                    "sigma_beta_sq", "tau_alpha_sq", "tau_beta_sq", "distance_cap",
                    "sigma_phi_sq", "tau_theta_sq", "tau_phi_sq", "tau_xi_sq")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("threads", "em_max_iter", "nmf_restarts", "nmf_max_iter", "chains",
                     "samples", "lgcp_sweeps", "knn"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 2 <= self.n_basis:
            raise ValueError("n_basis must be at least 2")
        if not 1 <= self.n_groups:
            raise ValueError("n_groups must be at least 1")
        if not 0 <= self.zeta < 1:
            raise ValueError(f"zeta must lie in [0, 1), got {self.zeta}")
        if self.lengthscale_samples < 0:
            raise ValueError("lengthscale_samples must be nonnegative")
        if self.attacking not in ("auto", "near", "far"):
            raise ValueError("attacking must be auto, near or far")
        if self.efficiency_method not in ("hmc", "map"):
            raise ValueError("efficiency_method must be hmc or map")
        if self.point_rule not in ("mass", "centroid"):
            raise ValueError("point_rule must be mass or centroid")
        return self

    @classmethod
    def from_ini(cls, path, **overrides):
        """Read ``key = value`` pairs from any section of an INI file."""
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(f"config file {path} not found")
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key not in types:
                    raise ValueError(f"unknown config key {key!r} in section [{section}]")
                values[key] = _coerce(raw, cls.__dataclass_fields__[key].default)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def stage_params(self, stage):
        return {k: getattr(self, k) for k in self.STAGE_PARAMS[stage]}


def _coerce(raw, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


@dataclass
class PipelineResult:
    out: Path
    stage_dirs: dict = field(default_factory=dict)
    executed: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)


class Pipeline:
    """Runs stages on demand, reusing cached artifacts when their keys match."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = ensure_dir(config.out)
        self.cache = ensure_dir(self.out / "cache")
        self._keys = {}
        self._data = {}
        self.result = PipelineResult(self.out)

    # -- keys and cache -----------------------------------------------------

    def key(self, stage):
        if stage not in self._keys:
            spec = {"stage": stage, "version": STAGE_VERSION[stage],
                    "params": self.config.stage_params(stage),
                    "upstream": {d: self.key(d) for d in DEPENDS[stage]}}
            if stage == "ingest":
                spec["input"] = file_hash(self.config.input)
            self._keys[stage] = content_hash(spec)
        return self._keys[stage]

    def stage_dir(self, stage):
        return self.cache / f"{stage}-{self.key(stage)[:16]}"

    def _valid(self, d):
        done = d / "DONE"
        if not done.is_file():
            return False
        return done.read_text().strip() == directory_hash(d)

    def run(self, until=None):
        """Run every stage up to and including ``until`` (all by default)."""
        targets = STAGES if until is None else _closure(until)
        for stage in STAGES:
            if stage in targets:
                self.ensure(stage)
        write_json(self.out / "manifest.json",
                   {s: str(p) for s, p in self.result.stage_dirs.items()})
        return self.result

    def ensure(self, stage):
        if stage in self.result.stage_dirs:
            return self.result.stage_dirs[stage]
        d = self.stage_dir(stage)
        if d.exists() and self._valid(d):
            logger.info("%s: up to date (%s)", stage, d.name)
            self.result.skipped.append(stage)
        else:
            if d.exists():
                logger.warning("%s: cached artifact is incomplete or corrupted, recomputing", stage)
                shutil.rmtree(d)
            for dep in DEPENDS[stage]:
                self.ensure(dep)
            tmp = Path(tempfile.mkdtemp(prefix=f".{stage}-", dir=self.cache))
            t0 = time.perf_counter()
            try:
                getattr(self, f"_run_{stage}")(tmp)
            except Exception as exc:
                shutil.rmtree(tmp, ignore_errors=True)
                raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
            (tmp / "DONE").write_text(directory_hash(tmp) + "\n")
            tmp.rename(d)
            self.result.timings[stage] = time.perf_counter() - t0
            self.result.executed.append(stage)
            logger.info("%s: done in %.1f s", stage, self.result.timings[stage])
        self.result.stage_dirs[stage] = d
        return d

    def load(self, stage, name):
        """Load a pickled in-memory object written by ``stage``."""
        key = (stage, name)
        if key not in self._data:
            with open(self.ensure(stage) / f"{name}.pkl", "rb") as fh:
                self._data[key] = pickle.load(fh)
        return self._data[key]

    def _save(self, d, stage, name, obj):
        with open(d / f"{name}.pkl", "wb") as fh:
            pickle.dump(obj, fh, protocol=4)
        self._data[(stage, name)] = obj

    # -- stages -------------------------------------------------------------

    def _run_ingest(self, d):
        raw = read_tracking_jsonl(self.config.input)
        attacking = None if self.config.attacking == "auto" else self.config.attacking
        kept, rejected = [], []
        for p in raw:
            q = admit_possession(normalize_half_court(p, attacking), DEFAULT_COURT,
                                 self.config.min_seconds)
            (kept if q is not None else rejected).append(q if q is not None else p.id)
        if not kept:
            raise ValueError("no possession survived admission")
        write_tracking_jsonl(kept, d / "possessions.jsonl")
        write_json(d / "summary.json", {"read": len(raw), "admitted": len(kept),
                                        "rejected": rejected})
        self._save(d, "ingest", "possessions", kept)

    def _run_matchups(self, d):
        poss = self.load("ingest", "possessions")
        model, trace, posts = fit_em(poss, tol=self.config.em_tol, max_iters=self.config.em_max_iter,
                                     hoop=DEFAULT_COURT.hoop)
        light = [MatchupPosterior(p.E, None, p.loglik, p.possession_id) for p in posts]
        write_json(d / "model.json", {**model.to_dict(), "loglik_trace": trace,
                                      "n_iter": len(trace) - 1})
        write_jsonl(d / "Z.jsonl", ({"possession_id": p.id, "Z": post.Z}
                                    for p, post in zip(poss, light)))
        self._save(d, "matchups", "model", model)
        self._save(d, "matchups", "posteriors", light)

    def _run_metrics(self, d):
        poss = self.load("ingest", "possessions")
        posts = self.load("matchups", "posteriors")
        att = attention_scores(poss, posts)
        write_csv(d / "attention.csv",
                  [{"player_id": pid, "on_ball": v.get("on_ball", float("nan")),
                    "off_ball": v.get("off_ball", float("nan"))} for pid, v in att.items()],
                  ["player_id", "on_ball", "off_ball"])
        Zs = [p.Z for p in posts]
        dfn, ind = team_entropies(poss, Zs)
        write_csv(d / "team_entropy.csv",
                  [{"team": t, "defensive_entropy": dfn.get(t, float("nan")),
                    "induced_entropy": ind.get(t, float("nan"))} for t in sorted(set(dfn) | set(ind))],
                  ["team", "defensive_entropy", "induced_entropy"])
        write_jsonl(d / "possession_entropy.jsonl",
                    ({"possession_id": p.id, "defender_ids": p.defense_ids,
                      "entropy": defensive_entropy(Z)} for p, Z in zip(poss, Zs)))

    def _run_surfaces(self, d):
        poss = self.load("ingest", "possessions")
        shots = {}
        for p in poss:
            if p.shot is not None:
                pid = int(p.offense_ids[p.shot.shooter])
                shots.setdefault(pid, ([], []))
                shots[pid][0].append(p.shot.location)
                shots[pid][1].append(p.id)
        ids = np.array(sorted(shots), dtype=int)
        if len(ids) == 0:
            raise ValueError("no shots in the corpus")
        X = count_matrix([np.array(shots[i][0]) for i in ids], DEFAULT_COURT,
                         ids=[shots[i][1] for i in ids])
        c = self.config
        cfg = LgcpConfig(c.marginal_var, c.lengthscale_shape, c.lengthscale_scale,
                         lengthscale_samples=c.lengthscale_samples, sweeps=c.lgcp_sweeps,
                         seed=c.seed)
        seeds = np.random.SeedSequence(c.seed).spawn(len(ids))

        def fit(i):
            return fit_intensity_surface(X[i], cfg, np.random.default_rng(seeds[i]), int(ids[i]))

        with ThreadPoolExecutor(max_workers=c.threads) as pool:
            surfaces = list(pool.map(fit, range(len(ids))))
        lam = np.vstack([s.intensity for s in surfaces])
        norm = np.vstack([s.normalized for s in surfaces])
        np.savez(d / "surfaces.npz", player_ids=ids, intensity=lam, normalized=norm, counts=X,
                 lengthscale=np.vstack([s.lengthscale for s in surfaces]),
                 nx=DEFAULT_COURT.nx, ny=DEFAULT_COURT.ny, tile_ft=DEFAULT_COURT.tile_size_ft)
        vec = ensure_dir(d / "vectors")
        for s in surfaces:
            write_vector_csv(vec / f"player_{s.player_id}.csv", s.normalized,
                             {"player_id": s.player_id, "nx": DEFAULT_COURT.nx,
                              "ny": DEFAULT_COURT.ny, "tile_ft": DEFAULT_COURT.tile_size_ft,
                              "order": "ix*ny+iy", "lengthscale": " ".join(map(str, s.lengthscale))})
        self._save(d, "surfaces", "surfaces", {"player_ids": ids, "normalized": norm, "counts": X})

    def _run_basis(self, d):
        surf = self.load("surfaces", "surfaces")
        c = self.config
        full = fit_shot_basis(surf["normalized"], c.n_basis, c.nmf_restarts, c.seed,
                              c.nmf_max_iter, c.nmf_tol)
        kept = identify_and_drop_residual(full)
        basis_of_tile = kept.basis_of_tile()
        np.savez(d / "basis.npz", L=kept.L, W=kept.W, L_full=full.L, W_full=full.W,
                 residual_index=kept.residual_index, kept=kept.kept,
                 player_ids=surf["player_ids"], basis_of_tile=basis_of_tile)
        write_csv(d / "loadings.csv",
                  [{"player_id": int(p), **{f"w{b}": float(w) for b, w in enumerate(row)}}
                   for p, row in zip(surf["player_ids"], kept.W)],
                  ["player_id"] + [f"w{b}" for b in range(kept.n_basis)])
        write_json(d / "kl_trace.json", {"kl": kept.kl_trace, "residual_index": kept.residual_index})
        for b in range(kept.n_basis):
            (d / f"basis_{b}.svg").write_text(charts.emit_basis_heatmap(kept.L[b], title=f"basis {b}"))
        self._save(d, "basis", "basis", {"basis": kept, "basis_of_tile": basis_of_tile,
                                         "player_ids": surf["player_ids"]})

    def _run_similarity(self, d):
        poss = self.load("ingest", "possessions")
        posts = self.load("matchups", "posteriors")
        bas = self.load("basis", "basis")
        c = self.config
        n_basis = bas["basis"].n_basis
        ids, tib = defender_time_in_basis(posts, poss, bas["basis_of_tile"], n_basis)
        groups = pca_kmeans_groups(tib, min(c.n_groups, len(ids)), c.seed, ids)
        group_of = {int(p): int(g) for p, g in zip(ids, groups.group_of)}
        write_csv(d / "defender_groups.csv",
                  [{"player_id": int(p), "group": int(g) + 1, "pc1": float(s[0]),
                    "pc2": float(s[1]) if len(s) > 1 else 0.0,
                    **{f"time_b{b}": float(v) for b, v in enumerate(row)}}
                   for p, g, s, row in zip(ids, groups.group_of, groups.pc_scores, tib)])
        W = bas["basis"].W
        Wn = W / W.sum(axis=1, keepdims=True)
        k = min(c.knn, len(Wn) - 1)
        if k < c.knn:
            logger.warning("only %d offenders with shots; using %d nearest neighbours", len(Wn), k)
        graph = build_offender_graph(Wn, k, c.zeta, c.car_scale, bas["player_ids"])
        min_eig, asym = car_precision_check(graph)
        write_csv(d / "offender_edges.csv",
                  [{"player_a": int(a), "player_b": int(b)} for a, b in graph.edge_list()],
                  ["player_a", "player_b"])
        write_json(d / "car_check.json", {"min_eigenvalue": min_eig, "asymmetry": asym,
                                          "zeta": c.zeta, "k": k})
        self._save(d, "similarity", "similarity", {"group_of": group_of, "graph": graph,
                                                   "n_groups": int(groups.group_of.max()) + 1})

    def _groups_for(self, ids, sim):
        group_of = dict(sim["group_of"])
        for p in ids:
            group_of.setdefault(int(p), 0)
        return group_of

    def _run_frequency(self, d):
        poss = self.load("ingest", "possessions")
        posts = self.load("matchups", "posteriors")
        bas = self.load("basis", "basis")
        sim = self.load("similarity", "similarity")
        n_basis = bas["basis"].n_basis
        design = build_frequency_design(poss, posts, bas["basis_of_tile"], n_basis)
        c = self.config
        prior = FrequencyPrior(c.sigma_alpha_sq, c.sigma_beta_sq, c.tau_alpha_sq, c.tau_beta_sq)
        group_of = self._groups_for(np.unique(design.defense_ids), sim)
        post = fit_frequency_variational(design, prior, group_of, sim["n_groups"], "full")
        for name, (ids, mean, sd) in (("alpha", post.alpha()), ("beta", post.beta())):
            write_csv(d / f"{name}.csv", _coef_rows(ids, mean, sd),
                      ["player_id", "basis", "mean", "sd", "rank"])
        write_json(d / "elbo.json", {"elbo": post.elbo_trace, "converged": post.converged})
        self._save(d, "frequency", "design", design)
        self._save(d, "frequency", "posterior", post)

    def _run_efficiency(self, d):
        poss = self.load("ingest", "possessions")
        posts = self.load("matchups", "posteriors")
        bas = self.load("basis", "basis")
        sim = self.load("similarity", "similarity")
        c = self.config
        design = build_efficiency_design(poss, posts, bas["basis_of_tile"], c.distance_cap,
                                         bas["basis"].n_basis)
        prior = EfficiencyPrior(c.sigma_phi_sq, c.tau_theta_sq, c.tau_phi_sq, c.tau_xi_sq)
        group_of = self._groups_for(np.unique(design.defender_id), sim)
        post = fit_efficiency(design, sim["graph"], group_of, sim["n_groups"], prior, "full",
                              c.efficiency_method, c.chains, c.samples, c.seed)
        coef = post.coefficients()
        sd = post.layout.unpack(post.sd())
        L = post.layout
        write_csv(d / "theta.csv", _coef_rows(L.off, coef["theta"], sd["theta"]),
                  ["player_id", "basis", "mean", "sd", "rank"])
        write_csv(d / "phi.csv", _coef_rows(L.dfn, coef["phi"], sd["phi"]),
                  ["player_id", "basis", "mean", "sd", "rank"])
        write_csv(d / "xi.csv", [{"basis": b, "mean": float(m), "sd": float(s)}
                                 for b, (m, s) in enumerate(zip(coef["xi"], sd["xi"]))],
                  ["basis", "mean", "sd"])
        diag = {"method": c.efficiency_method, "n_shots": len(design)}
        if post.rhat is not None:
            diag.update({"max_rhat": float(np.max(post.rhat)), "step_size": post.hmc.step_size,
                         "accept_rate": post.hmc.accept_rate, "divergent": post.hmc.n_divergent})
        write_json(d / "diagnostics.json", diag)
        self._save(d, "efficiency", "design", design)
        self._save(d, "efficiency", "posterior", post)

    def _run_report(self, d):
        bas = self.load("basis", "basis")
        freq = self.load("frequency", "posterior")
        eff = self.load("efficiency", "posterior")
        design = self.load("efficiency", "design")
        points = points_by_basis(bas["basis"].L, DEFAULT_COURT, self.config.point_rule)
        rows = defender_effect_table(freq, eff, design)
        write_csv(d / "defender_effects.csv", [r.to_dict() for r in rows])
        a_ids = freq.alpha()[0]
        b_ids = freq.beta()[0]
        epp = [{"offender_id": int(k), "defender_id": int(j),
                "epp": expected_points_per_possession(k, j, freq, eff, points, design)}
               for k in a_ids for j in b_ids]
        write_csv(d / "epp.csv", epp, ["offender_id", "defender_id", "epp"])
        write_json(d / "points_by_basis.json", {"points": points, "rule": self.config.point_rule})
        chart_dir = ensure_dir(d / "charts")
        for j in np.unique(design.defender_id):
            sel = design.defender_id == j
            chart = charts.build_shot_chart(int(j), rows, design.location[sel], design.basis[sel])
            (chart_dir / f"defender_{int(j)}.svg").write_text(charts.emit_shot_chart(chart))


def _coef_rows(ids, mean, sd):
    rows = []
    mean, sd = np.asarray(mean), np.asarray(sd)
    for b in range(mean.shape[1]):
        order = np.argsort(mean[:, b], kind="stable")
        rank = np.empty(len(order), dtype=int)
        rank[order] = np.arange(1, len(order) + 1)
        for i, p in enumerate(ids):
            rows.append({"player_id": int(p), "basis": b, "mean": float(mean[i, b]),
                         "sd": float(sd[i, b]), "rank": int(rank[i])})
    return rows


def _closure(stage):
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    need = {stage}
    for dep in DEPENDS[stage]:
        need |= _closure(dep)
    return need


def run_pipeline(config: PipelineConfig, until=None) -> PipelineResult:
    """Validate ``config`` and run the pipeline; see :class:`Pipeline`."""
    config.validate()
    return Pipeline(config).run(until)
