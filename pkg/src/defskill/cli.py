"""Command-line entry points.

Every analysis subcommand runs the pipeline up to its stage, reusing cached
upstream artifacts, and mirrors that stage's outputs into ``<out>/<stage>/``.
On failure a JSON object ``{"error": ..., "stage": ..., "type": ...}`` is
written to stderr and the exit code is 1.
"""

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .io import ensure_dir, write_json, write_csv
from .pipeline import STAGES, PipelineConfig, StageError, run_pipeline
from .synth import SynthConfig, simulate_corpus, write_ledger
from .court import write_tracking_jsonl

logger = logging.getLogger("defskill")

ANALYSIS = ("matchups", "metrics", "surfaces", "basis", "similarity", "frequency", "efficiency",
            "report")


def _global_parent():
    # SUPPRESS lets global flags appear before or after the subcommand
    g = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    g.add_argument("--config", help="INI file with pipeline settings")
    g.add_argument("--seed", type=int, help="random seed (default 0)")
    g.add_argument("--out", help="output directory (default ./out)")
    g.add_argument("--threads", type=int, help="worker threads for per-player fits")
    g.add_argument("-v", "--verbose", action="store_true")
    return g


def build_parser():
    parent = _global_parent()
    parser = argparse.ArgumentParser(prog="defskill", parents=[parent],
                                     description="Defensive skill analysis of tracking data.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sim = sub.add_parser("simulate", parents=[parent], help="write a synthetic tracking corpus")
    sim.add_argument("--possessions", type=int, default=100)
    sim.add_argument("--n-teams", type=int, default=6)
    sim.add_argument("--frames", type=int, default=125, help="frames per possession")

    for name in ANALYSIS:
        p = sub.add_parser(name, parents=[parent], help=f"run the pipeline through '{name}'")
        p.add_argument("--input", help="tracking corpus (JSONL)")
        if name == "surfaces":
            p.add_argument("--lengthscale-samples", type=int)
        if name == "efficiency":
            p.add_argument("--distance-cap", type=float)
            p.add_argument("--method", choices=("hmc", "map"), dest="efficiency_method")
        if name == "similarity":
            p.add_argument("--zeta", type=float)

    cv = sub.add_parser("crossval", parents=[parent], help="k-fold comparison of model variants")
    cv.add_argument("--input", help="tracking corpus (JSONL)")
    cv.add_argument("--folds", type=int, default=10)
    cv.add_argument("--synthetic-possessions", type=int,
                    help="cross-validate on outcome-level synthetic data of this size instead")
    cv.add_argument("--n-teams", type=int, default=30)
    return parser


def _config(args):
    overrides = {k: getattr(args, k, None) for k in ("input", "seed", "out", "threads",
                                                     "lengthscale_samples", "distance_cap",
                                                     "efficiency_method", "zeta")}
    if getattr(args, "config", None):
        return PipelineConfig.from_ini(args.config, **overrides)
    return PipelineConfig(**{k: v for k, v in overrides.items() if v is not None})


def _mirror(src, dst):
    if dst.exists():
        shutil.rmtree(dst)
    shutil.copytree(src, dst, ignore=shutil.ignore_patterns("*.pkl", "DONE"))


def cmd_simulate(args):
    cfg = _config(args)
    out = ensure_dir(cfg.out)
    sc = SynthConfig(n_possessions=args.possessions, n_teams=args.n_teams,
                     frames_per_possession=args.frames, seed=cfg.seed)
    poss, ledger = simulate_corpus(sc)
    write_tracking_jsonl(poss, out / "corpus.jsonl")
    write_ledger(ledger, out / "truth.json")
    return {"corpus": str(out / "corpus.jsonl"), "truth": str(out / "truth.json"),
            "possessions": len(poss)}


def cmd_stage(args):
    cfg = _config(args)
    res = run_pipeline(cfg, until=None if args.command == "report" else args.command)
    out = Path(cfg.out)
    for stage in STAGES:
        if stage in res.stage_dirs:
            _mirror(res.stage_dirs[stage], out / stage)
    return {"stage": args.command, "output": str(out / args.command),
            "executed": res.executed, "cached": res.skipped,
            "seconds": {k: round(v, 3) for k, v in res.timings.items()}}


def cmd_crossval(args):
    from .outcomes.crossval import cross_validate
    from .outcomes.efficiency import EfficiencyPrior
    from .outcomes.frequency import FrequencyPrior

    cfg = _config(args)
    freq_prior = FrequencyPrior(cfg.sigma_alpha_sq, cfg.sigma_beta_sq, cfg.tau_alpha_sq,
                                cfg.tau_beta_sq)
    eff_prior = EfficiencyPrior(cfg.sigma_phi_sq, cfg.tau_theta_sq, cfg.tau_phi_sq, cfg.tau_xi_sq)
    if args.synthetic_possessions:
        from .similarity import build_offender_graph
        from .synth import draw_truth, league_rosters, simulate_outcome_data

        rng = np.random.default_rng(cfg.seed)
        _, roles = league_rosters(args.n_teams)
        truth = draw_truth(len(roles), rng, roles=roles, sigma_beta_sq=0.05)
        fd, ed = simulate_outcome_data(truth, args.synthetic_possessions, rng, args.n_teams,
                                       cross_match=0.5)
        graph = build_offender_graph(truth.offense_profile, cfg.knn, cfg.zeta, cfg.car_scale,
                                     np.arange(len(roles)))
        group_of, n_groups = roles, 3
    else:
        from .pipeline import Pipeline

        cfg.validate()
        pipe = Pipeline(cfg)
        pipe.ensure("frequency")
        pipe.ensure("efficiency")
        fd, ed = pipe.load("frequency", "design"), pipe.load("efficiency", "design")
        sim = pipe.load("similarity", "similarity")
        graph, n_groups = sim["graph"], sim["n_groups"]
        ids = np.union1d(np.unique(fd.defense_ids), np.unique(ed.defender_id))
        group_of = {int(p): sim["group_of"].get(int(p), 0) for p in ids}
    table = cross_validate(fd, ed, group_of, graph, folds=args.folds, seed=cfg.seed,
                           freq_prior=freq_prior, eff_prior=eff_prior, n_groups=n_groups)
    out = ensure_dir(Path(cfg.out) / "crossval")
    table.write_csv(out / "crossval.csv")
    ordering = {row: table.ordering_holds(row) for row in ("shooter", "basis", "full",
                                                           "efficiency")}
    write_json(out / "ordering.json", ordering)
    return {"output": str(out / "crossval.csv"), "ordering_holds": ordering}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        if args.command == "simulate":
            summary = cmd_simulate(args)
        elif args.command == "crossval":
            summary = cmd_crossval(args)
        else:
            summary = cmd_stage(args)
    except StageError as exc:
        err = {"error": str(exc.__cause__ or exc), "stage": exc.stage,
               "type": type(exc.__cause__ or exc).__name__}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, KeyError, OSError, RuntimeError) as exc:
        err = {"error": str(exc), "stage": None, "type": type(exc).__name__}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1
    summary["elapsed_s"] = round(time.perf_counter() - t0, 3)
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
