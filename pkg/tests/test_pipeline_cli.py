import json
import logging
import time
import xml.etree.ElementTree as ET

import pytest

from defskill.cli import main
from defskill.pipeline import DEPENDS, STAGES, Pipeline, PipelineConfig


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--possessions", "100", "--seed", "7", "--out", str(root / "sim")]) == 0
    corpus = root / "sim" / "corpus.jsonl"
    t0 = time.perf_counter()
    assert main(["report", "--input", str(corpus), "--out", str(root / "out")]) == 0
    return dict(root=root, corpus=corpus, out=root / "out", seconds=time.perf_counter() - t0)


def test_simulate_is_deterministic(tmp_path, workspace):
    assert main(["--seed", "7", "simulate", "--possessions", "100", "--out", str(tmp_path)]) == 0
    for name in ("corpus.jsonl", "truth.json"):
        assert (tmp_path / name).read_bytes() == (workspace["root"] / "sim" / name).read_bytes()


def test_end_to_end_outputs(workspace):
    out = workspace["out"]
    assert workspace["seconds"] < 300
    assert (out / "matchups" / "Z.jsonl").is_file()
    model = json.loads((out / "matchups" / "model.json").read_text())
    assert {"gamma", "rho", "loglik_trace"} <= set(model)
    assert abs(sum(model["gamma"]) - 1) < 1e-9
    for stage in STAGES:
        assert (out / stage).is_dir()
        assert not list((out / stage).glob("*.pkl"))
    assert (out / "frequency" / "alpha.csv").is_file()
    assert (out / "efficiency" / "diagnostics.json").is_file()
    assert (out / "report" / "epp.csv").is_file()
    charts = list((out / "report" / "charts").glob("defender_*.svg"))
    assert charts
    ET.parse(charts[0])
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest) == set(STAGES)


def test_rerun_is_fully_cached(capsys, workspace):
    code, summary, _ = run_cli(capsys, "report", "--input", str(workspace["corpus"]),
                               "--out", str(workspace["out"]))
    assert code == 0
    assert summary["executed"] == [] and set(summary["cached"]) == set(STAGES)


def test_parameter_change_invalidates_downstream_only(capsys, workspace):
    base = PipelineConfig(input=str(workspace["corpus"]), out=str(workspace["out"]))
    changed = PipelineConfig(input=str(workspace["corpus"]), out=str(workspace["out"]), zeta=0.8)
    a, b = Pipeline(base), Pipeline(changed)
    downstream = {"similarity"}
    for stage in STAGES:
        if any(d in downstream for d in DEPENDS[stage]):
            downstream.add(stage)
    for stage in STAGES:
        assert (a.key(stage) != b.key(stage)) == (stage in downstream)
    code, summary, _ = run_cli(capsys, "similarity", "--zeta", "0.8", "--input",
                               str(workspace["corpus"]), "--out", str(workspace["out"]))
    assert code == 0 and summary["executed"] == ["similarity"]


def test_corrupted_cache_is_recomputed(capsys, caplog, workspace):
    cfg = PipelineConfig(input=str(workspace["corpus"]), out=str(workspace["out"]))
    d = Pipeline(cfg).stage_dir("metrics")
    (d / "attention.csv").write_text("garbage\n")
    with caplog.at_level(logging.WARNING, logger="defskill"):
        code, summary, _ = run_cli(capsys, "metrics", "--input", str(workspace["corpus"]),
                                   "--out", str(workspace["out"]))
    assert code == 0 and summary["executed"] == ["metrics"]
    assert "corrupted" in caplog.text
    assert (d / "attention.csv").read_text() != "garbage\n"


def test_stage_failure_reports_json(capsys, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "x", "not": "tracking"}\n')
    code, _, err = run_cli(capsys, "matchups", "--input", str(bad), "--out", str(tmp_path / "o"))
    assert code == 1
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["stage"] == "ingest" and payload["error"] and payload["type"]
    code, _, err = run_cli(capsys, "matchups", "--input", str(tmp_path / "missing.jsonl"),
                           "--out", str(tmp_path / "o"))
    assert code == 1 and json.loads(err.strip().splitlines()[-1])["type"] == "FileNotFoundError"


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["efficiency", "--method", "gibbs"])
    assert exc.value.code == 2


def test_ini_config(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[similarity]\nzeta = 0.7\nknn = 5\n[efficiency]\nefficiency_method = map\n")
    cfg = PipelineConfig.from_ini(ini, seed=3)
    assert (cfg.zeta, cfg.knn, cfg.efficiency_method, cfg.seed) == (0.7, 5, "map", 3)
    assert PipelineConfig.from_ini(ini, zeta=0.5).zeta == 0.5
    ini.write_text("[x]\nbogus = 1\n")
    with pytest.raises(ValueError, match="bogus"):
        PipelineConfig.from_ini(ini)
    with pytest.raises(ValueError, match="zeta"):
        PipelineConfig(zeta=1.0).validate(need_input=False)
    with pytest.raises(ValueError, match="efficiency_method"):
        PipelineConfig(efficiency_method="vb").validate(need_input=False)


def test_crossval_synthetic(capsys, tmp_path):
    code, summary, _ = run_cli(capsys, "crossval", "--synthetic-possessions", "800", "--n-teams",
                               "4", "--folds", "3", "--out", str(tmp_path))
    assert code == 0
    lines = (tmp_path / "crossval" / "crossval.csv").read_text().splitlines()
    assert len(lines) == 5 and lines[0].startswith("loglik,full")
    assert set(summary["ordering_holds"]) == {"shooter", "basis", "full", "efficiency"}
