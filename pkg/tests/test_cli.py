import json
import subprocess
import sys

import numpy as np
import pytest

from moie.cli import RESIDUAL_TEXT, run
from moie.datagen import load_csv
from moie.pipeline import MoIEModel, predict

SMALL = {"datagen": {"n": 2000}, "blackbox": {"hidden": [64, 32], "epochs": 5},
         "distill": {"epochs": 10, "residual_epochs": 5},
         "transfer": {"epochs": 2, "projection_epochs": 3}, "seeds": [0]}


def _config(path, **overrides):
    cfg = json.loads(json.dumps(SMALL))
    for section, values in overrides.items():
        cfg.setdefault(section, {}).update(values)
    path.write_text(json.dumps(cfg))
    return str(path)


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


def test_synth_writes_splits_and_manifest(tmp_path):
    cfg = _config(tmp_path / "c.json")
    assert run(["synth", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    data = tmp_path / "a" / "seed_0" / "data"
    assert sorted(p.name for p in data.iterdir()) == [
        "manifest_synth.json", "test.csv", "timing_synth.json", "train.csv", "val.csv"]
    man = json.loads((data / "manifest_synth.json").read_text())
    assert set(man["artifacts"]) >= {"train.csv", "val.csv", "test.csv"}


def test_synth_rerun_is_byte_identical(tmp_path):
    cfg = _config(tmp_path / "c.json")
    for out in ("a", "b"):
        assert run(["--config", cfg, "synth", "--out", str(tmp_path / out)]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    a = {k: v for k, v in a.items() if "timing_" not in k}
    b = {k: v for k, v in b.items() if "timing_" not in k}
    assert a == b


def test_invalid_prevalence_is_config_error(tmp_path, capsys):
    cfg = _config(tmp_path / "c.json", datagen={"prevalence": 1.5})
    assert run(["synth", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "prevalence" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert run(["synth", "--config", str(tmp_path / "nope.json")]) == 2


def test_distill_without_blackbox(tmp_path, capsys):
    cfg = _config(tmp_path / "c.json")
    out = str(tmp_path / "o")
    assert run(["synth", "--config", cfg, "--out", out]) == 0
    assert run(["distill", "--config", cfg, "--out", out]) == 3
    assert "blackbox" in capsys.readouterr().err


def test_unknown_subcommand():
    assert run(["frobnicate"]) == 4


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _config(root / "c.json")
    out = str(root / "runs")
    for cmd in ("synth", "train-bb", "distill", "transfer", "report"):
        assert run([cmd, "--config", cfg, "--out", out]) == 0, cmd
    return cfg, root / "runs"


def test_pipeline_artifacts(pipeline):
    _, out = pipeline
    seed = out / "seed_0"
    assert (seed / "moie" / "manifest.json").exists()
    assert (seed / "transfer" / "transfer.json").exists()
    report = out / "report"
    assert {"report.json", "hardness_trace.csv", "transfer_flops_auroc.csv"} <= {
        p.name for p in report.iterdir()}


def _routes(out):
    model = MoIEModel.load(out / "seed_0" / "moie")
    test = load_csv(out / "seed_0" / "data" / "test.csv")
    return predict(model, test.X).route


def test_explain_covered_sample(pipeline, capsys):
    cfg, out = pipeline
    covered = np.flatnonzero(_routes(out) >= 0)
    assert run(["explain", str(covered[0]), "--config", cfg, "--out", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith(f"sample {covered[0]}: route=expert_")
    assert "c_" in lines[1] or lines[1].strip() == "False"


def test_explain_residual_sample(pipeline, capsys):
    cfg, out = pipeline
    residual = np.flatnonzero(_routes(out) < 0)
    if residual.size == 0:
        pytest.skip("every test sample is covered by an expert")
    assert run(["explain", str(residual[0]), "--config", cfg, "--out", str(out)]) == 0
    assert capsys.readouterr().out.splitlines()[1].strip() == RESIDUAL_TEXT


def test_explain_json_round_trip(pipeline, capsys):
    cfg, out = pipeline
    assert run(["explain", "0", "1", "--json", "--config", cfg, "--out", str(out)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert [r["sample_id"] for r in payload["samples"]] == [0, 1]
    assert {"route", "pi", "predicted_label", "probability", "explanation"} <= set(
        payload["samples"][0])


def test_explain_unknown_id(pipeline, capsys):
    cfg, out = pipeline
    assert run(["explain", "999999", "--config", cfg, "--out", str(out)]) == 4
    assert "999999" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    cfg = _config(tmp_path / "c.json")
    res = subprocess.run([sys.executable, "-m", "moie", "synth", "--config", cfg,
                          "--out", str(tmp_path / "o"), "--json"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0, res.stderr
    assert json.loads(res.stdout)["command"] == "synth"
