import json
import subprocess
import sys

import pytest

from apa.cli import main, parse_config, ConfigError
from apa.synth import PhantomSpec, save_spec

SPEC = PhantomSpec(dims=(12, 12, 12), spacing=(2.0, 2.0, 2.0), n_categories=3, events_per_category=3,
                   rng_seed=11)


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    root = tmp_path_factory.mktemp("study")
    save_spec(SPEC, root / "spec_in.json", n_subjects=3)
    assert main(["synth", "--spec", str(root / "spec_in.json"), "--out", str(root / "s")]) == 0
    return root / "s"


@pytest.fixture(scope="module")
def ran(study):
    assert main(["run", "--config", str(study / "config.json")]) == 0
    return study / "out"


def test_synth_layout(study):
    for name in ("atlas.apav", "reference.apav", "spec.json", "config.json"):
        assert (study / name).is_file()
    for s in ("sub-01", "sub-02", "sub-03"):
        for name in ("bold.apav", "onsets.csv", "session.json", "true_betas.apav"):
            assert (study / s / "ses-01" / name).is_file()


def test_run_writes_stage_artifacts(ran):
    assert (ran / "glm" / "sub-01_ses-01" / "betas.apav").is_file()
    assert (ran / "glm" / "sub-01_ses-01" / "design.csv").is_file()
    assert (ran / "register" / "sub-02_ses-01" / "transforms.json").is_file()
    assert (ran / "features.csv").is_file()
    assert (ran / "model.json").is_file()
    report = json.loads((ran / "report.json").read_text())
    assert report["fold_subjects"] == ["sub-01", "sub-02", "sub-03"]
    assert report["method"] == "apa"
    assert (ran / "report_tree.json").is_file()
    rows = (ran / "features.csv").read_text().splitlines()
    assert len(rows) == 1 + 3 * 9


def test_evaluate_is_byte_identical(study, ran, tmp_path, capsys):
    cfg = str(study / "config.json")
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        out.mkdir()
        (out / "features.csv").write_bytes((ran / "features.csv").read_bytes())
        assert main(["evaluate", "--config", cfg, "--output-dir", str(out)]) == 0
        outs.append(out)
    for name in ("report.json", "confusion.csv", "correlation.csv", "report_tree.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    printed = capsys.readouterr().out
    assert "accuracy" in printed and "method: tree" in printed


def test_emit_plots_writes_figures(study, ran, tmp_path):
    pytest.importorskip("matplotlib")
    out = tmp_path / "plots"
    out.mkdir()
    (out / "features.csv").write_bytes((ran / "features.csv").read_bytes())
    assert main(["evaluate", "--config", str(study / "config.json"), "--output-dir", str(out),
                 "--emit-plots"]) == 0
    for name in ("roc.csv", "roc.png", "correlation.png", "confusion.png"):
        assert (out / name).stat().st_size > 0
    assert (out / "roc.csv").read_text().startswith("class,threshold,fpr,tpr\n")


def test_predict_writes_csv(study, ran):
    assert main(["predict", "--config", str(study / "config.json")]) == 0
    lines = (ran / "predictions.csv").read_text().splitlines()
    assert lines[0] == "subject,session,category,condition,predicted,score"
    assert len(lines) == 1 + 27
    assert {l.split(",")[4] for l in lines[1:]} <= {"cat0", "cat1", "cat2"}


def test_missing_atlas_names_field(study, tmp_path, capsys):
    raw = json.loads((study / "config.json").read_text())
    raw["paths"]["atlas"] = "nowhere.apav"
    raw["paths"]["sessions"] = [str(study / s) for s in raw["paths"]["sessions"]]
    raw["paths"]["reference"] = str(study / "reference.apav")
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(raw))
    code = main(["run", "--config", str(cfg)])
    assert code != 0
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["status"] == "error"
    assert err["field"] == "paths.atlas"


def test_unknown_config_key_rejected():
    with pytest.raises(ConfigError) as exc:
        parse_config({"classifier": {"depth": 3}})
    assert exc.value.field == "classifier.depth"
    with pytest.raises(ConfigError):
        parse_config({"registration": {"metric": "ssd"}})


def test_identity_registration_override(study, tmp_path):
    out = tmp_path / "ident"
    code = main(["features", "--config", str(study / "config.json"), "--output-dir", str(out),
                 "--registration", "identity"])
    # features need the earlier stages in this output directory
    assert code == 1
    assert main(["run", "--config", str(study / "config.json"), "--output-dir", str(out),
                 "--registration", "identity", "--mode", "multiclass"]) == 0
    assert (out / "report.json").is_file()


def test_module_entry_point_help():
    r = subprocess.run([sys.executable, "-m", "apa.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    assert "synth" in r.stdout and "evaluate" in r.stdout
