import filecmp
import subprocess
import sys

import pandas as pd
import pytest

from exposure_density import cli

EXPECTED = {
    "landuse.exr", "pings.bin", "cube.csv", "zones.csv", "zone_activity.csv", "changes.csv",
    "dendrogram.json", "dendrogram.nwk", "clusters.csv", "cluster_means.csv", "anova.csv", "tukey.csv",
    "joined.csv", "correlations.csv", "coefficients.csv", "regression_terms.csv", "diagnostics.csv",
    "report.txt", "report.kv", "timing.kv",
    "plots/hourly_series.csv", "plots/exposure_change.csv", "plots/scatter.csv",
}


@pytest.fixture(scope="module")
def scenario(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenario")
    assert cli.run(["synth", "--out", str(root), "--seed", "2", "--zones", "10", "--devices-per-zone", "80"]) == 0
    return root


@pytest.fixture(scope="module")
def pipeline_run(scenario):
    out = scenario / "run1"
    assert cli.run(["pipeline", "--config", str(scenario / "pipeline.cfg"), "--out", str(out)]) == 0
    return out


def files_under(root):
    return {str(p.relative_to(root)) for p in root.rglob("*") if p.is_file()}


def test_pipeline_happy_path(pipeline_run):
    assert EXPECTED <= files_under(pipeline_run)
    clusters = pd.read_csv(pipeline_run / "clusters.csv")
    assert len(clusters) == 10 and clusters["cluster"].min() == 1
    assert not any(p.name.startswith(".staging") for p in pipeline_run.iterdir())


def test_reruns_identical_across_threads(scenario, pipeline_run):
    out = scenario / "run4"
    assert cli.run(["pipeline", "--config", str(scenario / "pipeline.cfg"), "--out", str(out), "--threads", "4"]) == 0
    names = sorted(files_under(pipeline_run) - {"timing.kv"})
    match, mismatch, errors = filecmp.cmpfiles(pipeline_run, out, names, shallow=False)
    assert mismatch == [] and errors == []


def test_missing_input_leaves_nothing(scenario, tmp_path, capsys):
    out = tmp_path / "never"
    code = cli.run(["regress", "--out", str(out), "--changes", str(scenario / "run1" / "changes.csv"),
                    "--rates", str(tmp_path / "nope.csv"), "--covariates", str(scenario / "covariates.csv")])
    err = capsys.readouterr().err.strip().splitlines()
    assert code == 2
    assert len(err) == 1 and err[0].startswith("error: MissingInput: ")
    assert not out.exists()


def test_bad_windows_are_config_errors(scenario, pipeline_run, tmp_path, capsys):
    za = pipeline_run / "zone_activity.csv"
    code = cli.run(["changes", "--out", str(tmp_path / "c"), "--zone-activity", str(za),
                    "--pre", "2020-04-01:2020-04-14", "--post", "2020-03-29:2020-04-11"])
    assert code == 2
    assert capsys.readouterr().err.startswith("error: BadConfig: ")
    assert not (tmp_path / "c").exists()


def test_flags_override_config(scenario, pipeline_run, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"changes = {pipeline_run / 'changes.csv'}\nk = 2\n")
    assert cli.run(["cluster", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert pd.read_csv(tmp_path / "a" / "clusters.csv")["cluster"].nunique() == 2
    assert cli.run(["cluster", "--config", str(cfg), "--k", "3", "--out", str(tmp_path / "b")]) == 0
    assert pd.read_csv(tmp_path / "b" / "clusters.csv")["cluster"].nunique() == 3
    assert "config.k=3" in (tmp_path / "b" / "report.kv").read_text().splitlines()


def test_config_relative_paths_and_unknown_keys(pipeline_run, tmp_path, capsys):
    (tmp_path / "changes.csv").write_bytes((pipeline_run / "changes.csv").read_bytes())
    sub = tmp_path / "cfg"
    sub.mkdir()
    (sub / "c.cfg").write_text("changes = ../changes.csv\n")
    assert cli.run(["cluster", "--config", str(sub / "c.cfg"), "--k", "2", "--out", str(tmp_path / "o")]) == 0
    (sub / "bad.cfg").write_text("frobnicate = 1\n")
    assert cli.run(["cluster", "--config", str(sub / "bad.cfg"), "--out", str(tmp_path / "p")]) == 2
    assert "BadConfig" in capsys.readouterr().err


def test_bad_input_data_exit_code(tmp_path, capsys):
    bad = tmp_path / "changes.csv"
    bad.write_text("zone,a_res\nA,0.1\n")
    assert cli.run(["cluster", "--changes", str(bad), "--out", str(tmp_path / "o")]) == 3
    assert capsys.readouterr().err.startswith("error: InputDataError: changes file")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "exposure_density", "cluster", "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert proc.stderr.strip() == "error: MissingInput: no changes given (flag --changes or config key changes)"
