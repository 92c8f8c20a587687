import csv
import json

import numpy as np
import pytest
import yaml

from mcsplit import pipeline
from mcsplit.cli import main
from mcsplit.config import PRESETS, load_config
from mcsplit.exceptions import ConfigurationError
from mcsplit.macrosystem import estimate_C1, tau_bounds
from mcsplit.split import aggregate

TINY = {
    "seed": 1,
    "mesh": {"fine_n": 20, "coarse_n": [4], "layers": 1},
    "field": {"kind": "stripes", "values": [1.0, 1e3, 1.0], "params": {"thickness": [2, 1, 2], "axis": "x2"}},
    "contrast_sweep": [1e2, 1e3, 1e4, 1e5],
    "split": {"method": "manual", "slow": [1]},
    "time": {"T": 2e-3, "tau": 1e-4, "tau_fine_n": 20, "snapshots": 4},
}


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


def run(*args):
    return main([str(a) for a in args])


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_resolve(name):
    cfg = load_config(preset=name)
    assert cfg.fine_n == 100 and cfg.coarse_sizes == [10, 20]
    assert cfg.tau == pytest.approx(PRESETS[name]["time"]["tau"] * 4, rel=1e-12)


def test_tau_scales_with_h():
    a = load_config(preset="example1", overrides={"mesh": {"fine_n": 200, "coarse_n": [10]}})
    b = load_config(preset="example1", overrides={"mesh": {"fine_n": 100, "coarse_n": [10]}})
    assert b.tau == pytest.approx(2 * a.tau, rel=1e-14)


def test_yaml_error_reports_position(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("seed: 1\nmesh: {fine_n: 20\n  coarse_n: [4]\n")
    with pytest.raises(ConfigurationError, match=r"line \d+, column \d+"):
        load_config(p)


@pytest.mark.parametrize(
    "patch, where",
    [
        ({"mesh": {"coarse_n": [3]}}, "mesh.coarse_n"),
        ({"field": {"kind": "spiral"}}, "field.kind"),
        ({"split": {"method": "manual", "slow": [0]}}, "split.slow"),
        ({"time": {"T": -1.0}}, "time"),
        ({"bogus": 1}, "bogus"),
        ({"schemes": ["leapfrog"]}, "schemes"),
    ],
)
def test_invalid_fields_named(patch, where):
    with pytest.raises(ConfigurationError, match=where.replace(".", r"\.")):
        load_config(preset="example1", overrides=patch)


def test_dry_run_touches_nothing(tmp_path, tiny, capsys):
    out, cache = tmp_path / "out", tmp_path / "cache"
    assert run("run", "--config", tiny, "--out", out, "--cache-dir", cache, "--dry-run") == 0
    plan = json.loads(capsys.readouterr().out)
    assert plan["fine_n"] == 20 and plan["coarse_n"] == [4] and plan["steps"] == 20
    assert not out.exists() and not cache.exists()


def test_exit_codes(tmp_path, tiny, capsys):
    assert run("run", "--out", tmp_path) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("mesh: [1, 2\n")
    assert run("run", "--config", bad, "--out", tmp_path) == 2
    assert run("stability", "--config", tiny, "--out", tmp_path / "empty") == 3
    assert "upscale" in capsys.readouterr().err


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    p = d / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    out = d / "out"
    assert main(["run", "--config", str(p), "--out", str(out), "--cache-dir", str(d / "cache")]) == 0
    return p, out


def test_run_artifacts(tiny_run):
    _, out = tiny_run
    h = out / "H4"
    for name in ("upscale.json", "tensors.npz", "plan.json", "eigen.json", "eigen.csv", "stability.json",
                 "stability_sweep.json", "stability_sweep.csv", "monitor_scheme1.csv", "monitor_scheme2.csv",
                 "run.json", "reference.npz", "errors.json", "errors_implicit.csv", "errors_scheme1.csv"):
        assert (h / name).exists(), name
    with (h / "stability_sweep.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert len(rows[0]) == 1 + 4 and [r[0] for r in rows[1:]] == ["ratio_1", "ratio_2", "ratio_1_c", "ratio_2_c"]
    mon = np.loadtxt(h / "monitor_scheme1.csv", delimiter=",", skiprows=1)[:, 1]
    assert np.all(np.diff(mon) <= 1e-10 * mon[:-1])
    report = json.loads((out / "report.json").read_text())
    assert set(report) >= {"config", "provenance", "sizes"}
    assert set(report["sizes"]["H4"]) >= {"upscale", "plan", "eigen", "stability", "stability_sweep", "run", "errors"}
    assert len(report["provenance"]["config_sha256"]) == 64


def test_stages_run_separately(tmp_path, tiny_run):
    cfg_path, _ = tiny_run
    out = tmp_path / "staged"
    for cmd in ("upscale", "split", "stability"):
        assert run(cmd, "--config", cfg_path, "--out", out) == 0
    assert (out / "H4" / "stability.json").exists()
    assert not (out / "H4" / "run.json").exists()  # no time stepping so far
    assert run("solve", "--config", cfg_path, "--out", out, "--scheme", "scheme2", "--tau", "auto") == 0
    cfg = load_config(cfg_path)
    ts, plan = pipeline.load_tensors(out, 4), pipeline.load_plan(out, 4)
    _, t2 = tau_bounds(plan, estimate_C1(4), 0.25, aggregate(ts.A, ts.M, ts.C))
    run_info = json.loads((out / "H4" / "run.json").read_text())
    assert run_info["tau"] == pytest.approx(0.9 * t2, rel=1e-14)
    assert list(run_info["schemes"]) == ["scheme2"]
    assert run("reference", "--config", cfg_path, "--out", out) == 0
    assert run("errors", "--config", cfg_path, "--out", out) == 0
    assert run("report", "--config", cfg_path, "--out", out) == 0
    rep = json.loads((out / "report.json").read_text())
    assert "errors" in rep["sizes"]["H4"] and cfg.name == "custom"


def test_eigen_table_rows_per_size(tmp_path):
    out = tmp_path / "e3"
    args = ["split", "--preset", "example3", "--fine-n", "20", "--coarse-n", "4", "--layers", "1", "--out", out]
    assert run("upscale", *args[1:]) == 0
    assert run(*args) == 0
    rows = json.loads((out / "H4" / "eigen.json").read_text())
    assert len(rows) == 3 and all({"H", "lambda", "v"} <= set(r) for r in rows)
