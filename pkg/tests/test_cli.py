import json

import pytest

from cupid_lab import cli
from cupid_lab.config import config_from_dict

TINY = {
    "task": "toy2",
    "data": {"n_per_region": 30, "n_test_per_region": 10},
    "base": {"epochs": 2},
    "cupid": {"epochs": 2},
    "seeds": [3],
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


def test_stepwise_pipeline(cfg_path, tmp_path):
    out = tmp_path / "o"
    for cmd in ("gen-data", "train-base", "train-cupid", "eval"):
        assert run(cmd, "--config", cfg_path, "--out", out) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["base.json", "base_losses.csv", "cupid.json", "cupid_losses.csv",
                     "metrics.csv", "records.csv", "test.csv", "train.csv"]
    metrics = (out / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "metric,value,n,params"
    assert {line.split(",")[0] for line in metrics[1:]} == {
        f"{s}.{m}" for s in ("u_alea", "u_epis") for m in ("pearson", "ause", "uce")}
    assert all(line.endswith("seed=3") for line in metrics[1:])


def test_seed_flag_overrides_config(cfg_path, tmp_path):
    assert run("run", "--config", cfg_path, "--seed", 9, "--out", tmp_path) == 0
    assert (tmp_path / "records_seed9.csv").exists()
    assert json.loads((tmp_path / "report.json").read_text())["provenance"]["seeds"] == [9]


def test_ablate_and_sweep_outputs(tmp_path):
    doc = dict(TINY, ablations={"no_max": True})
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    assert run("ablate", "--config", p, "--out", tmp_path / "a") == 0
    rows = (tmp_path / "a" / "ablation.csv").read_text().splitlines()
    assert rows[0].startswith("variant,")
    assert {r.split(",")[0] for r in rows[1:]} == {"joint", "no-max"}
    assert run("sweep", "--config", p, "--layers", "1,2", "--out", tmp_path / "s") == 0
    assert (tmp_path / "s" / "layer1_metrics.csv").exists()


def test_plot_data(cfg_path, tmp_path):
    assert run("plot-data", "--config", cfg_path, "--out", tmp_path) == 0
    assert len((tmp_path / "plot_seed3.csv").read_text().splitlines()) == 1002


@pytest.mark.parametrize(
    "argv,kind",
    [
        (["bogus", "--out", "x"], "UsageError"),
        (["run"], "UsageError"),
        (["run", "--task", "toy9", "--out", "x"], "UsageError"),
        (["sweep", "--layers", "a,b", "--out", "x"], "UsageError"),
        (["run", "--config", "/nonexistent/cfg.json", "--out", "x"], "FileNotFoundError"),
    ],
)
def test_usage_errors_exit_2(argv, kind, capsys):
    assert run(*argv) == 2
    assert error_line(capsys)["error"] == kind


def test_invalid_config_value(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"task": "toy2", "layer": 7}))
    assert run("run", "--config", p, "--out", tmp_path) == 2
    err = error_line(capsys)
    assert err["error"] == "ConfigError" and "layer" in err["message"]


def test_missing_checkpoints(cfg_path, tmp_path, capsys):
    assert run("train-cupid", "--config", cfg_path, "--out", tmp_path) == 2
    assert "train-base" in error_line(capsys)["message"]
    assert run("train-base", "--config", cfg_path, "--out", tmp_path) == 0
    assert run("eval", "--config", cfg_path, "--out", tmp_path) == 2
    assert "train-cupid" in error_line(capsys)["message"]


def test_plot_data_needs_regression(tmp_path, capsys):
    assert run("plot-data", "--task", "misclass", "--out", tmp_path) == 2
    assert error_line(capsys)["error"] == "UsageError"


def test_runtime_failure_exits_1(cfg_path, tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("disk full")

    monkeypatch.setattr(cli.hs, "run", boom)
    assert run("run", "--config", cfg_path, "--out", tmp_path) == 1
    assert error_line(capsys) == {"error": "RuntimeError", "message": "disk full"}


def test_failed_seeds_exit_1(cfg_path, tmp_path, capsys, monkeypatch):
    def diverge(*a, **k):
        raise cli.nn.TrainingDiverged("loss nan")

    monkeypatch.setattr(cli.hs.nn, "train_base", diverge)
    assert run("run", "--config", cfg_path, "--out", tmp_path) == 1
    assert "seeds failed" in error_line(capsys)["message"]
    # the report is still written so the failure is inspectable
    assert json.loads((tmp_path / "report.json").read_text())["provenance"]["failed_seeds"]


def test_config_file_matches_in_memory(cfg_path):
    from cupid_lab.config import load_config
    assert load_config(cfg_path) == config_from_dict(TINY)
