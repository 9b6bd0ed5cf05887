import csv
import json
import time

import numpy as np
import pytest
import yaml

from uanav import cli
from uanav.config import ConfigError, RunConfig, apply_env, dump_config, load_config
from uanav.harness import load_trace


def write_yaml(tmp_path, data, name="run.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# --- config -----------------------------------------------------------------


def test_config_parse(tmp_path):
    text = """
paths:
  output: out_dir
predictor:
  members: 1
  epochs: 5
planner:
  mode: chance
  delta: 0.05
  horizon: 8
scenario:
  name: corridor
  seed: 3
bench:
  seeds: [1, 2]
  modes: [hard]
"""
    p = tmp_path / "c.yaml"
    p.write_text(text)
    cfg = load_config(p, environ={})
    assert cfg.paths.output == "out_dir"
    assert (cfg.predictor.members, cfg.predictor.epochs, cfg.predictor.hidden) == (1, 5, 64)
    pc = cfg.planner.planner_config()
    assert pc.mode.kind == "chance" and pc.mode.delta == 0.05 and pc.horizon == 8
    assert (cfg.scenario.name, cfg.scenario.seed) == ("corridor", 3)
    assert cfg.bench.seeds == [1, 2] and cfg.bench.modes == ["hard"] and cfg.bench.horizons == [12]


def test_config_defaults_documented():
    cfg = RunConfig()
    assert cfg.planner.mode == "cbf" and cfg.planner.delta == 0.1 and cfg.planner.gamma == 0.4
    assert cfg.predictor.train_config().lr == 8e-3
    assert cfg.bench.seeds == [0, 1, 2, 3, 4]


@pytest.mark.parametrize(
    "data, match",
    [
        ({"planner": {"mode": "soft"}}, "valid modes: hard, chance, cbf"),
        ({"planner": {"speed": 1}}, "unknown key"),
        ({"extras": {}}, "unknown config section"),
        ({"planner": {"delta": 0.9}}, "delta"),
        ({"bench": {"predictions": ["maybe"]}}, "prediction"),
    ],
)
def test_config_rejects_bad_values(tmp_path, data, match):
    with pytest.raises(ConfigError, match=match):
        load_config(write_yaml(tmp_path, data), environ={})


def test_env_overrides_paths_only():
    cfg = apply_env(RunConfig(), {"UANAV_DATASET": "/d.txt", "UANAV_MODEL": "/m.npz", "UANAV_OUT": "/o", "UANAV_MODE": "hard"})
    assert (cfg.paths.dataset, cfg.paths.model, cfg.paths.output) == ("/d.txt", "/m.npz", "/o")
    assert cfg.planner.mode == "cbf"


def test_config_file_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.planner.mode = "hard"
    cfg.bench.horizons = [4, 8]
    assert load_config(dump_config(cfg, tmp_path / "x.yaml"), environ={}) == cfg


def test_missing_path_named():
    cfg = RunConfig()
    cfg.paths.dataset = "/nowhere/tracks.txt"
    with pytest.raises(ConfigError, match="/nowhere/tracks.txt"):
        cfg.require_paths(dataset=True)


# --- commands -----------------------------------------------------------------


def test_plan_head_on_cbf(tmp_path, capsys):
    rc = cli.main(["plan", "--scenario", "head_on", "--mode", "cbf", "--seed", "0", "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.splitlines()[1].split(",")[4] == "True"
    trace = load_trace(next(tmp_path.glob("*.jsonl")))
    # the echoed config re-parses into the run's configuration
    cfg = RunConfig.from_dict(trace.header["config"])
    assert cfg.planner.mode == "cbf" and cfg.scenario.name == "head_on" and cfg.paths.output == str(tmp_path)
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_plan_modes_give_different_controls(tmp_path):
    for mode in ("hard", "chance"):
        assert cli.main(["plan", "--scenario", "head_on", "--mode", mode, "--out", str(tmp_path / mode)]) == 0
    controls = []
    for mode in ("hard", "chance"):
        trace = load_trace(next((tmp_path / mode).glob("*.jsonl")))
        controls.append([r["control"] for r in trace.records if "control" in r])
    assert controls[0] != controls[1]


def test_unknown_mode_exits_nonzero(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["plan", "--mode", "soft"])
    assert exc.value.code != 0
    assert "hard" in capsys.readouterr().err


def test_unknown_mode_in_config_exits_nonzero(tmp_path, capsys):
    rc = cli.main(["plan", "--config", str(write_yaml(tmp_path, {"planner": {"mode": "soft"}}))])
    assert rc != 0 and "valid modes: hard, chance, cbf" in capsys.readouterr().err


def test_missing_dataset_exits_nonzero(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("UANAV_DATASET", str(tmp_path / "absent.txt"))
    rc = cli.main(["train", "--out", str(tmp_path)])
    assert rc != 0 and "absent.txt" in capsys.readouterr().err


def test_missing_model_exits_nonzero(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("UANAV_MODEL", str(tmp_path / "absent.npz"))
    assert cli.main(["plan", "--out", str(tmp_path)]) != 0
    assert "absent.npz" in capsys.readouterr().err
    assert cli.main(["plan", "--constant-velocity", "--out", str(tmp_path)]) == 0


@pytest.mark.slow
def test_train_single_member_smoke(tmp_path):
    cfg = write_yaml(tmp_path, {"predictor": {"members": 1}})
    t0 = time.perf_counter()
    rc = cli.main(["train", "--config", str(cfg), "--out", str(tmp_path)])
    assert rc == 0 and time.perf_counter() - t0 < 60.0
    rows = read_rows(tmp_path / "train_log.csv")
    assert len(rows) == 1 * 100
    assert float(rows[-1]["nll"]) < float(rows[0]["nll"])
    assert (tmp_path / "model.npz").is_file()


@pytest.mark.slow
def test_train_log_rows_members_times_epochs(tmp_path):
    cfg = write_yaml(tmp_path, {"predictor": {"members": 2, "epochs": 2, "hidden": 8}})
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "train_log.csv")
    assert len(rows) == 4 and {r["member"] for r in rows} == {"0", "1"}


@pytest.mark.slow
def test_bench_modes_by_seeds(tmp_path):
    cfg = write_yaml(tmp_path, {"scenario": {"name": "head_on"}, "bench": {"workers": 4}})
    assert cli.main(["bench", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "bench.csv")
    episodes = [r for r in rows if r["kind"] == "episode"]
    aggregates = [r for r in rows if r["kind"] == "aggregate"]
    assert len(episodes) == 15 and len(aggregates) == 3
    keys = [(r["mode"], int(r["seed"])) for r in episodes]
    assert keys == sorted(keys)
    assert {r["mode"] for r in aggregates} == {"hard", "chance", "cbf"}
    assert all("±" in r["min_distance"] for r in aggregates)


@pytest.mark.slow
def test_bench_horizon_and_prediction_groups(tmp_path):
    data = {
        "scenario": {"name": "head_on"},
        "bench": {"seeds": [0], "modes": ["cbf"], "horizons": [4, 8, 12]},
    }
    assert cli.main(["bench", "--config", str(write_yaml(tmp_path, data)), "--out", str(tmp_path / "n")]) == 0
    agg = [r for r in read_rows(tmp_path / "n" / "bench.csv") if r["kind"] == "aggregate"]
    assert sorted(int(r["horizon"]) for r in agg) == [4, 8, 12]

    data["bench"].update(horizons=[12], predictions=["stochastic", "deterministic"])
    assert cli.main(["bench", "--config", str(write_yaml(tmp_path, data)), "--out", str(tmp_path / "p")]) == 0
    agg = [r for r in read_rows(tmp_path / "p" / "bench.csv") if r["kind"] == "aggregate"]
    assert sorted(r["prediction"] for r in agg) == ["deterministic", "stochastic"]


def test_bench_records_failed_episode_and_continues(tmp_path, monkeypatch):
    real = cli.run_configured

    def flaky(job, ensemble):
        if job.scenario.seed == 1:
            raise RuntimeError("boom")
        return real(job, ensemble)

    monkeypatch.setattr(cli, "run_configured", flaky)
    data = {"scenario": {"name": "head_on"}, "bench": {"seeds": [0, 1], "modes": ["cbf"]}}
    rc = cli.main(["bench", "--config", str(write_yaml(tmp_path, data)), "--out", str(tmp_path)])
    assert rc == 1
    rows = read_rows(tmp_path / "bench.csv")
    assert "boom" in rows[1]["failure_reason"] and rows[0]["success"] == "True"
    assert rows[2]["kind"] == "aggregate" and rows[2]["n"] == "1"
