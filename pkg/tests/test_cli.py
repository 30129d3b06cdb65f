import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from btol import cli
from btol.cli import ConfigError, ExperimentConfig, Layout, cmd_report, main
from btol.metrics import ClassMetrics, MetricReport
from btol.netcore import NonFiniteError
from btol.taskgen import SOURCE_PARAMS, TARGET_PARAMS

TINY = {
    "data": {"n_train": 8, "n_test": 4, "seed": 5,
             "source": {**SOURCE_PARAMS.to_dict(), "image_size": 16},
             "target": {**TARGET_PARAMS.to_dict(), "image_size": 16}},
    "source": {"spec": {"width": 4}, "epochs": 1},
    "adapt": {"T_rounds": 1, "E1": 1, "E2": 1, "init_epochs": 1, "satisfy_epochs": 1, "distill_epochs": 1,
              "lr": 1e-3, "target_arch": {"width": 4}, "adapter": {"hidden_channels": 4}},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


def run(config_file, out, *args):
    return main([*args, "--config", str(config_file), "--out", str(out)])


def test_config_round_trip():
    cfg = ExperimentConfig.from_dict(TINY)
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg
    assert ExperimentConfig.from_json(ExperimentConfig().to_json()) == ExperimentConfig()


@pytest.mark.parametrize("bad", [{"extra": 1}, {"data": {"n_trian": 3}}, {"adapt": {"E3": 1}},
                                 {"source": {"spec": {"depth": 2}}}, {"data": {"n_train": 0}},
                                 {"adapt": {"pseudo_mode": "soft"}}, {"oracle": {"mode": "sideways"}}])
def test_config_rejects_unknown_or_invalid(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_with_seed_sets_both_seeds():
    cfg = ExperimentConfig().with_seed(2 ** 64 - 1)
    assert cfg.data.seed == cfg.adapt.seed == 2 ** 64 - 1


def test_show_config_prints_effective_config(config_file, tmp_path, capsys):
    assert main(["show-config", "--config", str(config_file), "--seed", "9"]) == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown["data"]["seed"] == shown["adapt"]["seed"] == 9


def test_missing_or_broken_config_exits_2(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "nope.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad)]) == 2


def test_gen_data_is_deterministic_and_guards_overwrite(config_file, tmp_path):
    assert run(config_file, tmp_path / "a", "gen-data") == 0
    assert run(config_file, tmp_path / "b", "gen-data") == 0
    files = lambda root: {p.relative_to(root): p.read_bytes() for p in sorted((root / "data").rglob("*"))
                          if p.is_file()}
    assert files(tmp_path / "a") == files(tmp_path / "b")
    assert run(config_file, tmp_path / "a", "gen-data") == 2
    assert run(config_file, tmp_path / "a", "gen-data", "--force") == 0


def test_stage_without_inputs_exits_2(config_file, tmp_path, capsys):
    assert run(config_file, tmp_path / "x", "train-source") == 2
    assert "missing source training data" in capsys.readouterr().err
    assert run(config_file, tmp_path / "x", "adapt", "--mode", "baseline") == 2
    assert run(config_file, tmp_path / "x", "evaluate", "bpba") == 2


def test_numerical_failure_exits_4(config_file, tmp_path, monkeypatch):
    assert run(config_file, tmp_path, "gen-data") == 0

    def explode(*args, **kwargs):
        raise NonFiniteError("loss is nan")
    monkeypatch.setattr(cli, "train_source", explode)
    assert run(config_file, tmp_path, "train-source") == 4


def test_recipe_prints_four_row_table(config_file, tmp_path, capsys):
    assert run(config_file, tmp_path, "recipe") == 0
    out = capsys.readouterr().out
    for subject in ("source", "baseline", "bpba", "blackbox"):
        assert any(line.startswith(subject) for line in out.splitlines())
    layout = Layout(tmp_path)
    assert sorted(p.name for p in (tmp_path / "reports").iterdir()) == [
        "baseline.json", "blackbox.json", "bpba.json", "source.json"]
    runlog = json.loads((layout.run("bpba") / "runlog.json").read_text())
    assert runlog["initialized_from"] == "baseline" and "wall_time" not in runlog
    assert json.loads((tmp_path / "config.json").read_text())["output_dir"] == str(tmp_path)


def test_adapt_refuses_to_overwrite_without_force(config_file, tmp_path):
    assert run(config_file, tmp_path, "recipe") == 0
    assert run(config_file, tmp_path, "adapt", "--mode", "baseline") == 2
    assert run(config_file, tmp_path, "adapt", "--mode", "baseline", "--force") == 0


def _fake_run(root: Path, dice: dict[str, float]):
    for subject, value in dice.items():
        path = Layout(root).report(subject)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(MetricReport(per_class={c: ClassMetrics(value, 0.0, 1.0, 0.0, 0) for c in (1, 2)},
                                     dice_avg_mean=value, asd_avg_mean=1.0, n_samples=1).to_json())


def test_report_averages_runs_and_checks_ordering(tmp_path, capsys):
    for seed in range(5):
        _fake_run(tmp_path / f"s{seed}", {"source": 0.60 + 0.01 * seed, "baseline": 0.70, "bpba": 0.72 + 0.01 * seed,
                                          "blackbox": 0.71})
    result = cmd_report([tmp_path / f"s{seed}" for seed in range(5)])
    assert result["methods"]["source"]["dice_mean"] == pytest.approx(0.62)
    assert result["methods"]["bpba"]["dice_mean"] == pytest.approx(0.74)
    assert result["verdict"]["passed"]
    out_file = tmp_path / "summary.json"
    assert main(["report", *[str(tmp_path / f"s{s}") for s in range(5)], "--out", str(out_file)]) == 0
    assert "ordering PASS" in capsys.readouterr().out
    assert json.loads(out_file.read_text())["verdict"]["passed"]


def test_report_flags_a_failed_ordering(tmp_path):
    _fake_run(tmp_path / "r", {"source": 0.70, "baseline": 0.70, "bpba": 0.705, "blackbox": 0.69})
    checks = cmd_report([tmp_path / "r"])["verdict"]["checks"]
    assert checks == {"bpba_beats_baseline": False, "blackbox_not_below_baseline": False, "source_lowest": False}


def test_report_missing_method_names_the_run(tmp_path, capsys):
    _fake_run(tmp_path / "a", {"source": 0.6, "baseline": 0.7})
    _fake_run(tmp_path / "b", {"source": 0.6})
    assert main(["report", str(tmp_path / "a"), str(tmp_path / "b")]) == 2
    assert str(tmp_path / "b") in capsys.readouterr().err
    assert main(["report", str(tmp_path / "nothing")]) == 2


def _serve(config_file, out, mode):
    env = {**os.environ, "BTOL_LOG": "INFO"}
    proc = subprocess.Popen([sys.executable, "-m", "btol", "serve-oracle", "--config", str(config_file),
                             "--out", str(out), "--mode", mode, "--bind", "127.0.0.1:0"],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=env)
    line = proc.stdout.readline()
    assert line.startswith("oracle listening on "), proc.stderr.read()
    return proc, line.split()[3]


def test_bpba_against_forward_only_server_exits_3(config_file, tmp_path, capsys):
    assert run(config_file, tmp_path, "gen-data") == 0
    assert run(config_file, tmp_path, "train-source") == 0
    proc, address = _serve(config_file, tmp_path, "forward_only")
    try:
        assert run(config_file, tmp_path, "adapt", "--mode", "bpba", "--oracle", address) == 3
        assert "BACKWARD_DISABLED" in capsys.readouterr().err
        assert run(config_file, tmp_path, "adapt", "--mode", "blackbox", "--oracle", address) == 0
    finally:
        proc.terminate()
        proc.wait(timeout=10)
    log = json.loads((Layout(tmp_path).run("blackbox") / "runlog.json").read_text())
    assert log["backward_calls"] == 0 and log["forward_calls"] > 0


def test_unreachable_oracle_exits_3(config_file, tmp_path):
    assert run(config_file, tmp_path, "gen-data") == 0
    assert run(config_file, tmp_path, "adapt", "--mode", "baseline", "--oracle", "127.0.0.1:1") == 3


def test_btol_log_controls_verbosity(config_file, tmp_path):
    assert run(config_file, tmp_path, "gen-data") == 0
    assert run(config_file, tmp_path, "train-source") == 0

    def stderr(level):
        env = {**os.environ, "BTOL_LOG": level}
        return subprocess.run([sys.executable, "-m", "btol", "adapt", "--mode", "baseline", "--config",
                               str(config_file), "--out", str(tmp_path), "--force"],
                              capture_output=True, text=True, env=env, check=True).stderr
    assert stderr("WARNING") == ""
    assert "serving" in stderr("INFO")
