"""Exit codes and error paths of the command-line entry point.

Anything needing trained models is covered by the acceptance module; these
stay fast by stopping before the training loop.
"""

import json

import pytest

from psgdetect import cli


def _write_config(path, **overrides):
    cfg = json.loads(json.dumps(cli.DEFAULT_CONFIG))  # deep copy
    for dotted, value in overrides.items():
        section, key = dotted.split(".")
        cfg[section][key] = value
    path.write_text(json.dumps(cfg))
    return str(path)


def _tiny_dataset(tmp_path):
    cfg_path = _write_config(
        tmp_path / "cfg.json",
        **{
            "generator.n_records": 6,
            "generator.record_duration_s": 120.0,
            "generator.events_per_record": 4.0,
            "partition.train1": 2,
            "partition.eval1": 1,
            "partition.test1": 3,
            "partition.train2": 1,
            "partition.eval2": 1,
            "partition.test2": 1,
        },
    )
    out = tmp_path / "data"
    assert cli.main(["generate", "--config", cfg_path, "--out", str(out)]) == 0
    return cfg_path, out


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--experiment", "nope", "--dataset", "x"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["no-such-command"])
    assert exc.value.code == 2


def test_unknown_config_key_is_rejected(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rate": 1e-3}}))
    rc = cli.main(["generate", "--config", str(bad), "--out", str(tmp_path / "d")])
    assert rc == 1
    assert "learning_rate" in capsys.readouterr().err


def test_generate_refuses_nonempty_dir_without_force(tmp_path):
    cfg_path, out = _tiny_dataset(tmp_path)
    assert cli.main(["generate", "--config", cfg_path, "--out", str(out)]) == 1
    assert cli.main(["generate", "--config", cfg_path, "--out", str(out), "--force"]) == 0


def test_surgery_experiments_require_a_baseline_run(tmp_path, capsys):
    cfg_path, data = _tiny_dataset(tmp_path)
    rc = cli.main(
        ["train", "--experiment", "pt", "--dataset", str(data),
         "--config", cfg_path, "--run-root", str(tmp_path / "runs")]
    )
    assert rc == 1
    assert "--experiment fm" in capsys.readouterr().err


def test_evaluate_requires_all_four_runs(tmp_path, capsys):
    cfg_path, data = _tiny_dataset(tmp_path)
    rc = cli.main(
        ["evaluate", "--dataset", str(data), "--config", cfg_path,
         "--run-root", str(tmp_path / "runs")]
    )
    assert rc == 1
    err = capsys.readouterr().err
    for exp in ("fm", "se", "pt", "ft"):
        assert exp in err


def test_run_root_env_var_is_honoured(tmp_path, monkeypatch, capsys):
    cfg_path, data = _tiny_dataset(tmp_path)
    monkeypatch.setenv(cli.RUN_ROOT_ENV, str(tmp_path / "from_env"))
    rc = cli.main(["evaluate", "--dataset", str(data), "--config", cfg_path])
    assert rc == 1  # no runs yet, but the error proves the root was resolved
    assert capsys.readouterr().err  # dependency message, not a crash


def test_selftest_subcommand_runs_named_suites(capsys):
    rc = cli.main(["selftest", "--suite", "stats_oracle", "--suite", "matching_oracle"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "[  ok] stats_oracle:" in out
    assert "[  ok] matching_oracle:" in out
