import json

import numpy as np
import pytest

from off2on.cli import analyze_runs, main
from off2on.config import (ConfigTypeError, ConfigValueError, UnknownKeyError, dump_config, load_config_file,
                           parse_config)
from off2on.data import ConfigurationError, load_dataset
from off2on.pipeline import RunConfig, read_metrics, strip_timing


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("")
    cfg = parse_config(p)
    assert cfg == RunConfig()
    assert cfg.ensemble_size == 5 and cfg.rho == 0.5 and cfg.temperature == 5.0
    p.write_text("{}")
    assert parse_config(p) == RunConfig()


def test_flags_override_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"ensemble_size": 5, "seed": 3}))
    cfg = parse_config(p, {"ensemble_size": 2, "seed": None})
    assert cfg.ensemble_size == 2 and cfg.seed == 3


def test_negative_gamma_names_the_key(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"gamma": -0.5}))
    with pytest.raises(ConfigValueError, match="gamma"):
        parse_config(p)


def test_distinct_diagnostics_with_key_paths(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"gama": 0.9}))
    with pytest.raises(UnknownKeyError, match="config.gama"):
        parse_config(p)
    p.write_text(json.dumps({"batch_size": "big"}))
    with pytest.raises(ConfigTypeError, match="config.batch_size"):
        parse_config(p)
    p.write_text(json.dumps({"hidden": [32, "x"]}))
    with pytest.raises(ConfigTypeError, match=r"config.hidden\[1\]"):
        parse_config(p)
    p.write_text(json.dumps({"env_overrides": {"frictoin": 1.0}}))
    with pytest.raises(UnknownKeyError, match="config.env_overrides.frictoin"):
        parse_config(p)
    p.write_text(json.dumps({"auto_alpha": 1}))
    with pytest.raises(ConfigTypeError):
        parse_config(p)
    p.write_text("{not json")
    with pytest.raises(ConfigurationError):
        parse_config(p)
    with pytest.raises(ConfigurationError):
        parse_config(tmp_path / "missing.json")


def test_echo_reloads_to_identical_config(tmp_path):
    cfg = parse_config(None, {"hidden": [32, 32], "env_overrides": {"start_noise": 0.2, "goal": [0.4, 0.4]},
                              "ensemble_size": 3})
    dump_config(cfg, tmp_path / "echo.json")
    assert parse_config(tmp_path / "echo.json") == cfg
    assert cfg.make_env().cfg.goal == (0.4, 0.4)
    assert load_config_file(tmp_path / "echo.json")["ensemble_size"] == 3


def test_gen_data_smoke(tmp_path, capsys):
    out = tmp_path / "d.bin"
    code = main(["gen-data", "--env", "point_mass_dense", "--tier", "random", "--size", "1000", "--seed", "0",
                 "--out", str(out)])
    assert code == 0 and out.exists()
    assert len(load_dataset(out)) == 1000
    assert json.loads(capsys.readouterr().out)["transitions"] == 1000


def test_finetune_without_ckpt_is_usage_error(capsys):
    assert main(["finetune", "--out", "x"]) == 2
    assert "--ckpt" in capsys.readouterr().err


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["launch"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_dataset_is_runtime_error(tmp_path, capsys):
    assert main(["train-offline", "--data", str(tmp_path / "nope.bin"), "--out", str(tmp_path / "r")]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("off2on: error: runtime:") and "\n" not in err


def test_bad_config_is_config_error(tmp_path, capsys):
    data = tmp_path / "d.bin"
    main(["gen-data", "--env", "point_mass_dense", "--tier", "random", "--size", "200", "--out", str(data)])
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"rho": 2.0}))
    capsys.readouterr()
    assert main(["train-offline", "--data", str(data), "--out", str(tmp_path / "r"), "--config", str(cfg)]) == 2
    assert capsys.readouterr().err.startswith("off2on: error: config: config.rho")


def test_corrupt_dataset_is_dataset_error(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nope" * 10)
    assert main(["train-offline", "--data", str(bad), "--out", str(tmp_path / "r")]) == 1
    assert capsys.readouterr().err.startswith("off2on: error: dataset:")


DESK = {"hidden": [16, 16], "dr_hidden": [16, 16], "batch_size": 32, "dr_batch_size": 32, "update_start": 100,
        "warmup_multiplier": 1, "eval_interval": 100, "eval_episodes": 2, "cql_num_actions": 2,
        "cql_alpha0": 1.0, "offline_steps": 30, "fqe_steps": 20}


def test_full_recipe_end_to_end(tmp_path, capsys):
    data = tmp_path / "d.bin"
    cfg = tmp_path / "desk.json"
    cfg.write_text(json.dumps(DESK))
    assert main(["gen-data", "--env", "point_mass_dense", "--tier", "random", "--size", "500", "--out", str(data)]) == 0
    assert main(["train-offline", "--data", str(data), "--out", str(tmp_path / "off"), "--config", str(cfg),
                 "--ensemble-size", "2", "--seed", "1"]) == 0
    ckpt = tmp_path / "off" / "offline.npz"
    runs = []
    for strategy in ("balanced", "uniform"):
        run = tmp_path / strategy
        assert main(["finetune", "--ckpt", str(ckpt), "--strategy", strategy, "--steps", "200", "--seed", "0",
                     "--out", str(run)]) == 0
        runs.append(run)
        header, records = read_metrics(run / "metrics.jsonl")
        assert header["config"]["ensemble_size"] == 2 and header["config"]["checkpoint"] == str(ckpt)
        assert [r["step"] for r in records] == [0, 100, 200]
        assert (run / "final.npz").exists()
    assert main(["eval", "--ckpt", str(runs[0] / "final.npz"), "--env", "point_mass_dense",
                 "--episodes", "2"]) == 0
    report = tmp_path / "report.csv"
    assert main(["analyze", "--runs", *map(str, runs), "--report", str(report)]) == 0
    lines = report.read_text().splitlines()
    assert lines[0].startswith("strategy,objective,ensemble_size,step") and len(lines) == 1 + 6
    rows = analyze_runs(runs, tmp_path / "again.csv")
    assert {r["strategy"] for r in rows} == {"balanced", "uniform"}


def test_echoed_config_reproduces_run(tmp_path):
    data = tmp_path / "d.bin"
    cfg = tmp_path / "desk.json"
    cfg.write_text(json.dumps(DESK))
    main(["gen-data", "--env", "point_mass_dense", "--tier", "random", "--size", "300", "--out", str(data)])
    main(["train-offline", "--data", str(data), "--out", str(tmp_path / "off"), "--config", str(cfg),
          "--ensemble-size", "1"])
    ckpt = str(tmp_path / "off" / "offline.npz")
    main(["finetune", "--ckpt", ckpt, "--steps", "150", "--out", str(tmp_path / "a")])
    main(["finetune", "--ckpt", ckpt, "--config", str(tmp_path / "a" / "config.json"), "--out", str(tmp_path / "b")])
    ha, ra = read_metrics(tmp_path / "a" / "metrics.jsonl")
    hb, rb = read_metrics(tmp_path / "b" / "metrics.jsonl")
    assert ha == hb and strip_timing(ra) == strip_timing(rb)
    fa = np.load(tmp_path / "a" / "final.npz")
    fb = np.load(tmp_path / "b" / "final.npz")
    assert all(np.array_equal(fa[k], fb[k]) for k in fa.files)


def test_eval_rejects_mismatched_env(tmp_path, capsys):
    data = tmp_path / "d.bin"
    cfg = tmp_path / "desk.json"
    cfg.write_text(json.dumps(DESK))
    main(["gen-data", "--env", "point_mass_dense", "--tier", "random", "--size", "200", "--out", str(data)])
    main(["train-offline", "--data", str(data), "--out", str(tmp_path / "off"), "--config", str(cfg),
          "--ensemble-size", "1"])
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(tmp_path / "off" / "offline.npz"), "--env", "point_mass_sparse"]) == 2
