import json
import threading

import pytest
import yaml
from filelock import FileLock

from finer.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_RUNTIME, main
from finer.config import DEFAULTS, ConfigError, ExperimentConfig
from finer.pipeline import read_csv

TINY = {
    "task": {"n_train_benign": 40, "n_train_risk": 30, "n_test_benign": 8, "n_test_risk": 8,
             "ic_count": [3, 8], "max_len": 96},
    "model": {"channels": 4, "hidden": 4},
    "train": {"epochs": 3},
    "finetune": {"epochs": 1},
    "explain": {"n_neighbors": 60, "shapley_permutations": 5, "lemna_max_iter": 10},
    "k_grid": [1, 2, 3], "p_grid": [10, 50],
    "max_explain": 3,
}


def write_cfg(tmp_path, **extra):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump({**TINY, "out": str(tmp_path / "run"), **extra}))
    return p


def test_defaults_validate_and_hash_is_stable():
    a, b = ExperimentConfig.from_dict({}), ExperimentConfig.from_dict({"out": "elsewhere", "jobs": 4})
    assert a.hash() == b.hash() and len(a.hash()) == 16
    assert a.hash() != ExperimentConfig.from_dict({"seed": 1}).hash()
    assert set(a.seeds()) >= {"data", "model", "train", "finetune", "mask", "eval"}
    assert len(set(a.seeds().values())) == len(a.seeds())
    assert a.finetune_config().lambdas == tuple(DEFAULTS["finetune"]["lambdas"])


@pytest.mark.parametrize("raw", [
    {"bogus": 1}, {"train": {"nope": 1}}, {"k": 0}, {"scenarios": ["cheap"]}, {"explainers": ["magic"]},
    {"k_grid": [3, 1]}, {"task": {"ic_count": [5, 2]}}, {"task": {"colour": 1}}, {"seed": -1},
    {"model": {"arch": "rnn"}}, {"finetune": {"lambdas": [1, 1]}}, {"explain": {"bad_knob": 1}},
])
def test_bad_configs_are_rejected(raw):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)


def test_round_trip_through_yaml(tmp_path):
    cfg = ExperimentConfig.from_dict({**TINY, "seed": 7})
    p = tmp_path / "c.yaml"
    p.write_text(cfg.dump())
    assert ExperimentConfig.load(p).hash() == cfg.hash()
    assert cfg.override(seed=None, k=5).raw["k"] == 5


def test_cli_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("k: -3\n")
    assert main(["gen-data", "--config", str(p)]) == EXIT_CONFIG
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["status"] == "error" and err["kind"] == "config"
    p.write_text("[unclosed\n")
    assert main(["gen-data", "--config", str(p)]) == EXIT_CONFIG


def test_cli_stage_order_is_enforced(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["eval", "--config", str(cfg)]) == EXIT_DATA
    assert main(["gen-data", "--config", str(cfg)]) == EXIT_OK
    assert main(["explain", "--config", str(cfg)]) == EXIT_DATA
    err = capsys.readouterr().err
    assert "train" in err


def test_gen_data_is_deterministic(tmp_path):
    outs = []
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        cfg = write_cfg(tmp_path / name)
        assert main(["gen-data", "--config", str(cfg)]) == EXIT_OK
        outs.append({p.name: p.read_bytes() for p in sorted((tmp_path / name / "run" / "data").iterdir())})
    assert outs[0] == outs[1]


def test_locked_output_directory(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    run = tmp_path / "run"
    run.mkdir()
    with FileLock(str(run / ".finer.lock")):
        code = [None]
        t = threading.Thread(target=lambda: code.__setitem__(
            0, main(["gen-data", "--config", str(cfg), "--lock-timeout", "0.2"])))
        t.start()
        t.join()
    assert code[0] == EXIT_RUNTIME
    assert '"kind": "locked"' in capsys.readouterr().err


@pytest.mark.slow
def test_full_pipeline_on_tiny_config(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["all", "--config", str(cfg), "--seed", "3"]) == EXIT_OK
    status = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert status["status"] == "ok" and status["seed"] == 3
    ev = tmp_path / "run" / "eval"
    for name in ("table4_fidelity", "table5_ensemble", "table6_cost", "table7_accuracy", "table8_auc"):
        rows = read_csv(ev / f"{name}.csv")
        assert rows and all(r["config_hash"] == status["config_hash"] and r["seed"] == "3" for r in rows)
    assert (tmp_path / "run" / "report.md").exists()
