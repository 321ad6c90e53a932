import json
import shutil

import pytest

from gaprune.cli import config_from_dict, main, parse_config, serialize_config
from gaprune.errors import ConfigError
from gaprune.genetic import GAConfig

TINY_MODEL = {"arch": "small_cnn", "input_shape": [1, 12, 12], "widths": [4, 6, 6, 8]}
TINY_DATA = {"format": "synthetic",
             "source": {"kind": "blobs", "n": 60, "seed": 0, "shape": [1, 12, 12], "classes": 10}}


def write_config(tmp_path, name="run.json", **raw):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return path


def snapshot(directory):
    """Bytes of every output file except the timestamped metadata."""
    return {p.relative_to(directory).as_posix(): p.read_bytes()
            for p in sorted(directory.rglob("*")) if p.is_file() and p.name != "metadata.json"}


def run_twice(tmp_path, raw):
    path = write_config(tmp_path, **raw)
    out = tmp_path / raw.get("output", "out")
    assert main(["--config", str(path)]) == 0
    first = snapshot(out)
    shutil.rmtree(out)
    assert main(["--config", str(path)]) == 0
    return first, snapshot(out)


def test_defaults_match_library():
    cfg = config_from_dict({"command": "stats", "seed": 0})
    ga = cfg.ga.config(0)
    lib = GAConfig()
    assert (ga.population_size, ga.crossover_prob, ga.mutation_prob, ga.elitism) == \
        (lib.population_size, lib.crossover_prob, lib.mutation_prob, lib.elitism)
    assert cfg.sampling.image_fraction == 0.01 and cfg.sampling.volumes_per_image == 10
    assert cfg.finetune.beta == 1e3


@pytest.mark.parametrize("raw", [
    {"command": "stats", "seed": 0, "ga": {"mutation_prob": 1.5}},
    {"command": "stats", "seed": 0, "bogus": 1},
    {"command": "stats", "seed": 0, "ga": {"populaton_size": 10}},
    {"command": "stats", "seed": 0, "ga": {"population_size": "20"}},
    {"command": "explode", "seed": 0},
    {"command": "stats"},
    {"command": "stats", "seed": 0, "model": {"arch": "alexnet"}},
    {"command": "prune", "seed": 0, "plan": {"groups": [{"layers": ["conv1"], "rate": 1.2}]}},
])
def test_invalid_configs_exit_1(tmp_path, raw, capsys):
    assert main(["--config", str(write_config(tmp_path, **raw))]) == 1
    assert "config error" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_unreadable_config_exits_1(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["--config", str(bad)]) == 1


def test_serialize_roundtrip(tmp_path):
    cfg = config_from_dict({"command": "prune", "seed": 4, "model": TINY_MODEL,
                            "dataset": TINY_DATA, "ga": {"max_iterations": 7}})
    text = serialize_config(cfg)
    path = tmp_path / "c.json"
    path.write_text(text)
    back = parse_config(path)
    assert back == cfg and serialize_config(back) == text


def test_flags_override_seed_and_output(tmp_path):
    path = write_config(tmp_path, command="stats", seed=1, model=TINY_MODEL)
    assert main(["--config", str(path), "--seed", "9", "--out", str(tmp_path / "x")]) == 0
    written = json.loads((tmp_path / "x" / "config.json").read_text())
    assert written["seed"] == 9


def test_stats_on_vgg(tmp_path, capsys):
    path = write_config(tmp_path, command="stats", seed=0, model={"arch": "vgg16"})
    assert main(["--config", str(path)]) == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["params"] == 14_728_266
    assert "params 14728266" in capsys.readouterr().out


def test_train_eval_and_empty_prune(tmp_path):
    train = {"command": "train", "seed": 0, "model": TINY_MODEL, "dataset": TINY_DATA,
             "train": {"epochs": 1, "batch_size": 20}, "output": "trained"}
    assert main(["--config", str(write_config(tmp_path, "t.json", **train))]) == 0
    assert (tmp_path / "trained" / "train_log.csv").read_text().startswith("epoch,loss,test_accuracy")

    ev = {"command": "eval", "seed": 0, "model": "trained/model", "dataset": TINY_DATA}
    a, b = run_twice(tmp_path, ev)
    assert a == b

    prune = {"command": "prune", "seed": 0, "model": "trained/model", "dataset": TINY_DATA,
             "output": "pruned"}
    assert main(["--config", str(write_config(tmp_path, "p.json", **prune))]) == 0
    src = snapshot(tmp_path / "trained" / "model")
    assert snapshot(tmp_path / "pruned" / "model") == src


def test_prune_is_byte_identical_across_runs(tmp_path):
    raw = {"command": "prune", "seed": 3, "model": TINY_MODEL, "dataset": TINY_DATA,
           "plan": {"groups": [{"layers": ["conv2", "conv3"], "rate": 0.5}], "skip": ["conv1"]},
           "ga": {"max_iterations": 10},
           "sampling": {"image_fraction": 0.5, "volumes_per_image": 3},
           "finetune": {"inter_epochs": 1, "final_epochs": 1, "batch_size": 30}}
    first, second = run_twice(tmp_path, raw)
    assert first == second
    for name in ("plan.json", "report.json", "report.csv", "summary.json", "trajectory.csv",
                 "masks/conv3.json", "masks/conv4.json", "ga/conv2.csv", "ga/conv3.csv"):
        assert name in first


def test_runtime_error_exits_2_with_context(tmp_path, capsys):
    raw = {"command": "prune", "seed": 0, "model": TINY_MODEL, "dataset": TINY_DATA,
           "plan": {"groups": [{"layers": ["conv4"], "rate": 0.5}]}}
    assert main(["--config", str(write_config(tmp_path, **raw))]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error [gaprune.") and "conv4" in err
    assert json.loads((tmp_path / "out" / "metadata.json").read_text())["status"] == 2


def test_missing_model_file_exits_2(tmp_path):
    raw = {"command": "eval", "seed": 0, "model": "nowhere", "dataset": TINY_DATA}
    assert main(["--config", str(write_config(tmp_path, **raw))]) == 2
