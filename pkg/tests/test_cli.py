import json
import subprocess
import sys

import pytest

from mom.cli import main
from mom.recall.config import ExperimentConfig, dump_config

TINY = dict(name="cli", d=8, d_k=4, d_v=4, steps=2, batch_size=4, eval_sequences=8,
            task=dict(vocab_size=20, num_pairs=3, num_queries=3, seq_len=12, num_sequences=32))


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.yaml"
    dump_config(ExperimentConfig(**TINY), path)
    return path


def test_train_writes_reproducible_artifacts(config, tmp_path, capsys):
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "b")]) == 0
    assert "accuracy" in capsys.readouterr().out
    for name in ["run.json", "loss.csv", "routing.csv"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert json.loads((tmp_path / "a" / "timing.json").read_text())["wall_time"] > 0


def test_compare(config, tmp_path, capsys):
    other = tmp_path / "other.yaml"
    dump_config(ExperimentConfig(**dict(TINY, name="exp", model="expanded")), other)
    code = main(["compare", "--configs", str(config), str(other), "--seeds", "2",
                 "--out", str(tmp_path / "cmp")])
    assert code == 0
    out = capsys.readouterr().out
    assert "cli" in out and "exp" in out
    summary = json.loads((tmp_path / "cmp" / "summary.json").read_text())
    assert [a["name"] for a in summary] == ["cli", "exp"]


def test_gradcheck_passes(tmp_path):
    path = tmp_path / "g.yaml"
    dump_config(ExperimentConfig(**dict(TINY, d=5, num_memories=3, a_bias=0.5)), path)
    assert main(["gradcheck", "--config", str(path), "--seq-len", "5", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "gradreport.json").read_text())
    assert report["passed"] and max(report["max_rel_error"].values()) < 1e-6


def test_gradcheck_rejects_forward_only_rule(tmp_path, capsys):
    path = tmp_path / "g.yaml"
    dump_config(ExperimentConfig(**dict(TINY, rule="RWKV7")), path)
    assert main(["gradcheck", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "RWKV7" in capsys.readouterr().err


def test_equivalence(tmp_path):
    assert main(["equivalence", "--trials", "11", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "equivalence.json").read_text())["passed"]


def test_bad_config_exits_with_usage_error(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("model: mom\nhidden: 3\n")
    assert main(["train", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "hidden" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mom", "example-config"],
                         capture_output=True, text=True, check=True).stdout
    assert out.startswith("# Experiment config")
