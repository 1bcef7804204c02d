import numpy as np
import pytest

from mom.errors import InvalidArgument
from mom.gradcheck import finite_diff_grad
from mom.recall.config import EXAMPLE_CONFIG, ExperimentConfig, dump_config, load_config
from mom.recall.data import PAD, QUERY, RecallTaskConfig, gen_recall_dataset
from mom.recall.experiments import (
    RunCache,
    compare,
    memory_sweep_configs,
    routing_imbalance,
)
from mom.recall.model import init_model, loss_and_grads
from mom.recall.optim import AdamW, clip_by_global_norm, cosine_lr
from mom.recall.train import make_datasets, train, write_run

TINY_TASK = dict(vocab_size=20, num_pairs=3, num_queries=3, seq_len=12, num_sequences=64)


def tiny(**changes):
    base = dict(name="tiny", d=8, d_k=4, d_v=4, steps=3, batch_size=4, eval_sequences=16,
                log_every=1, warmup=1, task=TINY_TASK)
    base.update(changes)
    return ExperimentConfig(**base)


def test_eight_distinct_keys_per_sequence():
    ds = gen_recall_dataset(RecallTaskConfig(vocab_size=64, num_pairs=8, seed=0))
    keys = set(ds.config.key_ids().tolist())
    for row in ds.tokens:
        pairs = row[:16:2]
        assert len(set(pairs.tolist())) == 8
        assert set(pairs.tolist()) <= keys


def test_targets_are_the_bound_values():
    ds = gen_recall_dataset(RecallTaskConfig(vocab_size=30, num_pairs=5, num_queries=4,
                                             seq_len=20, num_sequences=50))
    for row, tgt in zip(ds.tokens, ds.targets):
        bound = dict(zip(row[:10:2].tolist(), row[1:10:2].tolist()))
        positions = np.flatnonzero(tgt >= 0)
        assert len(positions) == 4
        for t in positions:
            assert row[t] == QUERY
            assert tgt[t] == bound[row[t - 1]]
        assert np.all(row[10:12] == PAD)


def test_dataset_is_deterministic_in_seed():
    cfg = RecallTaskConfig(num_sequences=32)
    assert gen_recall_dataset(cfg).to_bytes() == gen_recall_dataset(cfg).to_bytes()
    other = RecallTaskConfig(num_sequences=32, seed=1)
    assert gen_recall_dataset(cfg).to_bytes() != gen_recall_dataset(other).to_bytes()


def test_task_validation():
    with pytest.raises(InvalidArgument):
        RecallTaskConfig(num_pairs=8, num_queries=8, seq_len=31)
    with pytest.raises(InvalidArgument):
        RecallTaskConfig(vocab_size=10, num_pairs=5, seq_len=40)


def test_eval_split_uses_a_different_seed():
    train_ds, eval_ds = make_datasets(tiny())
    assert not np.array_equal(train_ds.tokens[:16], eval_ds.tokens)


def test_expanded_baseline_matches_activated_state():
    mom = ExperimentConfig(model="mom", num_memories=4, top_k=2, shared=True, d_k=8, d_v=8)
    expanded = mom.replace(model="expanded")
    assert expanded.layer_shape() == dict(num_memories=1, top_k=1, shared=False, d_k=8, d_v=24)
    assert expanded.activated_state_size() == mom.activated_state_size()
    no_shared = mom.replace(shared=False, model="expanded")
    assert no_shared.layer_shape()["d_v"] == 16


def test_config_validation():
    with pytest.raises(InvalidArgument):
        ExperimentConfig(model="transformer")
    with pytest.raises(InvalidArgument):
        ExperimentConfig(num_memories=2, top_k=3)
    with pytest.raises(ValueError):
        ExperimentConfig(rule="LSTM")
    with pytest.raises(InvalidArgument):
        ExperimentConfig.from_dict({"learning_rate": 0.1})


def test_yaml_round_trip(tmp_path):
    cfg = tiny(rule="GLA", seed=7)
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg
    (tmp_path / "example.yaml").write_text(EXAMPLE_CONFIG)
    example = load_config(tmp_path / "example.yaml")
    assert example.model == "mom" and example.aux_scale == 1e-3


def test_fingerprint_tracks_every_field():
    cfg = tiny()
    assert cfg.fingerprint() == tiny().fingerprint()
    assert cfg.fingerprint() != cfg.replace(seed=1).fingerprint()
    assert cfg.fingerprint() != cfg.replace(task={"seed": 3}).fingerprint()


@pytest.mark.parametrize("num_layers", [1, 2])
def test_model_gradients_match_differences(num_layers):
    model = init_model(11, 6, num_layers, num_memories=3, top_k=2, shared=True,
                       d_k=3, d_v=3, a_bias=1.0, rng=0)
    rng = np.random.default_rng(1)
    tokens = rng.integers(0, 11, size=(2, 7))
    targets = np.where(rng.random((2, 7)) < 0.5, rng.integers(0, 11, size=(2, 7)), -1)
    _, _, _, grads, _ = loss_and_grads(model, tokens, targets, aux_scale=0.1)

    def loss(arrs):
        return loss_and_grads(model.with_arrays(arrs), tokens, targets, aux_scale=0.1)[0]

    numeric = finite_diff_grad(loss, model.arrays())
    for name, g in numeric.items():
        np.testing.assert_allclose(grads[name], g, rtol=1e-5, atol=1e-8, err_msg=name)


def test_untrained_model_is_near_chance():
    cfg = tiny(steps=0, eval_sequences=256, task=dict(TINY_TASK, num_sequences=256))
    record = train(cfg)
    chance = 1.0 / cfg.task.num_values
    assert record.losses == []
    assert abs(record.final_accuracy - chance) < 0.1


def test_training_is_bit_reproducible(tmp_path):
    a, b = train(tiny()), train(tiny())
    assert a.to_json() == b.to_json()
    write_run(a, tmp_path / "a")
    write_run(b, tmp_path / "b")
    for name in ["run.json", "loss.csv", "routing.csv"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_routing_fractions_are_distributions():
    record = train(tiny(num_layers=2))
    assert len(record.routing_fractions) == 2
    np.testing.assert_allclose(np.sum(record.routing_fractions, axis=1), 1.0)
    assert len(record.losses) == 3


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1.0, warmup=10) == pytest.approx(0.1)
    assert cosine_lr(10, 100, 1.0, warmup=10) == pytest.approx(1.0)
    assert cosine_lr(100, 100, 1.0, warmup=10) == pytest.approx(0.0)
    assert cosine_lr(55, 100, 1.0, warmup=10) == pytest.approx(0.5)


def test_clipping_and_adamw():
    grads = {"w": np.array([3.0, 4.0])}
    assert clip_by_global_norm(grads, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(grads["w"], [0.6, 0.8])
    params = {"w": np.ones((2, 2)), "b": np.ones(2)}
    opt = AdamW(params, lr=0.1, weight_decay=0.5)
    out = opt.step(params, {"w": np.zeros((2, 2)), "b": np.zeros(2)})
    np.testing.assert_allclose(out["w"], 1.0 - 0.1 * 0.5)
    np.testing.assert_array_equal(out["b"], 1.0)


def test_memory_sweep_keeps_half_active():
    arms = memory_sweep_configs(ExperimentConfig())
    assert [(c.num_memories, c.top_k) for c in arms] == [(1, 1), (2, 1), (4, 2), (8, 4)]
    with pytest.raises(InvalidArgument):
        memory_sweep_configs(ExperimentConfig(), ratio=0.0)


def test_routing_imbalance():
    assert routing_imbalance([[0.25, 0.25, 0.5]]) == [2.0]
    assert routing_imbalance([[0.5, 0.5], [1.0, 0.0]]) == [1.0, float("inf")]


def test_compare_writes_artifacts(tmp_path):
    cache = RunCache()
    arms = [tiny(name="mom"), tiny(name="expanded", model="expanded")]
    result = compare(arms, 2, cache=cache, out_dir=tmp_path)
    assert len(cache) == 4
    assert result.arm("mom").seeds == [0, 1]
    assert result.arm("expanded").routing == [[1.0]] * arms[1].num_layers
    for name in ["summary.json", "summary.csv", "routing_heatmap.csv", "mom/seed1/run.json"]:
        assert (tmp_path / name).exists()
    compare([tiny(name="renamed")], 2, cache=cache)
    assert len(cache) == 4
    with pytest.raises(InvalidArgument):
        compare([tiny(), tiny()], 1)
