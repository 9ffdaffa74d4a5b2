import csv

import numpy as np
import pytest

from conftest import small_config
from smoe_vae.data import SyntheticSpec, build_dataset, synthetic_sources
from smoe_vae.model import ModelConfig, SUPERVISED_GATE, SUPERVISED_ORACLE, UNSUPERVISED
from smoe_vae.training import (CHECKPOINT_MAGIC, METRIC_FIELDS, CheckpointCorruptError, CheckpointFormatError,
                               DivergedError, TrainConfig, Trainer, evaluate, load_checkpoint, read_checkpoint,
                               resume, save_checkpoint, train, utilization)


def cfg(experts=2, epochs=2, mode=UNSUPERVISED, **kw):
    return TrainConfig(epochs=epochs, lr=1e-3, batch_size=20, routing_mode=mode, model=small_config(experts), **kw)


def test_loss_decreases_on_tiny_run():
    train_set, test_set = build_dataset(synthetic_sources(SyntheticSpec(samples_per_class=200)), 200, seed=0)
    config = TrainConfig(epochs=2, batch_size=50, lr=1e-3, model=small_config(2))
    trainer = Trainer(config, train_set, test_set)
    first = trainer.train_epoch()
    second = trainer.train_epoch()
    assert second["total"] < first["total"]


def test_supervised_oracle_has_zero_balance(small_data):
    train_set, test_set = small_data
    _, rows = train(cfg(5, mode=SUPERVISED_ORACLE), train_set, test_set)
    # shuffled batches of a balanced set are not exactly balanced, but the
    # evaluation over the whole balanced test set is
    assert rows[-1].test["balance"] == pytest.approx(0.0, abs=1e-6)
    assert rows[-1].dead_experts == 0


def test_supervised_oracle_leaves_gate_at_init(small_data):
    train_set, test_set = small_data
    trainer = Trainer(cfg(5, mode=SUPERVISED_ORACLE), train_set, test_set)
    before = [p.value.copy() for p in trainer.model.gate_params]
    trainer.run()
    for b, p in zip(before, trainer.model.gate_params):
        np.testing.assert_array_equal(b, p.value)


def test_supervised_gate_learns_labels(small_data):
    train_set, test_set = small_data
    config = cfg(5, epochs=6, mode=SUPERVISED_GATE)
    trainer = Trainer(config, train_set, test_set)
    before = [p.value.copy() for p in trainer.model.gate_params]
    trainer.run()
    assert any(not np.array_equal(b, p.value) for b, p in zip(before, trainer.model.gate_params))


def test_supervised_modes_need_one_expert_per_class(small_data):
    with pytest.raises(ValueError, match="num_experts"):
        Trainer(cfg(3, mode=SUPERVISED_ORACLE), *small_data)


def test_unknown_routing_mode():
    with pytest.raises(ValueError, match="routing_mode"):
        TrainConfig(routing_mode="random")


def test_same_seed_same_run(small_data, tmp_path):
    train(cfg(3), *small_data, out_dir=tmp_path / "a")
    train(cfg(3), *small_data, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_different_seed_different_run(small_data):
    _, a = train(cfg(3, seed=0), *small_data)
    _, b = train(cfg(3, seed=1), *small_data)
    assert a[-1].train["total"] != b[-1].train["total"]


def test_overfits_single_sample(small_data):
    train_set, _ = small_data
    one = train_set.subset([0])
    config = TrainConfig(epochs=300, lr=1e-3, batch_size=1, model=ModelConfig(num_experts=1))
    trainer = Trainer(config, one, one)
    for _ in range(config.epochs):
        trainer.train_epoch()
        trainer.epoch += 1
    assert evaluate(trainer.model, one).recon < 0.5


def test_metrics_csv_layout(small_data, tmp_path):
    train(cfg(3, epochs=3), *small_data, out_dir=tmp_path)
    with open(tmp_path / "metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == METRIC_FIELDS
    assert [r[0] for r in rows[1:]] == ["0", "1", "2"]
    util = [float(u) for u in rows[-1][-1].split()]
    assert len(util) == 3 and sum(util) == pytest.approx(1.0, abs=1e-5)
    assert (tmp_path / "timing.csv").exists() and (tmp_path / "model.ckpt").exists()


def test_metrics_rows_are_append_only(small_data, tmp_path):
    trainer = Trainer(cfg(2, epochs=1), *small_data)
    trainer.run(tmp_path)
    first = (tmp_path / "metrics.csv").read_text()
    trainer.config.epochs = 2
    trainer.run(tmp_path)
    assert (tmp_path / "metrics.csv").read_text().startswith(first)


def test_diverged_run_raises(small_data):
    trainer = Trainer(cfg(2), *small_data)
    trainer.model.params()[0].value[...] = np.nan
    with pytest.raises(DivergedError, match="epoch 0, batch 0"):
        trainer.train_epoch()


def test_utilization_counts():
    fractions, dead = utilization(np.array([0, 0, 1, 1, 1, 3]), 4)
    np.testing.assert_allclose(fractions, [2 / 6, 3 / 6, 0, 1 / 6])
    assert dead == 1


def test_checkpoint_round_trip(small_data, tmp_path):
    model, _ = train(cfg(3, epochs=1), *small_data)
    save_checkpoint(model, tmp_path / "m.ckpt")
    again = load_checkpoint(tmp_path / "m.ckpt")
    assert again.config == model.config
    for a, b in zip(model.params(), again.params()):
        assert a.name == b.name
        np.testing.assert_array_equal(a.value, b.value)
    x = small_data[1].floats()[:7]
    np.testing.assert_array_equal(model.forward_hard(x)[0], again.forward_hard(x)[0])


def test_checkpoint_manifest_names_unique(small_data, tmp_path):
    trainer = Trainer(cfg(3, epochs=1), *small_data)
    trainer.run(tmp_path)
    m = read_checkpoint(tmp_path / "model.ckpt").manifest
    names = [e["name"] for e in m["params"] + m["optimizer"]["tensors"]]
    assert len(names) == len(set(names))
    assert m["epoch"] == 1 and len(m["metrics"]) == 1


def test_truncated_checkpoint(small_data, tmp_path):
    model, _ = train(cfg(2, epochs=1), *small_data)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointCorruptError, match="payload"):
        load_checkpoint(path)


def test_bad_magic_and_version(small_data, tmp_path):
    model, _ = train(cfg(2, epochs=1), *small_data)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    buf = bytearray(path.read_bytes())
    (tmp_path / "magic.ckpt").write_bytes(b"NOTSMOE!" + bytes(buf[8:]))
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(tmp_path / "magic.ckpt")
    buf[8] = 99
    (tmp_path / "ver.ckpt").write_bytes(bytes(buf))
    with pytest.raises(CheckpointFormatError, match="version 99"):
        load_checkpoint(tmp_path / "ver.ckpt")
    assert bytes(buf[:8]) == CHECKPOINT_MAGIC


def test_resume_is_bitwise(small_data, tmp_path):
    train(cfg(3, epochs=4), *small_data, out_dir=tmp_path / "straight")
    first = Trainer(cfg(3, epochs=4), *small_data)
    first.config.epochs = 2
    first.run(tmp_path / "split")
    resumed = resume(tmp_path / "split" / "model.ckpt", *small_data, epochs=4)
    assert resumed.epoch == 2
    resumed.run(tmp_path / "split")
    assert ((tmp_path / "straight" / "metrics.csv").read_bytes()
            == (tmp_path / "split" / "metrics.csv").read_bytes())


def test_resume_needs_training_state(small_data, tmp_path):
    model, _ = train(cfg(2, epochs=1), *small_data)
    save_checkpoint(model, tmp_path / "bare.ckpt")
    with pytest.raises(CheckpointFormatError, match="training state"):
        resume(tmp_path / "bare.ckpt", *small_data)


def test_evaluate_uses_hard_routing(small_data):
    model, rows = train(cfg(3, epochs=1), *small_data)
    lb = evaluate(model, small_data[1])
    assert lb.recon == pytest.approx(rows[-1].test["recon"])
