from dataclasses import replace

import numpy as np
import pytest

from tmpa import ContractViolation
from tmpa.model import LOSS_KEYS
from tmpa.synthdata import SynthSpec, generate, pk_sample
from tmpa.tensor import Tape, backward
from tmpa.trainer import (
    CONFIG_KEYS,
    Checkpoint,
    TrainConfig,
    TrainingDiverged,
    apply_overrides,
    format_config,
    init_state,
    lr_at,
    parse_config_text,
    prepare_inputs,
    step_rng,
    train,
    train_step,
)

TINY = TrainConfig(epochs=2, steps_per_epoch=2, p=3, k=2, widths=(4, 6, 8), milestones=((1, 0.1),))


@pytest.fixture(scope="module")
def ds():
    return generate(SynthSpec(num_ids=4, num_test_ids=2, imgs_per_id_per_modality=3, seed=1))


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.1 and lr_at(19, cfg) == 0.1
    assert lr_at(20, cfg) == pytest.approx(0.01) and lr_at(49, cfg) == pytest.approx(0.01)
    assert lr_at(50, cfg) == pytest.approx(0.001) and lr_at(59, cfg) == pytest.approx(0.001)


def test_config_rejects_unsorted_milestones():
    with pytest.raises(ContractViolation):
        TrainConfig(milestones=((50, 0.01), (20, 0.1)))


def test_config_text_round_trip():
    cfg = apply_overrides(TrainConfig(), [("loss.rho", "0.5"), ("mix.a_c", "1/3"), ("enable_mft", "false"),
                                          ("model.widths", "8,8,16"), ("milestones", "3:0.5")])
    assert cfg.weights.rho == 0.5 and cfg.mix.a_c == pytest.approx(1 / 3)
    assert not cfg.enable_mft and cfg.widths == (8, 8, 16) and cfg.milestones == ((3, 0.5),)
    text = format_config(cfg)
    assert [line.split(" = ")[0] for line in text.splitlines()] == list(CONFIG_KEYS)
    assert parse_config_text(text) == cfg


def test_config_rejects_unknown_keys_and_garbage():
    with pytest.raises(ContractViolation):
        apply_overrides(TrainConfig(), [("loss.gamma", "1")])
    with pytest.raises(ContractViolation):
        parse_config_text("epochs 3\n")
    with pytest.raises(ContractViolation):
        parse_config_text("enable_mft = maybe\n")
    assert parse_config_text("# comment only\n\nepochs = 3  # trailing\n").epochs == 3


def frozen_loss(model, x_hat, x_v, x_i, labels, cfg):
    with Tape() as tape:
        losses, _ = model.forward_train(x_hat, x_v, x_i, labels, cfg.weights)
    return losses["l_total"], tape


def test_zero_learning_rate_leaves_parameters(ds):
    model, opt = init_state(4, TINY)
    before = {k: p.data.copy() for k, p in model.named_parameters().items()}
    rng = step_rng(TINY, 0, 0)
    train_step(model, opt, pk_sample(ds, 3, 2, rng), TINY, 0.0, rng)
    for k, p in model.named_parameters().items():
        assert np.array_equal(p.data, before[k]), k


def test_small_step_descends_on_frozen_batch(ds):
    cfg = replace(TINY, weights=replace(TINY.weights, rho=5.0))
    descended = 0
    for seed in range(20):
        cfg_s = replace(cfg, seed=seed)
        model, opt = init_state(4, cfg_s)
        model.train()
        rng = step_rng(cfg_s, 0, 0)
        batch = pk_sample(ds, 3, 2, rng)
        x_hat, x_v, x_i = prepare_inputs(batch, cfg_s, rng)
        loss, tape = frozen_loss(model, x_hat, x_v, x_i, batch.labels, cfg_s)
        backward(loss, tape)
        opt.step(1e-3)
        after, _ = frozen_loss(model, x_hat, x_v, x_i, batch.labels, cfg_s)
        descended += float(after.data) < float(loss.data)
    assert descended >= 19


def test_train_step_is_deterministic(ds):
    def run():
        model, opt = init_state(4, TINY)
        rng = step_rng(TINY, 0, 0)
        vals = train_step(model, opt, pk_sample(ds, 3, 2, rng), TINY, 0.1, rng)
        return vals, {k: p.data.copy() for k, p in model.named_parameters().items()}

    (va, pa), (vb, pb) = run(), run()
    assert va == vb
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_zero_epochs_returns_initial_state(ds):
    ck = train(ds, replace(TINY, epochs=0))
    model, _ = init_state(4, TINY)
    assert ck.epoch == 0 and ck.momentum == {}
    for k, p in model.named_parameters().items():
        assert np.array_equal(ck.params[k], p.data)


def test_checkpoint_round_trip(ds, tmp_path):
    ck = train(ds, TINY)
    ck.save(tmp_path / "a.ckpt")
    back = Checkpoint.load(tmp_path / "a.ckpt")
    assert back.epoch == ck.epoch == 2 and back.config == ck.config and back.num_classes == 4
    for part in ("params", "momentum"):
        a, b = getattr(ck, part), getattr(back, part)
        assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    for k, (m, v) in ck.stats.items():
        assert np.array_equal(m, back.stats[k][0]) and np.array_equal(v, back.stats[k][1])
    back.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ContractViolation):
        Checkpoint.load(tmp_path / "x.ckpt")


def test_training_writes_logs_and_epoch_checkpoints(ds, tmp_path):
    train(ds, TINY, out_dir=tmp_path)
    lines = (tmp_path / "losses.csv").read_text().splitlines()
    assert lines[0].split(",") == ["epoch", "step", *LOSS_KEYS]
    assert len(lines) == 1 + TINY.epochs * TINY.steps_per_epoch
    assert all(np.isfinite(float(x)) for line in lines[1:] for x in line.split(",")[2:])
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["epoch_001.ckpt", "epoch_002.ckpt"]


def test_resume_matches_uninterrupted_run(ds, tmp_path):
    full = train(ds, replace(TINY, epochs=3))
    train(ds, TINY, out_dir=tmp_path)
    resumed = train(ds, replace(TINY, epochs=3), resume=Checkpoint.load(tmp_path / "epoch_001.ckpt"))
    for k in full.params:
        assert np.array_equal(full.params[k], resumed.params[k]), k


def test_pk_batch_must_fit(ds):
    with pytest.raises(ContractViolation):
        train(ds, replace(TINY, p=8))


def test_divergence_dumps_batch(ds, tmp_path):
    model, opt = init_state(4, TINY)
    for p in model.named_parameters().values():
        p.data[...] = np.nan
    rng = step_rng(TINY, 0, 0)
    with pytest.raises(TrainingDiverged, match="dumped"):
        train_step(model, opt, pk_sample(ds, 3, 2, rng), TINY, 0.1, rng, dump_dir=tmp_path)
    dump = np.load(tmp_path / "diverged_step.npz")
    assert dump["x_hat"].shape == (12, 3, 48, 24) and dump["labels"].shape == (6,)
