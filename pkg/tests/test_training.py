import os

import numpy as np
import pytest
import torch

from conftest import TOY_HOLDOUT, toy_model_config
from morphgrasp import tensor_nn as tnn
from morphgrasp.errors import ConfigMismatch, EmptyDataset
from morphgrasp.grasp_data import Cache, Manifest
from morphgrasp.toy import TOY_TRAIN
from morphgrasp.training import (
    TrainConfig,
    build_model,
    collate,
    encoder_hash,
    evaluate_contact_loss,
    fit_grasp,
    load_model,
    load_samples,
    predict_contacts,
    train,
)

SHORT = TrainConfig(epochs=3, batch_size=4, lr=1e-3, seed=0)


def test_train_config_validation():
    assert TrainConfig().lr == 5e-5
    assert TrainConfig().lr_schedule == "constant"
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="linear")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 2, "learning_rate": 1e-3})
    tc = TrainConfig(**TOY_TRAIN)
    assert TrainConfig.from_dict(tc.to_dict()) == tc


def test_identical_seeds_identical_curves(toy_samples, tmp_path):
    a = train(toy_samples, toy_model_config(), SHORT, str(tmp_path / "a"))
    b = train(toy_samples, toy_model_config(), SHORT, str(tmp_path / "b"))
    assert a.step_losses == b.step_losses
    assert (tmp_path / "a" / "loss.txt").read_bytes() == (tmp_path / "b" / "loss.txt").read_bytes()
    assert (tmp_path / "a" / "checkpoints" / "final.ckpt").read_bytes() == \
        (tmp_path / "b" / "checkpoints" / "final.ckpt").read_bytes()


def test_loss_log_format(toy_samples, tmp_path):
    res = train(toy_samples, toy_model_config(), SHORT, str(tmp_path))
    lines = (tmp_path / "loss.txt").read_text().splitlines()
    assert lines[0] == "# epoch geometric contact total"
    assert len(lines) == 1 + SHORT.epochs
    for line, (epoch, geo, con, tot) in zip(lines[1:], res.curve):
        fields = line.split()
        assert int(fields[0]) == epoch
        assert [float(x) for x in fields[1:]] == [geo, con, tot]
        assert abs(geo + con - tot) < 1e-12


def test_different_seed_different_curve(toy_samples):
    a = train(toy_samples, toy_model_config(), SHORT)
    b = train(toy_samples, toy_model_config(seed=1), TrainConfig(epochs=3, batch_size=4, lr=1e-3, seed=1))
    assert a.step_losses != b.step_losses


def test_empty_dataset(toy_samples):
    with pytest.raises(EmptyDataset):
        train([], toy_model_config(), SHORT)
    held = TrainConfig(epochs=1, holdout_grippers=["toy0", "toy1"])
    with pytest.raises(EmptyDataset):
        train(toy_samples, toy_model_config(), held)


def test_holdout_in_train_config_filters(toy_samples):
    tc = TrainConfig(epochs=1, batch_size=8, holdout_grippers=["toy1"])
    res = train(toy_samples, toy_model_config(), tc)
    assert len(res.step_losses) == 1  # 4 samples fit in one batch


def test_cosine_schedule_trains(toy_samples):
    model = build_model(toy_model_config())
    tc = TrainConfig(epochs=4, batch_size=4, lr=1e-3, lr_schedule="cosine")
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    train(toy_samples, toy_model_config(), tc, model=model)
    assert any(not torch.equal(before[n], p) for n, p in model.named_parameters())


def test_freeze_without_checkpoint_warns(caplog):
    with caplog.at_level("WARNING"):
        build_model(toy_model_config(freeze_policy="freeze"))
    assert "without an initial checkpoint" in caplog.text


def test_freeze_keeps_encoders(toy_samples, tmp_path):
    first = train(toy_samples, toy_model_config(), SHORT, str(tmp_path / "pre"))
    cfg = toy_model_config(freeze_policy="freeze")
    tc = TrainConfig(epochs=2, batch_size=4, lr=1e-3, init_checkpoint=first.checkpoint)
    model = build_model(cfg, first.checkpoint)
    assert encoder_hash(model) == encoder_hash(first.model)
    morph_before = [p.detach().clone() for n, p in model.named_parameters() if n.startswith("enc_morph.")]
    train(toy_samples, cfg, tc, model=model)
    assert encoder_hash(model) == encoder_hash(first.model)
    morph_after = [p for n, p in model.named_parameters() if n.startswith("enc_morph.")]
    assert any(not torch.equal(a, b) for a, b in zip(morph_before, morph_after))


def test_checkpoint_reload_reproduces_losses(toy_samples, tmp_path):
    res = train(toy_samples, toy_model_config(), SHORT, str(tmp_path))
    model, header = load_model(res.checkpoint)
    assert header["config"]["train"]["epochs"] == 3
    assert evaluate_contact_loss(model, toy_samples) == evaluate_contact_loss(res.model, toy_samples)


def test_load_samples_shapes(toy_samples):
    cfg = toy_model_config()
    assert len(toy_samples) == 8
    batch = collate(toy_samples)
    assert batch["obj_points"].shape == (8, cfg.S_O, 3)
    assert batch["grip_adj"].shape == (8, cfg.S_G, cfg.S_G)
    assert batch["morph_feats"].shape[:2] == (8, cfg.S_M)
    assert batch["gt_maps"].shape == (8, cfg.S_O, cfg.N)
    assert batch["gt_indices"].dtype == torch.int64


def test_load_samples_config_mismatch(toy_root):
    m = Manifest.load(os.path.join(toy_root, "manifest.json"))
    with pytest.raises(ConfigMismatch):
        load_samples(m, Cache(os.path.join(toy_root, "cache")), toy_model_config(S_G=64))
    with pytest.raises(ConfigMismatch):
        load_samples(m, Cache(os.path.join(toy_root, "cache")), toy_model_config(N=5))


def test_predict_is_deterministic_and_valid(toy_dataset, overfit_run):
    assets = toy_dataset.grippers["toy2"].assets
    pts = np.random.default_rng(0).normal(scale=0.03, size=(overfit_run.model.config.S_O, 3))
    a = predict_contacts(overfit_run.model, pts, assets)
    b = predict_contacts(overfit_run.model, pts, assets)
    np.testing.assert_array_equal(a.indices, b.indices)
    assert a.indices.shape == (6,)
    assert np.all((a.indices >= 0) & (a.indices < len(pts)))
    np.testing.assert_array_equal(a.coordinates, pts[a.indices])
    with pytest.raises(ConfigMismatch):
        predict_contacts(overfit_run.model, pts[:-1], assets)


def test_fit_grasp_on_predicted_contacts(toy_dataset, overfit_run):
    assets = toy_dataset.grippers["toy0"].assets
    pts = np.random.default_rng(1).normal(scale=0.03, size=(overfit_run.model.config.S_O, 3))
    contacts = predict_contacts(overfit_run.model, pts, assets)
    fit = fit_grasp(assets, contacts.coordinates, "blob")
    assert np.isfinite(fit.rms)
    fit.grasp.check_limits(assets.tree)
    assert fit.history[-1] <= fit.history[0]


def test_overfit_recovers_training_contacts(overfit_run, toy_samples):
    drop = 1 - overfit_run.step_losses[-1] / overfit_run.step_losses[0]
    assert len(overfit_run.step_losses) == 500
    assert drop >= 0.9
    pred = overfit_run.model.predict(collate(toy_samples))
    gt = np.stack([s.arrays["gt_indices"] for s in toy_samples])
    assert np.all((pred.indices.numpy() == gt).sum(axis=1) >= 5)


def test_overfit_beats_held_out(overfit_run, toy_root):
    m = Manifest.load(os.path.join(toy_root, "manifest.json"))
    cache = Cache(os.path.join(toy_root, "cache"))
    train_s = load_samples(m, cache, toy_model_config(), holdout_grippers=TOY_HOLDOUT)
    test_s = load_samples(m, cache, toy_model_config(), holdout_grippers=("toy0", "toy1"))
    assert evaluate_contact_loss(overfit_run.model, train_s) < evaluate_contact_loss(overfit_run.model, test_s)


def test_adam_state_saved(toy_samples, tmp_path):
    res = train(toy_samples, toy_model_config(), SHORT, str(tmp_path))
    header, tensors = tnn.read_checkpoint(res.checkpoint)
    assert header["step"] == 6  # 3 epochs of 2 batches
    groups = {g for g, _ in tensors}
    assert groups == {"param", "adam_m", "adam_v"}
