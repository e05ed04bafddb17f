import errno
import math
import os

import numpy as np
import oracles
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geossl.dataset import build_pretext_random, build_pretext_separate
from geossl.errors import ConfigurationError, InvalidArgumentError, TrainingAbort
from geossl.models import BackboneSpec, Checkpoint, attach_pretext_head, build_backbone
from geossl.optim import lr_schedule, optimizer_factory, scaled_drop_epochs
from geossl.pretext import (LOG_EPS, PretextTrainConfig, TrainHistory, grouped_pretext_loss, pretext_loss,
                            pretext_loss_from_logits, train_pretext)


def softmax_rows(logits):
    e = np.exp(logits - logits.max(1, keepdims=True))
    return e / e.sum(1, keepdims=True)


# -- loss analytics -------------------------------------------------------------

@pytest.mark.parametrize("K", [2, 4, 8, 10])
def test_uniform_loss_is_ln_k(K):
    probs = np.full((3 * K, K), 1 / K)
    assert abs(pretext_loss(probs, np.tile(np.arange(K), 3), K) - math.log(K)) <= 1e-6


def test_uniform_k4_value():
    assert abs(pretext_loss(np.full((4, 4), 0.25), [0, 1, 2, 3], 4) - 1.3863) < 1e-4


def test_one_hot_loss():
    probs = np.eye(4)
    assert pretext_loss(probs, [0, 1, 2, 3], 4) <= 1e-11


def test_k2_correct_at_0_8():
    probs = np.array([[0.8, 0.2], [0.2, 0.8]])
    assert abs(pretext_loss(probs, [0, 1], 2) - (-math.log(0.8))) < 1e-12
    assert abs(-math.log(0.8) - 0.2231) < 1e-4


def test_zero_probability_is_floored():
    loss = pretext_loss(np.array([[0.0, 1.0]]), [0], 2)
    assert loss == pytest.approx(-math.log(LOG_EPS))
    assert math.isfinite(loss)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 10), st.integers(1, 6), st.data())
def test_grouped_equals_flat_and_oracle(K, n_sources, data):
    logits = data.draw(arrays(np.float64, (n_sources * K, K), elements=st.floats(-8, 8)))
    probs = softmax_rows(logits)
    labels = np.tile(np.arange(K), n_sources)
    sources = np.repeat(np.arange(n_sources), K)
    flat = pretext_loss(probs, labels, K)
    assert flat == pytest.approx(grouped_pretext_loss(probs, labels, sources, K), abs=1e-12)
    assert flat == pytest.approx(oracles.cross_entropy(np.maximum(probs, LOG_EPS), labels), abs=1e-9)
    assert 0 <= flat <= -math.log(LOG_EPS)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_permutation_invariance(K, n, seed):
    rng = np.random.default_rng(seed)
    probs = softmax_rows(rng.normal(size=(n, K)) * 3)
    labels = rng.integers(0, K, n)
    perm = rng.permutation(n)
    assert pretext_loss(probs, labels, K) == pytest.approx(pretext_loss(probs[perm], labels[perm], K), abs=1e-12)


def test_logit_form_matches_probability_form():
    rng = np.random.default_rng(0)
    logits = torch.tensor(rng.normal(size=(12, 4)) * 4)
    labels = torch.tensor(rng.integers(0, 4, 12))
    a = pretext_loss_from_logits(logits, labels).item()
    b = pretext_loss(torch.softmax(logits, 1), labels, 4).item()
    assert a == pytest.approx(b, abs=1e-10)


def test_grouped_loss_rejects_incomplete_groups():
    probs = np.full((3, 2), 0.5)
    with pytest.raises(InvalidArgumentError):
        grouped_pretext_loss(probs, [0, 1, 0], [0, 0, 1], 2)


def test_loss_shape_checks():
    with pytest.raises(InvalidArgumentError):
        pretext_loss(np.full((2, 4), 0.25), [0, 1], 2)
    with pytest.raises(InvalidArgumentError):
        pretext_loss(np.full((2, 4), 0.25), [0], 4)


def tiny_model(seed=0):
    torch.manual_seed(seed)
    return attach_pretext_head(build_backbone(BackboneSpec("vgg16", 2, 0.0625), seed), 4, seed=1).double().train()


def test_gradient_matches_finite_differences():
    model = tiny_model()
    params = list(model.parameters())
    assert sum(p.numel() for p in params) <= 10_000
    x = torch.randn(8, 3, 32, 32, dtype=torch.float64)
    y = torch.arange(8) % 4

    def loss():
        return pretext_loss(torch.softmax(model(x), 1), y, 4)

    assert oracles.finite_difference_check(loss, params, 100, np.random.default_rng(0)) <= 1e-4


class _WrongGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, g):
        return g * 1.01


def test_finite_difference_oracle_catches_wrong_gradient():
    model = tiny_model()
    params = list(model.parameters())
    x = torch.randn(8, 3, 32, 32, dtype=torch.float64)
    y = torch.arange(8) % 4

    def loss():
        return pretext_loss(torch.softmax(_WrongGrad.apply(model(x)), 1), y, 4)

    assert oracles.finite_difference_check(loss, params, 20, np.random.default_rng(0)) > 1e-4


# -- learning-rate schedule -------------------------------------------------------

def test_lr_values_exact():
    epochs = [0, 29, 30, 59, 60, 79, 80, 99]
    assert [lr_schedule(e) for e in epochs] == [1e-3, 1e-3, 2e-4, 2e-4, 4e-5, 4e-5, 8e-6, 8e-6]
    assert lr_schedule(85) == 8e-6


@given(st.integers(0, 98))
def test_lr_non_increasing(e):
    assert lr_schedule(e + 1) <= lr_schedule(e)


@pytest.mark.parametrize("epoch", [-1, 100, 150])
def test_lr_range(epoch):
    with pytest.raises(InvalidArgumentError):
        lr_schedule(epoch)


def test_scaled_drops():
    assert scaled_drop_epochs(100) == (30, 60, 80)
    assert scaled_drop_epochs(50) == (15, 30, 40)
    assert scaled_drop_epochs(10) == (3, 6, 8)
    assert scaled_drop_epochs(2) == (1,)


def test_optimizer_factory():
    p = [torch.nn.Parameter(torch.zeros(3))]
    rms = optimizer_factory("rmsprop", p, 1e-3)
    assert isinstance(rms, torch.optim.RMSprop) and rms.defaults["alpha"] == 0.9
    assert optimizer_factory("sgd", p, 0.1).defaults["momentum"] == 0.9
    with pytest.raises(InvalidArgumentError):
        optimizer_factory("lbfgs", p, 0.1)


# -- config -----------------------------------------------------------------------

def test_config_defaults():
    cfg = PretextTrainConfig()
    assert (cfg.batch_size, cfg.optimizer, cfg.base_lr, cfg.rho, cfg.epochs) == (128, "rmsprop", 1e-3, 0.9, 100)
    assert cfg.lr_drop_epochs == (30, 60, 80) and cfg.lr_drop_factor == 5 and cfg.weight_decay == 0
    assert [cfg.lr_at(e) for e in (0, 30, 60, 80)] == [1e-3, 2e-4, 4e-5, 8e-6]


@pytest.mark.parametrize("kwargs", [dict(lr_drop_epochs=(60, 30)), dict(lr_drop_epochs=(30, 100)),
                                    dict(epochs=0), dict(transform_set="rot3"), dict(arch="vgg16", num_blocks=9)])
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        PretextTrainConfig(**kwargs)


def test_config_hash_ignores_device():
    assert PretextTrainConfig(device="cpu").config_hash() == PretextTrainConfig(device=None).config_hash()
    assert PretextTrainConfig(seed=1).config_hash() != PretextTrainConfig(seed=2).config_hash()


# -- training ---------------------------------------------------------------------

def small_config(**kw):
    base = dict(transform_set="rot4", arch="vgg16", num_blocks=2, width_multiplier=0.125, batch_size=32,
                epochs=3, seed=0)
    base.update(kw)
    return PretextTrainConfig(**base)


@pytest.mark.parametrize("name", ["rot2", "rot4", "rot8"])
def test_first_batch_loss_near_ln_k(natural_images, name):
    images = np.concatenate([natural_images.images] * 2)[:64]
    ds = build_pretext_separate(images, name)
    K = ds.K
    # one batch per epoch, so the epoch loss is the first-batch loss
    cfg = small_config(transform_set=name, batch_size=len(ds), epochs=1, width_multiplier=0.25)
    _, hist = train_pretext(cfg, ds)
    assert abs(hist[0].loss - math.log(K)) <= 0.15 * math.log(K)


def test_history_and_checkpoint_contents(natural_images, tmp_path):
    ds = build_pretext_separate(natural_images, "rot4")
    cfg = small_config(checkpoint_every=2)
    ckpt, hist = train_pretext(cfg, ds, out_dir=tmp_path, held_out=build_pretext_separate(natural_images[:8], "rot4"))
    assert [r.epoch for r in hist] == [0, 1, 2]
    assert [r.lr for r in hist] == [cfg.lr_at(e) for e in range(3)]
    assert all(0 <= r.acc <= 1 and 0 <= r.held_out_acc <= 1 for r in hist)
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["epoch_002.tssl", "epoch_003.tssl"]
    assert (tmp_path / "checkpoint.tssl").read_bytes() == ckpt.to_bytes()
    back = TrainHistory.read_csv(tmp_path / "history.csv")
    assert back.column("loss") == hist.column("loss")
    assert (tmp_path / "history.csv").read_text().splitlines()[0] == "epoch,loss,acc,lr,seconds,held_out_acc"
    assert ckpt.provenance["transform_set"] == "rot4" and ckpt.provenance["epochs"] == 3
    assert ckpt.provenance["config_hash"] == cfg.config_hash()


def test_deterministic_history(natural_images):
    ds = build_pretext_separate(natural_images, "rot2")
    a_ck, a = train_pretext(small_config(transform_set="rot2"), ds)
    b_ck, b = train_pretext(small_config(transform_set="rot2"), ds)
    assert a.column("loss") == b.column("loss") and a.column("acc") == b.column("acc")
    assert a_ck.to_bytes() == b_ck.to_bytes()


def test_random_method_dataset_trains(natural_images):
    ds = build_pretext_random(natural_images, "affine5", 2, seed=0)
    _, hist = train_pretext(small_config(transform_set="affine5", epochs=1, batch_size=20), ds)
    assert len(hist) == 1 and math.isfinite(hist[0].loss)


class _Interrupt(Exception):
    pass


def test_resume_matches_uninterrupted_run(natural_images, tmp_path):
    ds = build_pretext_separate(natural_images, "rot4")
    cfg = small_config(epochs=4, checkpoint_every=2)
    full_ck, full = train_pretext(cfg, ds, out_dir=tmp_path / "full")

    def stop_at_epoch_2(rec):
        if rec.epoch == 2:
            raise _Interrupt

    with pytest.raises(_Interrupt):
        train_pretext(cfg, ds, out_dir=tmp_path / "cut", progress=stop_at_epoch_2)
    assert (tmp_path / "cut" / "resume.pt").exists()
    assert not (tmp_path / "cut" / "checkpoint.tssl").exists()
    seen = []
    ck, hist = train_pretext(cfg, ds, out_dir=tmp_path / "cut", progress=seen.append)
    assert [r.epoch for r in seen] == [2, 3]
    assert hist.column("loss") == full.column("loss")
    assert ck.backbone_digest() == full_ck.backbone_digest()


def test_resume_refuses_other_config(natural_images, tmp_path):
    ds = build_pretext_separate(natural_images, "rot4")
    train_pretext(small_config(epochs=2, checkpoint_every=1), ds, out_dir=tmp_path)
    with pytest.raises(ConfigurationError):
        train_pretext(small_config(epochs=2, checkpoint_every=1, seed=5), ds, out_dir=tmp_path)


def test_non_finite_loss_aborts_with_diagnostics(natural_images):
    ds = build_pretext_separate(natural_images, "rot4")
    zero_std = (np.zeros(3, np.float32), np.zeros(3, np.float32))
    with pytest.raises(TrainingAbort) as exc:
        train_pretext(small_config(), ds, norm=zero_std)
    assert exc.value.diagnostics == {"epoch": 0, "batch": 0, "lr": 1e-3}
    assert exc.value.exit_code == 4


def test_disk_full_during_checkpoint_cleans_up(natural_images, tmp_path, monkeypatch):
    import geossl.io_utils as io_utils

    def no_space(fd):
        raise OSError(errno.ENOSPC, os.strerror(errno.ENOSPC))

    monkeypatch.setattr(io_utils.os, "fsync", no_space)
    ds = build_pretext_separate(natural_images, "rot4")
    with pytest.raises(TrainingAbort, match="No space"):
        train_pretext(small_config(epochs=1), ds, out_dir=tmp_path)
    leftovers = [p for p in tmp_path.rglob("*") if p.is_file()]
    assert leftovers == []


def test_dataset_and_config_must_agree(natural_images):
    ds = build_pretext_separate(natural_images, "rot2")
    with pytest.raises(ConfigurationError):
        train_pretext(small_config(transform_set="rot4"), ds)
    with pytest.raises(ConfigurationError):
        train_pretext(small_config(transform_set="rot2", batch_size=33), ds)


def test_trained_checkpoint_loads(natural_images, tmp_path):
    ds = build_pretext_separate(natural_images, "rot2")
    ck, _ = train_pretext(small_config(transform_set="rot2", epochs=1), ds, out_dir=tmp_path)
    loaded = Checkpoint.load(tmp_path / "checkpoint.tssl")
    assert loaded.backbone_digest() == ck.backbone_digest()
