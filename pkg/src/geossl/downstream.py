"""Supervised CIFAR-10 recognition on top of pretext-trained backbones.

A probe head (two 200-unit hidden layers with BN and ReLU) is trained on the
pooled features of a backbone that is either frozen ("feature extracting")
or retrained jointly ("fine tuning").
"""

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .dataset import CifarSplit, normalization_stats
from .device import resolve_device
from .errors import ConfigurationError, InvalidArgumentError, TrainingAbort
from .geometry import affine_warp
from .io_utils import atomic_write_text, read_json, write_json
from .models import (
    BackboneSpec,
    Checkpoint,
    attach_probe_head,
    build_backbone,
    images_to_tensor,
    set_backbone_trainable,
)
from .optim import OPTIMIZERS, lr_schedule, optimizer_factory, scaled_drop_epochs, set_lr
from .pretext import deterministic_mode

log = logging.getLogger(__name__)

MODES = ("frozen", "unfrozen")
AUGMENTATION_LEVELS = ("none", "weak", "strong")
MODE_TERMS = {"frozen": "feature extracting", "unfrozen": "fine tuning"}


# -- augmentation ---------------------------------------------------------------

@dataclass(frozen=True)
class RandomOperator:
    """A stochastic image operator with one scalar parameter in ``[low, high]``.

    ``kind`` is one of zoom, shift_x, shift_y, flip, rotate, brightness.
    For flip the parameter is the flip probability and the sample is 0/1.
    """

    kind: str
    low: float
    high: float

    def sample(self, n, rng):
        if self.kind == "flip":
            return (rng.random(n) < self.high).astype(np.float64)
        if self.kind == "brightness":
            # open interval: both ends excluded
            out = rng.uniform(self.low, self.high, n)
            return np.where(out <= self.low, np.nextafter(self.low, self.high), out)
        return rng.uniform(self.low, self.high, n)

    def identity_value(self):
        return {"zoom": 1.0, "brightness": 1.0}.get(self.kind, 0.0)


@dataclass(frozen=True)
class AugmentationPolicy:
    """Ordered random operators applied to training images only.

    Geometric operators (zoom, shifts, rotation) are composed into one
    affine map per image and resampled once; flip and brightness follow.
    """

    level: str
    operators: tuple = ()
    counter: dict = field(default_factory=lambda: {"calls": 0}, compare=False, repr=False)

    @property
    def is_identity(self):
        return not self.operators

    def sample_params(self, n, rng):
        return {op.kind: op.sample(n, rng) for op in self.operators}

    def apply_params(self, images, params):
        """Deterministically apply previously sampled ``params`` to ``images``."""
        self.counter["calls"] += 1
        images = np.asarray(images)
        if self.is_identity:
            return images.copy()
        n, h, w = images.shape[:3]
        ones = np.ones(n)
        zoom = params.get("zoom", ones)
        theta = np.deg2rad(params.get("rotate", np.zeros(n)))
        dx = params.get("shift_x", np.zeros(n))
        dy = params.get("shift_y", np.zeros(n))
        # inverse map: source offset = zoom * R(theta) @ (output offset - shift)
        cos, sin = np.cos(theta), np.sin(theta)
        inv = np.zeros((n, 2, 3))
        inv[:, 0, 0] = zoom * cos
        inv[:, 0, 1] = zoom * sin
        inv[:, 1, 0] = -zoom * sin
        inv[:, 1, 1] = zoom * cos
        inv[:, 0, 2] = -(inv[:, 0, 0] * dy + inv[:, 0, 1] * dx)
        inv[:, 1, 2] = -(inv[:, 1, 0] * dy + inv[:, 1, 1] * dx)
        out = affine_warp(images, inv)
        flip = params.get("flip")
        if flip is not None:
            sel = flip > 0.5
            out[sel] = out[sel, :, ::-1]
        bright = params.get("brightness")
        if bright is not None:
            scaled = out.astype(np.float64) * bright[:, None, None, None]
            out = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
        return out

    def __call__(self, images, rng):
        return self.apply_params(images, self.sample_params(len(images), rng))


def augmentation_policy(level, height=32):
    """Build the ``none`` / ``weak`` / ``strong`` training-time policy.

    weak: zoom in (0.5, 1), width shift within +-2 px, height shift up to
    0.1 of the height, horizontal flip with p=0.5. strong adds rotation within
    +-45 degrees and a brightness factor in (0.5, 1).
    """
    if level == "none":
        return AugmentationPolicy("none")
    weak = (
        RandomOperator("zoom", 0.5, 1.0),
        RandomOperator("shift_x", -2.0, 2.0),
        RandomOperator("shift_y", -0.1 * height, 0.1 * height),
        RandomOperator("flip", 0.0, 0.5),
    )
    if level == "weak":
        return AugmentationPolicy("weak", weak)
    if level == "strong":
        return AugmentationPolicy("strong", weak + (RandomOperator("rotate", -45.0, 45.0),
                                                    RandomOperator("brightness", 0.5, 1.0)))
    raise InvalidArgumentError(f"unknown augmentation level {level!r}; choose from {', '.join(AUGMENTATION_LEVELS)}")


# -- configuration and results ---------------------------------------------------

@dataclass
class DownstreamConfig:
    """One downstream run.

    ``checkpoint=None`` means the random-init baseline, whose backbone is
    described by ``arch``/``num_blocks``/``width_multiplier`` (default
    vgg16-2 at full width). With a checkpoint those fields may be left unset;
    if set they must match it.
    """

    checkpoint: str = None
    mode: str = "frozen"
    augmentation: str = "none"
    optimizer: str = "rmsprop"
    epochs: int = 50
    batch_size: int = 128
    base_lr: float = 1e-3
    lr_drop_epochs: tuple = None
    lr_drop_factor: float = 5
    weight_decay: float = 0.0
    arch: str = None
    num_blocks: int = None
    width_multiplier: float = None
    seed: int = 0
    deterministic: bool = True
    device: str = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.augmentation not in AUGMENTATION_LEVELS:
            raise ConfigurationError(f"augmentation must be one of {AUGMENTATION_LEVELS}, got {self.augmentation!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_drop_epochs is None:
            self.lr_drop_epochs = scaled_drop_epochs(self.epochs)
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)

    def lr_at(self, epoch):
        return lr_schedule(epoch, self.base_lr, self.lr_drop_epochs, self.lr_drop_factor, self.epochs)

    def to_dict(self):
        d = asdict(self)
        d["lr_drop_epochs"] = list(self.lr_drop_epochs)
        if d["checkpoint"] is not None:
            d["checkpoint"] = str(d["checkpoint"])
        return d

    def config_hash(self):
        d = {k: v for k, v in self.to_dict().items() if k != "device"}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass
class RunResult:
    config: dict
    train_acc: list
    test_acc: list
    train_loss: list
    final_test_acc: float
    config_hash: str = ""
    provenance: dict = field(default_factory=dict)
    backbone_digest_before: str = ""
    backbone_digest_after: str = ""
    seconds: float = 0.0
    model: object = field(default=None, repr=False, compare=False)

    def summary(self):
        d = asdict(self)
        d.pop("model")
        for k in ("train_acc", "test_acc", "train_loss"):
            d.pop(k)
        return d

    def curves_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "train_acc", "test_acc"])
        for i, row in enumerate(zip(self.train_loss, self.train_acc, self.test_acc)):
            writer.writerow([i, *(repr(float(v)) for v in row)])
        return buf.getvalue()

    def write(self, out_dir):
        """Write ``curves.csv`` then ``result.json`` (the completion marker)."""
        out_dir = Path(out_dir)
        atomic_write_text(out_dir / "curves.csv", self.curves_csv())
        write_json(out_dir / "result.json", self.summary())
        return out_dir / "result.json"

    @classmethod
    def read(cls, path):
        """Load from a ``result.json`` path (curves come from the sibling CSV)."""
        path = Path(path)
        summary = read_json(path)
        curves = {"train_loss": [], "train_acc": [], "test_acc": []}
        csv_path = path.with_name("curves.csv")
        if csv_path.exists():
            with open(csv_path, newline="") as fh:
                for row in csv.DictReader(fh):
                    for k in curves:
                        curves[k].append(float(row[k]))
        return cls(**summary, **curves)


# -- evaluation ------------------------------------------------------------------

def _labels_of(test):
    if isinstance(test, CifarSplit):
        return test.images, test.labels
    images = np.stack([t.image for t in test])
    return images, np.asarray([t.class_label for t in test])


@torch.no_grad()
def predict_labels(model, images, norm_mean, norm_std, batch_size=500, device="cpu"):
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        x = images_to_tensor(images[start:start + batch_size], norm_mean, norm_std, device)
        out.append(model(x).argmax(1).cpu().numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model, test, norm=None, batch_size=500, device="cpu"):
    """Top-1 accuracy on ``test`` without any augmentation.

    ``model`` is a torch module producing class logits (``norm`` gives the
    input normalisation) or any callable mapping a uint8 image batch to
    predicted labels.
    """
    images, labels = _labels_of(test)
    if len(labels) == 0:
        raise InvalidArgumentError("cannot evaluate on an empty test set")
    if isinstance(model, nn.Module):
        if norm is None:
            raise InvalidArgumentError("torch models need normalisation stats")
        pred = predict_labels(model, images, norm[0], norm[1], batch_size, device)
    else:
        pred = np.asarray(model(images))
    return float(np.mean(pred == labels))


# -- training --------------------------------------------------------------------

def _prepare_model(config, train, checkpoint):
    if checkpoint is None and config.checkpoint is not None:
        checkpoint = Checkpoint.load(config.checkpoint)
    if checkpoint is not None:
        have = checkpoint.spec
        for name in ("arch", "num_blocks", "width_multiplier"):
            want = getattr(config, name)
            if want is not None and want != getattr(have, name):
                raise ConfigurationError(f"config asks for {name}={want!r} but checkpoint holds {getattr(have, name)!r}")
        backbone = checkpoint.build_backbone()
        norm = (checkpoint.norm_mean, checkpoint.norm_std)
        provenance = dict(checkpoint.provenance)
    else:
        spec = BackboneSpec(config.arch or "vgg16", int(config.num_blocks or 2),
                            float(config.width_multiplier or 1.0))
        backbone = build_backbone(spec, init_seed=config.seed)
        norm = normalization_stats(train.images)
        provenance = {"transform_set": "random-init"}
        checkpoint = Checkpoint.from_model(backbone, *norm, provenance)
    model = attach_probe_head(backbone, 10, seed=config.seed + 2)
    set_backbone_trainable(model, config.mode == "unfrozen")
    return model, checkpoint, norm, provenance


def _feature_table(backbone, images, norm, device, batch_size=500):
    backbone.eval()
    feats = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = images_to_tensor(images[start:start + batch_size], norm[0], norm[1], device)
            feats.append(backbone(x))
    return torch.cat(feats)


def train_downstream(config, train, test, checkpoint=None, eval_every=1, progress=None):
    """Train the probe (and, unfrozen, the backbone) and report test accuracy.

    ``checkpoint`` overrides ``config.checkpoint`` with an in-memory
    :class:`Checkpoint`. Returns a :class:`RunResult` whose ``model``
    attribute holds the trained network.
    """
    if not isinstance(train, CifarSplit) or not isinstance(test, CifarSplit):
        raise ConfigurationError("train_downstream needs CifarSplit train/test data")
    device = resolve_device(config.device)
    model, checkpoint, norm, provenance = _prepare_model(config, train, checkpoint)
    digest_before = checkpoint.backbone_digest()
    model.to(device)
    policy = augmentation_policy(config.augmentation)
    optimizer = optimizer_factory(config.optimizer, model.parameters(), config.base_lr,
                                  weight_decay=config.weight_decay)
    frozen = config.mode == "frozen"
    # A frozen backbone in eval mode is a fixed function; without augmentation
    # its features can be computed once instead of every epoch.
    cached = frozen and policy.is_identity
    if cached:
        train_feats = _feature_table(model.backbone, train.images, norm, device)
        test_feats = _feature_table(model.backbone, test.images, norm, device)
    labels = torch.from_numpy(train.labels).to(device)
    aug_rng = np.random.default_rng([config.seed, 31])
    train_acc, test_acc, train_loss = [], [], []
    t_start = time.perf_counter()

    with deterministic_mode(config.deterministic):
        torch.manual_seed(config.seed)
        for epoch in range(config.epochs):
            lr = config.lr_at(epoch)
            set_lr(optimizer, lr)
            model.train()
            order = np.random.default_rng([config.seed, 17, epoch]).permutation(len(train))
            loss_sum = correct = 0
            for b, start in enumerate(range(0, len(order), config.batch_size)):
                idx = order[start:start + config.batch_size]
                if len(idx) < 2:  # BatchNorm1d needs two rows in training mode
                    continue
                y = labels[idx]
                if cached:
                    logits = model.head(train_feats[idx])
                else:
                    imgs = train.images[idx]
                    if not policy.is_identity:
                        imgs = policy(imgs, aug_rng)
                    logits = model(images_to_tensor(imgs, norm[0], norm[1], device))
                loss = F.cross_entropy(logits, y)
                if not torch.isfinite(loss):
                    raise TrainingAbort("non-finite downstream loss", epoch=epoch, batch=b, lr=lr)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                loss_sum += loss.item() * len(idx)
                correct += int((logits.argmax(1) == y).sum())
            train_loss.append(loss_sum / len(order))
            train_acc.append(correct / len(order))
            if (epoch + 1) % eval_every == 0 or epoch + 1 == config.epochs:
                if cached:
                    model.eval()
                    with torch.no_grad():
                        pred = model.head(test_feats).argmax(1).cpu().numpy()
                    acc = float(np.mean(pred == test.labels))
                else:
                    acc = evaluate(model, test, norm, device=device)
            else:
                acc = math.nan
            test_acc.append(acc)
            log.info("downstream %s epoch %d: loss %.4f train %.4f test %.4f lr %g",
                     config.mode, epoch, train_loss[-1], train_acc[-1], acc, lr)
            if progress is not None:
                progress(epoch, train_loss[-1], train_acc[-1], acc)

    model.cpu().eval()
    digest_after = checkpoint.with_backbone(model.backbone).backbone_digest()
    return RunResult(
        config=config.to_dict(), train_acc=train_acc, test_acc=test_acc, train_loss=train_loss,
        final_test_acc=test_acc[-1], config_hash=config.config_hash(), provenance=provenance,
        backbone_digest_before=digest_before, backbone_digest_after=digest_after,
        seconds=time.perf_counter() - t_start, model=model,
    )
