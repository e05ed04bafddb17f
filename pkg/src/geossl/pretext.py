"""Self-supervised training on transform-prediction pretext tasks.

The objective averages, over source images, the mean negative log
probability the network assigns to each of the K transformed copies of the
image. When all K copies share a batch this equals plain mean cross-entropy
over the batch's samples, which is the form the trainer computes.
"""

import csv
import hashlib
import io
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .dataset import PretextDataset, normalization_stats, pretext_batches
from .device import resolve_device
from .errors import ConfigurationError, InvalidArgumentError, TrainingAbort
from .geometry import TRANSFORM_SET_NAMES
from .io_utils import atomic_write_bytes, atomic_write_text
from .models import (
    BackboneSpec,
    Checkpoint,
    attach_pretext_head,
    build_backbone,
    images_to_tensor,
)
from .optim import lr_schedule, optimizer_factory, scaled_drop_epochs, set_lr

log = logging.getLogger(__name__)

LOG_EPS = 1e-12


def pretext_loss(probs, labels, K=None, eps=LOG_EPS):
    """Mean of ``-log(max(p_true, eps))`` over the batch.

    ``probs`` is ``(batch, K)`` and rows sum to one. Accepts torch tensors
    (differentiable) or numpy arrays (returns a float).
    """
    as_numpy = not torch.is_tensor(probs)
    p = torch.as_tensor(probs, dtype=torch.float64) if as_numpy else probs
    y = torch.as_tensor(labels, dtype=torch.long, device=p.device)
    if p.ndim != 2 or p.shape[0] != y.shape[0]:
        raise InvalidArgumentError(f"probs {tuple(p.shape)} and labels {tuple(y.shape)} disagree")
    if K is not None and p.shape[1] != K:
        raise InvalidArgumentError(f"probs have {p.shape[1]} columns, expected K={K}")
    picked = p.gather(1, y[:, None]).squeeze(1)
    loss = -torch.log(torch.clamp(picked, min=eps)).mean()
    return float(loss) if as_numpy else loss


def grouped_pretext_loss(probs, labels, source_index, K, eps=LOG_EPS):
    """Per-source form: ``-(1/K) sum_y log F^y`` per image, averaged over images.

    Every source in the batch must contribute exactly its K copies.
    """
    p = torch.as_tensor(probs, dtype=torch.float64)
    y = torch.as_tensor(labels, dtype=torch.long)
    src = np.asarray(source_index)
    per_image = []
    for s in np.unique(src):
        rows = np.flatnonzero(src == s)
        if rows.size != K or sorted(y[rows].tolist()) != list(range(K)):
            raise InvalidArgumentError(f"source {s} does not have exactly one copy per transform")
        picked = p[rows, y[rows]]
        per_image.append(-torch.log(torch.clamp(picked, min=eps)).sum() / K)
    return float(torch.stack(per_image).mean())


def pretext_loss_from_logits(logits, labels, eps=LOG_EPS):
    """Same value as :func:`pretext_loss` on ``softmax(logits)``, computed stably."""
    logp = torch.clamp(F.log_softmax(logits, dim=1), min=math.log(eps))
    return F.nll_loss(logp, labels)


@dataclass
class PretextTrainConfig:
    transform_set: str = "rot4"
    arch: str = "vgg16"
    num_blocks: int = 2
    width_multiplier: float = 1.0
    batch_size: int = 128
    optimizer: str = "rmsprop"
    base_lr: float = 1e-3
    rho: float = 0.9
    lr_drop_epochs: tuple = None
    lr_drop_factor: float = 5
    epochs: int = 100
    weight_decay: float = 0.0
    grouped: bool = True
    checkpoint_every: int = 10
    seed: int = 0
    deterministic: bool = True
    device: str = None

    def __post_init__(self):
        if self.lr_drop_epochs is None:
            self.lr_drop_epochs = scaled_drop_epochs(self.epochs)
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)
        drops = self.lr_drop_epochs
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if any(b <= a for a, b in zip(drops, drops[1:])) or any(d >= self.epochs or d < 1 for d in drops):
            raise ConfigurationError(f"lr_drop_epochs {drops} must be strictly increasing within (0, {self.epochs})")
        if self.transform_set not in TRANSFORM_SET_NAMES:
            raise ConfigurationError(f"unknown transform set {self.transform_set!r}")
        self.backbone_spec()  # validates arch/num_blocks

    def backbone_spec(self):
        return BackboneSpec(self.arch, int(self.num_blocks), float(self.width_multiplier))

    def lr_at(self, epoch):
        return lr_schedule(epoch, self.base_lr, self.lr_drop_epochs, self.lr_drop_factor, self.epochs)

    def to_dict(self):
        d = asdict(self)
        d["lr_drop_epochs"] = list(self.lr_drop_epochs)
        return d

    def config_hash(self):
        # device and checkpoint cadence do not change the result
        d = {k: v for k, v in self.to_dict().items() if k not in ("device", "checkpoint_every")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    acc: float
    lr: float
    seconds: float
    held_out_acc: float = float("nan")


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def append(self, rec):
        self.records.append(rec)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def to_csv(self):
        cols = ["epoch", "loss", "acc", "lr", "seconds", "held_out_acc"]
        lines = [",".join(cols)]
        for r in self.records:
            lines.append(",".join(repr(getattr(r, c)) if c != "epoch" else str(r.epoch) for c in cols))
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        atomic_write_text(path, self.to_csv())

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            return cls.from_csv_text(fh.read())

    @classmethod
    def from_csv_text(cls, text):
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([EpochRecord(int(r["epoch"]), float(r["loss"]), float(r["acc"]), float(r["lr"]),
                                float(r["seconds"]), float(r.get("held_out_acc") or "nan")) for r in rows])


@contextmanager
def deterministic_mode(enabled=True):
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled, warn_only=True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev, warn_only=True)


def _epoch_seed(seed, epoch):
    return [int(seed), 7919, int(epoch)]


@torch.no_grad()
def pretext_accuracy(model, data, norm_mean, norm_std, batch_size=512, device="cpu"):
    """Fraction of samples in ``data`` whose transform label is predicted."""
    model.eval()
    correct = 0
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        x = images_to_tensor(data.images(idx), norm_mean, norm_std, device)
        pred = model(x).argmax(1).cpu().numpy()
        correct += int((pred == data.transform_label[idx]).sum())
    return correct / len(data)


def train_pretext(config, data, out_dir=None, held_out=None, norm=None, resume=True, progress=None):
    """Train a backbone plus K-way head on ``data``.

    Returns ``(checkpoint, history)``. With ``out_dir`` set, intermediate
    checkpoints land in ``out_dir/checkpoints`` every ``config.checkpoint_every``
    epochs together with a resume file, and a rerun picks up from the last
    of them. ``held_out`` (a pretext dataset built from images not used for
    training) adds a held-out accuracy column to the history.
    """
    if not isinstance(data, PretextDataset):
        raise ConfigurationError("train_pretext needs a PretextDataset")
    if data.tset.name != config.transform_set:
        raise ConfigurationError(f"dataset uses {data.tset.name}, config asks for {config.transform_set}")
    grouped = config.grouped and data.method == "separate"
    if grouped and config.batch_size % data.K:
        raise ConfigurationError(f"batch_size {config.batch_size} not divisible by K={data.K}")

    device = resolve_device(config.device)
    norm_mean, norm_std = norm if norm is not None else normalization_stats(data.source_images)
    spec = config.backbone_spec()
    model = attach_pretext_head(build_backbone(spec, config.seed), data.K, seed=config.seed + 1).to(device)
    optimizer = optimizer_factory(config.optimizer, model.parameters(), config.base_lr,
                                  weight_decay=config.weight_decay, rho=config.rho)
    history = TrainHistory()
    start_epoch = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    cfg_hash = config.config_hash()
    if out_dir is not None and resume:
        start_epoch = _try_resume(out_dir, cfg_hash, model, optimizer, history)

    def provenance(epoch):
        return {"transform_set": data.tset.name, "K": data.K, "method": data.method,
                "epochs": epoch, "seed": config.seed, "config_hash": cfg_hash,
                "n_sources": int(data.n_sources)}

    with deterministic_mode(config.deterministic):
        torch.manual_seed(config.seed)
        for epoch in range(start_epoch, config.epochs):
            lr = config.lr_at(epoch)
            set_lr(optimizer, lr)
            model.train()
            t0 = time.perf_counter()
            loss_sum = correct = seen = 0
            batches = pretext_batches(data, config.batch_size, _epoch_seed(config.seed, epoch), grouped=grouped)
            for b, batch in enumerate(batches):
                x = images_to_tensor(batch.images, norm_mean, norm_std, device)
                y = torch.from_numpy(batch.labels).to(device)
                logits = model(x)
                loss = pretext_loss_from_logits(logits, y)
                if not torch.isfinite(loss):
                    raise TrainingAbort("non-finite pretext loss", epoch=epoch, batch=b, lr=lr)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                n = y.shape[0]
                loss_sum += loss.item() * n
                correct += int((logits.argmax(1) == y).sum())
                seen += n
            rec = EpochRecord(epoch, loss_sum / seen, correct / seen, lr, time.perf_counter() - t0)
            if held_out is not None:
                rec.held_out_acc = pretext_accuracy(model, held_out, norm_mean, norm_std, device=device)
            history.append(rec)
            log.info("pretext epoch %d: loss %.4f acc %.4f lr %g held-out %.4f",
                     epoch, rec.loss, rec.acc, lr, rec.held_out_acc)
            if progress is not None:
                progress(rec)
            done = epoch + 1
            if out_dir is not None and (done % config.checkpoint_every == 0 or done == config.epochs):
                ckpt = Checkpoint.from_model(model.cpu(), norm_mean, norm_std, provenance(done))
                model.to(device)
                ckpt.save(out_dir / "checkpoints" / f"epoch_{done:03d}.tssl")
                _write_resume(out_dir, cfg_hash, done, model, optimizer, history)

    model.cpu().eval()
    ckpt = Checkpoint.from_model(model, norm_mean, norm_std, provenance(config.epochs))
    if out_dir is not None:
        ckpt.save(out_dir / "checkpoint.tssl")
        history.write_csv(out_dir / "history.csv")
    return ckpt, history


def _write_resume(out_dir, cfg_hash, epoch, model, optimizer, history):
    buf = io.BytesIO()
    torch.save({"config_hash": cfg_hash, "epoch": epoch, "model": model.state_dict(),
                "optimizer": optimizer.state_dict(), "history": history.to_csv()}, buf)
    atomic_write_bytes(out_dir / "resume.pt", buf.getvalue())


def _try_resume(out_dir, cfg_hash, model, optimizer, history):
    path = out_dir / "resume.pt"
    if not path.exists():
        return 0
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state["config_hash"] != cfg_hash:
        raise ConfigurationError(f"{path} belongs to a different configuration; refusing to resume")
    model.load_state_dict(state["model"])
    optimizer.load_state_dict(state["optimizer"])
    history.records.extend(TrainHistory.from_csv_text(state["history"]).records)
    log.info("resuming pretext training from epoch %d", state["epoch"])
    return int(state["epoch"])
