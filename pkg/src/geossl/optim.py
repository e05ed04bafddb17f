"""Learning-rate schedule and optimizer construction shared by both trainers."""

import torch

from .errors import InvalidArgumentError

OPTIMIZERS = ("sgd", "rmsprop", "adam")
# Drop points as fractions of the run: 30/60/80 of 100 epochs.
DROP_FRACTIONS = (0.3, 0.6, 0.8)


def scaled_drop_epochs(epochs):
    """Drop epochs for a run of ``epochs`` (100 -> 30, 60, 80; 50 -> 15, 30, 40)."""
    drops = sorted({int(round(f * epochs)) for f in DROP_FRACTIONS})
    return tuple(d for d in drops if 0 < d < epochs)


def lr_schedule(epoch, base_lr=1e-3, drop_epochs=(30, 60, 80), factor=5, total_epochs=100):
    """Piecewise-constant rate: divide ``base_lr`` by ``factor`` at each drop epoch.

    A drop listed at epoch 30 takes effect from 0-based epoch 30 onward.
    """
    if not 0 <= epoch < total_epochs:
        raise InvalidArgumentError(f"epoch {epoch} outside [0, {total_epochs})")
    drops = sum(1 for d in drop_epochs if epoch >= d)
    return base_lr / factor ** drops


def optimizer_factory(kind, params, lr, weight_decay=0.0, rho=0.9, momentum=0.9):
    """Build SGD (momentum 0.9), RMSprop (rho 0.9) or Adam (default betas)."""
    if not lr > 0:
        raise InvalidArgumentError(f"learning rate must be positive, got {lr}")
    params = [p for p in params if p.requires_grad]
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    if kind == "rmsprop":
        return torch.optim.RMSprop(params, lr=lr, alpha=rho, eps=1e-7, weight_decay=weight_decay)
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    raise InvalidArgumentError(f"unknown optimizer {kind!r}; choose from {', '.join(OPTIMIZERS)}")


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr
