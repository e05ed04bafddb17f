import logging
import os

import torch

log = logging.getLogger(__name__)

DEVICE_ENV = "GEOSSL_DEVICE"


def resolve_device(requested=None):
    """Pick the compute device: argument, then ``$GEOSSL_DEVICE``, then CPU."""
    name = requested or os.environ.get(DEVICE_ENV) or "cpu"
    if name.startswith("cuda") and not torch.cuda.is_available():
        log.warning("device %s requested but CUDA is unavailable; using cpu", name)
        return torch.device("cpu")
    if name == "mps" and not torch.backends.mps.is_available():
        log.warning("device mps requested but unavailable; using cpu")
        return torch.device("cpu")
    return torch.device(name)
