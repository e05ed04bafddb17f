"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .errors import InvalidArgumentError

IMAGE_SHAPE = (32, 32, 3)


def check_image(img, *, name="img"):
    """Validate a single H x W x C uint8 image and return it as an ndarray."""
    arr = np.asarray(img)
    if arr.ndim != 3:
        raise InvalidArgumentError(f"{name} must be H x W x C, got shape {arr.shape}")
    return _check_dtype(arr, name)


def check_images(X, *, name="X", shape=IMAGE_SHAPE, allow_empty=False):
    """Validate a batch of images of shape (n, H, W, C).

    A single image is not silently promoted to a batch; callers that want
    that should add the axis themselves.
    """
    arr = np.asarray(X)
    if arr.ndim != 4:
        raise InvalidArgumentError(f"{name} must have shape (n, H, W, C), got {arr.shape}")
    if shape is not None and arr.shape[1:] != tuple(shape):
        raise InvalidArgumentError(f"{name} images must be {shape}, got {arr.shape[1:]}")
    if not allow_empty and arr.shape[0] == 0:
        raise InvalidArgumentError(f"{name} is empty")
    return _check_dtype(arr, name)


def check_class_labels(y, n_samples, *, n_classes=10, name="y"):
    arr = np.asarray(y)
    if arr.ndim != 1 or arr.shape[0] != n_samples:
        raise InvalidArgumentError(f"{name} must be 1-d with {n_samples} entries, got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise InvalidArgumentError(f"{name} must be integer labels")
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise InvalidArgumentError(f"{name} entries must lie in [0, {n_classes - 1}]")
    return arr.astype(np.int64, copy=False)


def _check_dtype(arr, name):
    if arr.dtype == np.uint8:
        return arr
    if not np.issubdtype(arr.dtype, np.number):
        raise InvalidArgumentError(f"{name} must be numeric, got {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise InvalidArgumentError(f"{name} intensities must lie in [0, 255]")
    if np.issubdtype(arr.dtype, np.floating) and not np.array_equal(arr, np.round(arr)):
        raise InvalidArgumentError(f"{name} must hold integral 8-bit intensities")
    return arr.astype(np.uint8)
