"""Quick self-checks of the core invariants, runnable without pytest.

``geossl verify`` calls :func:`run_checks`. Each check is small (well under
a minute in total on one CPU core) and independent of any dataset.
"""

import math
import time
from dataclasses import dataclass

import numpy as np

from .dataset import build_pretext_separate
from .geometry import (TRANSFORM_SET_NAMES, make_transform_set, rotate_quarter, scale_about_center, shear,
                       translate)
from .models import BackboneSpec, Checkpoint, attach_pretext_head, build_backbone, shape_trace
from .optim import lr_schedule
from .pretext import pretext_loss


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _rotation_group_law():
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (200, 32, 32, 3), dtype=np.uint8)
    for a in range(4):
        for b in range(4):
            lhs = rotate_quarter(rotate_quarter(imgs, a), b)
            if not np.array_equal(lhs, rotate_quarter(imgs, (a + b) % 4)):
                return False, f"rot{a} then rot{b} differs from rot{(a + b) % 4}"
    return True, "mod-4 composition exact on 200 images"


def _identities():
    rng = np.random.default_rng(1)
    imgs = rng.integers(0, 256, (50, 32, 32, 3), dtype=np.uint8)
    for name, out in (("shear(0)", shear(imgs, 0.0)), ("scale(1)", scale_about_center(imgs, 1.0)),
                      ("translate(0,0)", translate(imgs, 0, 0))):
        if not np.array_equal(out, imgs):
            return False, f"{name} changed pixels"
    return True, "shear(0), scale(1), translate(0,0) bit-exact"


def _uniform_loss():
    worst = 0.0
    for K in (2, 4, 8, 10):
        probs = np.full((K * 3, K), 1.0 / K)
        labels = np.tile(np.arange(K), 3)
        worst = max(worst, abs(pretext_loss(probs, labels, K) - math.log(K)))
    return worst <= 1e-6, f"max |loss - ln K| = {worst:.2e}"


def _lr_values():
    epochs = (0, 29, 30, 59, 60, 79, 80, 99)
    expected = (1e-3, 1e-3, 2e-4, 2e-4, 4e-5, 4e-5, 8e-6, 8e-6)
    got = tuple(lr_schedule(e) for e in epochs)
    return got == expected, f"lr at {epochs} = {got}"


def _dataset_counts():
    imgs = np.zeros((60, 32, 32, 3), dtype=np.uint8)
    details = []
    for name in TRANSFORM_SET_NAMES:
        ds = build_pretext_separate(imgs, make_transform_set(name))
        counts = ds.label_counts()
        if len(ds) != 60 * ds.K or set(counts.tolist()) != {60}:
            return False, f"{name}: {len(ds)} samples, label counts {counts.tolist()}"
        details.append(f"{name}={len(ds)}")
    return True, "60 images -> " + ", ".join(details)


def _shape_trace():
    widths = [c for _, c, _, _ in shape_trace(BackboneSpec("vgg16", 5))]
    ok = widths == [64, 128, 256, 512, 512]
    return ok, f"vgg16 block widths {widths}"


def _checkpoint_roundtrip():
    spec = BackboneSpec("vgg16", 2, width_multiplier=0.25)
    model = attach_pretext_head(build_backbone(spec, init_seed=0), 4, seed=0)
    ck = Checkpoint.from_model(model, np.zeros(3, np.float32), np.ones(3, np.float32), {"transform_set": "rot4"})
    blob = ck.to_bytes()
    back = Checkpoint.from_bytes(blob)
    same = back.to_bytes() == blob and all(np.array_equal(ck.tensors[k], back.tensors[k]) for k in ck.tensors)
    return same, f"{len(blob)} bytes, {len(ck.tensors)} tensors"


CHECKS = (
    ("rotation group law", _rotation_group_law),
    ("identity transforms", _identities),
    ("uniform pretext loss", _uniform_loss),
    ("learning-rate drops", _lr_values),
    ("pretext dataset counts", _dataset_counts),
    ("backbone shape trace", _shape_trace),
    ("checkpoint round trip", _checkpoint_roundtrip),
)


def run_checks(checks=CHECKS):
    results = []
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # noqa: BLE001 - a crashing check is a failed check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - t0))
    return results
