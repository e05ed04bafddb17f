"""Procedural stand-in for CIFAR-10 when the real files are unavailable.

Each image shows one upright object from ten shape classes (house, tree,
person, car, mushroom, table, lamp, boat, chair, rocket) at a random
position, size and colour over a smoothly shaded background in a random
direction, with pixel noise. Objects have a canonical "up", so orientation
is inferable from content the same way it is for natural photographs, while
the background carries no orientation cue.
"""

from pathlib import Path

import numpy as np

from .dataset import CIFAR_TEST_FILE, CIFAR_TRAIN_FILES, CifarSplit, write_cifar_batch

SURROGATE_CLASSES = (
    "house", "tree", "person", "car", "mushroom",
    "table", "lamp", "boat", "chair", "rocket",
)

_RR, _CC = np.meshgrid(np.arange(32, dtype=np.float32), np.arange(32, dtype=np.float32), indexing="ij")


def _rect(cy, cx, h, w):
    return (np.abs(_RR - cy) <= h / 2) & (np.abs(_CC - cx) <= w / 2)


def _disk(cy, cx, rad):
    return (_RR - cy) ** 2 + (_CC - cx) ** 2 <= rad ** 2


def _tri_up(top, bottom, cx, half_base):
    """Isosceles triangle with apex at ``(top, cx)`` and base on row ``bottom``."""
    t = (_RR - top) / max(bottom - top, 1e-3)
    return (t >= 0) & (t <= 1) & (np.abs(_CC - cx) <= t * half_base)


def _draw(cls, cy, cx, s, rng):
    """Boolean masks (main part, accent part) for one object of size ``s``."""
    j = lambda: rng.uniform(0.85, 1.15)  # noqa: E731  per-part proportion jitter
    if cls == 0:  # house: box with a roof
        body = _rect(cy + 0.2 * s, cx, 0.6 * s * j(), 0.8 * s)
        roof = _tri_up(cy - 0.55 * s, cy - 0.1 * s, cx, 0.55 * s * j())
        return body, roof
    if cls == 1:  # tree: canopy over a trunk
        canopy = _tri_up(cy - 0.6 * s, cy + 0.25 * s, cx, 0.45 * s * j())
        trunk = _rect(cy + 0.45 * s, cx, 0.4 * s, 0.18 * s * j())
        return canopy, trunk
    if cls == 2:  # person: head over a body with legs
        head = _disk(cy - 0.45 * s, cx, 0.17 * s * j())
        body = _rect(cy - 0.05 * s, cx, 0.5 * s, 0.3 * s * j())
        legs = _rect(cy + 0.4 * s, cx - 0.1 * s, 0.4 * s, 0.09 * s) | _rect(cy + 0.4 * s, cx + 0.1 * s, 0.4 * s, 0.09 * s)
        return body | legs, head
    if cls == 3:  # car: low body, cabin, two wheels underneath
        body = _rect(cy, cx, 0.3 * s, s * j())
        cabin = _rect(cy - 0.25 * s, cx, 0.22 * s, 0.5 * s * j())
        wheels = _disk(cy + 0.2 * s, cx - 0.3 * s, 0.14 * s) | _disk(cy + 0.2 * s, cx + 0.3 * s, 0.14 * s)
        return body | cabin, wheels
    if cls == 4:  # mushroom: dome cap on a stem
        cap = _disk(cy - 0.05 * s, cx, 0.45 * s * j()) & (_RR <= cy - 0.05 * s)
        stem = _rect(cy + 0.2 * s, cx, 0.5 * s, 0.2 * s * j())
        return stem, cap
    if cls == 5:  # table: top slab with two legs
        top = _rect(cy - 0.25 * s, cx, 0.14 * s, 0.9 * s * j())
        legs = _rect(cy + 0.15 * s, cx - 0.35 * s, 0.7 * s, 0.1 * s) | _rect(cy + 0.15 * s, cx + 0.35 * s, 0.7 * s, 0.1 * s)
        return top | legs, np.zeros_like(top)
    if cls == 6:  # lamp: shade on a pole with a wide base
        shade = _tri_up(cy - 0.5 * s, cy - 0.15 * s, cx, 0.3 * s * j())
        pole = _rect(cy + 0.15 * s, cx, 0.65 * s, 0.08 * s)
        base = _rect(cy + 0.48 * s, cx, 0.1 * s, 0.5 * s * j())
        return pole | base, shade
    if cls == 7:  # boat: hull wider at the deck, mast with sail
        t = (_RR - (cy + 0.1 * s)) / (0.3 * s)
        hull = (t >= 0) & (t <= 1) & (np.abs(_CC - cx) <= (0.5 - 0.25 * t) * s * j())
        sail = _tri_up(cy - 0.55 * s, cy + 0.05 * s, cx, 0.25 * s * j()) & (_CC >= cx)
        return hull, sail
    if cls == 8:  # chair: back rest on one side, seat, legs
        seat = _rect(cy, cx, 0.12 * s, 0.5 * s * j())
        back = _rect(cy - 0.3 * s, cx - 0.2 * s, 0.6 * s, 0.1 * s)
        legs = _rect(cy + 0.25 * s, cx - 0.2 * s, 0.5 * s, 0.08 * s) | _rect(cy + 0.25 * s, cx + 0.2 * s, 0.5 * s, 0.08 * s)
        return seat | back | legs, np.zeros_like(seat)
    # rocket: nose cone on a tube with fins at the bottom
    tube = _rect(cy + 0.05 * s, cx, 0.6 * s * j(), 0.24 * s)
    nose = _tri_up(cy - 0.6 * s, cy - 0.25 * s, cx, 0.12 * s)
    fins = _tri_up(cy + 0.15 * s, cy + 0.45 * s, cx, 0.3 * s * j())
    return tube | nose, fins


def render_image(cls, rng):
    """Render one 32x32x3 uint8 image of class ``cls``."""
    # background: linear shading in a random direction, no preferred "up"
    angle = rng.uniform(0, 2 * np.pi)
    g = (np.cos(angle) * (_CC - 15.5) + np.sin(angle) * (_RR - 15.5)) / 22.0
    bg_a = rng.uniform(20, 235, size=3)
    bg_b = rng.uniform(20, 235, size=3)
    img = bg_a + (bg_b - bg_a) * (0.5 + 0.5 * g)[..., None]

    s = rng.uniform(14, 22)
    margin = s * 0.45
    cy = rng.uniform(16 - (16 - margin) * 0.5, 16 + (16 - margin) * 0.5)
    cx = rng.uniform(16 - (16 - margin) * 0.5, 16 + (16 - margin) * 0.5)
    main, accent = _draw(cls, cy, cx, s, rng)
    main_col = rng.uniform(0, 255, size=3)
    accent_col = rng.uniform(0, 255, size=3)
    # keep the object visible against the background
    if np.abs(main_col - img[int(cy), int(cx)]).sum() < 120:
        main_col = 255 - main_col
    img[main] = main_col
    img[accent] = accent_col
    img += rng.normal(0, 8, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_surrogate_split(n, seed, n_classes=10):
    """Class-balanced split of ``n`` images (``n`` divisible by 10 keeps it exact)."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    images = np.empty((n, 32, 32, 3), dtype=np.uint8)
    for i, cls in enumerate(labels):
        images[i] = render_image(int(cls), rng)
    return CifarSplit(images, labels.astype(np.int64))


def make_surrogate_cifar(n_train=50_000, n_test=10_000, seed=0):
    """Return ``(train, test)`` surrogate splits with disjoint random streams."""
    train = make_surrogate_split(n_train, [seed, 0])
    test = make_surrogate_split(n_test, [seed, 1])
    return train, test


def write_surrogate_cifar(directory, n_train=50_000, n_test=10_000, seed=0):
    """Write a surrogate dataset laid out like the CIFAR-10 binary distribution."""
    directory = Path(directory)
    train, test = make_surrogate_cifar(n_train, n_test, seed)
    chunks = np.array_split(np.arange(n_train), len(CIFAR_TRAIN_FILES))
    for name, idx in zip(CIFAR_TRAIN_FILES, chunks):
        write_cifar_batch(directory / name, train.images[idx], train.labels[idx])
    write_cifar_batch(directory / CIFAR_TEST_FILE, test.images, test.labels)
    (directory / "batches.meta.txt").write_text("\n".join(SURROGATE_CLASSES) + "\n")
    return directory
