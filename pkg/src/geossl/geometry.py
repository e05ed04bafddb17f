"""Geometric transform kernels and pretext label spaces.

Every kernel accepts a single image ``(H, W, C)`` or a batch ``(N, H, W, C)``
of 8-bit intensities and returns an array of the same shape and dtype.
Quarter-turn rotations and translations move pixels without touching their
values; rotation by arbitrary angles, shear and scaling resample bilinearly
and set every output pixel whose source falls outside the image to ``fill``
(zero unless stated otherwise).
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

__all__ = [
    "TRANSFORM_SET_NAMES",
    "affine_warp",
    "TransformSet",
    "TransformSpec",
    "apply_transform",
    "apply_transform_batch",
    "make_transform_set",
    "rotate_degrees",
    "rotate_quarter",
    "scale_about_center",
    "shear",
    "translate",
]

# Source coordinates this close to the border still count as inside; keeps
# exact-grid maps (e.g. a 90 degree rotation computed with cos/sin) from
# losing their outermost row to floating point noise.
_SUPPORT_EPS = 1e-6
_GRID = 2.0 ** 16


def _as_batch(img):
    arr = np.asarray(img)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim == 4:
        return arr, False
    raise InvalidArgumentError(f"expected (H, W, C) or (N, H, W, C) image array, got shape {arr.shape}")


def _finish(batch, squeeze):
    return batch[0] if squeeze else batch


def _bilinear(batch, src_r, src_c, fill=0):
    """Sample ``batch`` at fractional source coordinates.

    ``src_r``/``src_c`` have shape ``(H, W)`` (one map for the whole batch) or
    ``(N, H, W)`` (one map per image).
    """
    n, h, w, _ = batch.shape
    # Quantised coordinates make every weight dyadic, so the interpolation
    # below is exact in float64 and independent of evaluation order; mirrored
    # maps then round half-way values identically.
    src_r = np.round(src_r * _GRID) / _GRID
    src_c = np.round(src_c * _GRID) / _GRID
    inside = (
        (src_r >= -_SUPPORT_EPS)
        & (src_r <= h - 1 + _SUPPORT_EPS)
        & (src_c >= -_SUPPORT_EPS)
        & (src_c <= w - 1 + _SUPPORT_EPS)
    )
    r = np.clip(src_r, 0, h - 1)
    c = np.clip(src_c, 0, w - 1)
    r0 = np.floor(r).astype(np.intp)
    c0 = np.floor(c).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (r - r0)[..., None]
    fc = (c - c0)[..., None]

    src = batch.astype(np.float64)
    if src_r.ndim == 2:
        def pick(rr, cc):
            return src[:, rr, cc, :]
    else:
        idx = np.arange(n)[:, None, None]

        def pick(rr, cc):
            return src[idx, rr, cc, :]

    top = pick(r0, c0) * (1 - fc) + pick(r0, c1) * fc
    bottom = pick(r1, c0) * (1 - fc) + pick(r1, c1) * fc
    out = top * (1 - fr) + bottom * fr
    out = np.where(inside[..., None], out, float(fill))
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _grid(h, w):
    return np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")


def rotate_quarter(img, k):
    """Rotate counter-clockwise by ``90 * k`` degrees using transpose and flips.

    Output pixel ``(r, c)`` of a single quarter turn is input pixel
    ``(c, H - 1 - r)``. No pixel value is altered.
    """
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or not 0 <= k <= 3:
        raise InvalidArgumentError(f"quarter-turn count must be 0, 1, 2 or 3, got {k!r}")
    batch, squeeze = _as_batch(img)
    if k == 0:
        out = batch.copy()
    elif k == 1:
        out = np.flip(np.swapaxes(batch, 1, 2), axis=1)
    elif k == 2:
        out = np.flip(batch, axis=(1, 2))
    else:
        out = np.flip(np.swapaxes(batch, 1, 2), axis=2)
    return _finish(np.ascontiguousarray(out), squeeze)


def rotate_degrees(img, theta, fill=0):
    """Rotate counter-clockwise by ``theta`` degrees about the image centre."""
    if not -180 <= theta <= 180:
        raise InvalidArgumentError(f"rotation angle must lie in [-180, 180], got {theta}")
    if not 0 <= fill <= 255:
        raise InvalidArgumentError(f"fill must be an 8-bit intensity, got {fill}")
    batch, squeeze = _as_batch(img)
    if theta == 0:
        return _finish(batch.copy(), squeeze)
    h, w = batch.shape[1:3]
    rr, cc = _grid(h, w)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    y, x = rr - cy, cc - cx
    t = np.deg2rad(theta)
    src_r = cy + np.sin(t) * x + np.cos(t) * y
    src_c = cx + np.cos(t) * x - np.sin(t) * y
    return _finish(_bilinear(batch, src_r, src_c, fill), squeeze)


def shear(img, factor):
    """Horizontal shear: output ``(r, c)`` samples input ``(r, c - factor * (r - H/2))``."""
    if not abs(factor) <= 1:
        raise InvalidArgumentError(f"shear factor must satisfy |factor| <= 1, got {factor}")
    batch, squeeze = _as_batch(img)
    if factor == 0:
        return _finish(batch.copy(), squeeze)
    h, w = batch.shape[1:3]
    rr, cc = _grid(h, w)
    src_c = cc - factor * (rr - h / 2)
    return _finish(_bilinear(batch, rr, src_c), squeeze)


def scale_about_center(img, factor):
    """Isotropic zoom about the centre on a fixed canvas.

    ``factor < 1`` shrinks the content and leaves a zero border, ``factor > 1``
    enlarges it and crops whatever leaves the canvas.
    """
    if not 0 < factor <= 4:
        raise InvalidArgumentError(f"scale factor must lie in (0, 4], got {factor}")
    batch, squeeze = _as_batch(img)
    if factor == 1:
        return _finish(batch.copy(), squeeze)
    h, w = batch.shape[1:3]
    rr, cc = _grid(h, w)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    src_r = cy + (rr - cy) / factor
    src_c = cx + (cc - cx) / factor
    return _finish(_bilinear(batch, src_r, src_c), squeeze)


def translate(img, dx, dy):
    """Shift content right by ``dx`` and down by ``dy`` whole pixels, zero filling."""
    batch, squeeze = _as_batch(img)
    h, w = batch.shape[1:3]
    for name, v, limit in (("dx", dx, w), ("dy", dy, h)):
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
            raise InvalidArgumentError(f"{name} must be an integer pixel offset, got {v!r}")
        if not abs(v) < limit:
            raise InvalidArgumentError(f"|{name}| must be below {limit}, got {v}")
    out = np.zeros_like(batch)
    out[:, max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
        batch[:, max(-dy, 0):h - max(dy, 0), max(-dx, 0):w - max(dx, 0)]
    return _finish(out, squeeze)


def affine_warp(img, inverse, fill=0):
    """Warp with per-image inverse affine maps about the image centre.

    ``inverse`` has shape ``(2, 3)`` or ``(N, 2, 3)``; for output offset
    ``(y, x)`` from the centre it gives the source offset
    ``inverse @ (y, x, 1)``. Images whose map is exactly the identity are
    copied untouched.
    """
    batch, squeeze = _as_batch(img)
    n, h, w = batch.shape[:3]
    inv = np.broadcast_to(np.asarray(inverse, dtype=np.float64), (n, 2, 3))
    ident = np.all(inv == np.array([[1.0, 0, 0], [0, 1.0, 0]]), axis=(1, 2))
    out = batch.copy()
    todo = np.flatnonzero(~ident)
    if todo.size:
        rr, cc = _grid(h, w)
        cy, cx = (h - 1) / 2, (w - 1) / 2
        y, x = rr - cy, cc - cx
        m = inv[todo]
        src_r = cy + m[:, 0, 0, None, None] * y + m[:, 0, 1, None, None] * x + m[:, 0, 2, None, None]
        src_c = cx + m[:, 1, 0, None, None] * y + m[:, 1, 1, None, None] * x + m[:, 1, 2, None, None]
        out[todo] = _bilinear(batch[todo], src_r, src_c, fill)
    return _finish(out, squeeze)


_KINDS = ("identity", "rotate_quarter", "rotate_degrees", "shear", "scale", "translate")


@dataclass(frozen=True)
class TransformSpec:
    """One member of a pretext label space.

    ``params`` depends on ``kind``: ``()`` for identity, ``(k,)`` for
    rotate_quarter, ``(degrees,)`` for rotate_degrees, ``(factor,)`` for
    shear and scale, ``(dx, dy)`` for translate.
    """

    kind: str
    params: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        kind, p = self.kind, self.params
        arity = {"identity": 0, "translate": 2}.get(kind, 1)
        if kind not in _KINDS:
            raise InvalidArgumentError(f"unknown transform kind {kind!r}")
        if len(p) != arity:
            raise InvalidArgumentError(f"{kind} takes {arity} parameter(s), got {p}")
        ok = {
            "identity": lambda: True,
            "rotate_quarter": lambda: p[0] in (0, 1, 2, 3) and float(p[0]).is_integer(),
            "rotate_degrees": lambda: -180 <= p[0] <= 180,
            "shear": lambda: abs(p[0]) <= 1,
            "scale": lambda: 0 < p[0] <= 4,
            "translate": lambda: all(float(v).is_integer() and abs(v) < 32 for v in p),
        }[kind]()
        if not ok:
            raise InvalidArgumentError(f"parameters {p} out of range for {kind}")

    def __call__(self, img):
        kind, p = self.kind, self.params
        if kind == "identity":
            batch, squeeze = _as_batch(img)
            return _finish(batch.copy(), squeeze)
        if kind == "rotate_quarter":
            return rotate_quarter(img, int(p[0]))
        if kind == "rotate_degrees":
            return rotate_degrees(img, p[0], fill=0)
        if kind == "shear":
            return shear(img, p[0])
        if kind == "scale":
            return scale_about_center(img, p[0])
        return translate(img, int(p[0]), int(p[1]))

    def describe(self):
        if not self.params:
            return self.kind
        return f"{self.kind}({', '.join(f'{v:g}' for v in self.params)})"

    def to_dict(self):
        return {"kind": self.kind, "params": list(self.params)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], tuple(d.get("params", ())))


@dataclass(frozen=True)
class TransformSet:
    """Ordered transforms; a member's index is its pretext class label."""

    name: str
    members: tuple

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if len(self.members) < 2:
            raise InvalidArgumentError("a transform set needs at least two members")
        if len(set(self.members)) != len(self.members):
            raise InvalidArgumentError(f"transform set {self.name!r} has duplicate members")
        expected = _SET_SIZES.get(self.name)
        if expected is not None and expected != len(self.members):
            raise InvalidArgumentError(f"{self.name} must have {expected} members, got {len(self.members)}")

    @property
    def K(self):
        return len(self.members)

    def __len__(self):
        return len(self.members)

    def to_dict(self):
        return {"name": self.name, "members": [m.to_dict() for m in self.members]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], tuple(TransformSpec.from_dict(m) for m in d["members"]))


_SET_SIZES = {"rot2": 2, "rot4": 4, "rot8": 8, "affine5": 5, "affine10": 10}
TRANSFORM_SET_NAMES = tuple(_SET_SIZES)

# Pretext translation magnitude: a quarter of the canvas width.
PRETEXT_SHIFT = 8


def _rot8():
    members = []
    for deg in range(0, 360, 45):
        if deg % 90 == 0:
            members.append(TransformSpec("rotate_quarter", (deg // 90,)))
        else:
            members.append(TransformSpec("rotate_degrees", (deg if deg <= 180 else deg - 360,)))
    return members


def _canonical_members(name):
    q = lambda k: TransformSpec("rotate_quarter", (k,))  # noqa: E731
    if name == "rot2":
        return [q(0), q(2)]
    if name == "rot4":
        return [q(0), q(1), q(2), q(3)]
    if name == "rot8":
        return _rot8()
    if name == "affine5":
        return [
            TransformSpec("identity"),
            q(2),
            TransformSpec("shear", (0.3,)),
            TransformSpec("scale", (0.7,)),
            TransformSpec("translate", (PRETEXT_SHIFT, 0)),
        ]
    if name == "affine10":
        return [
            TransformSpec("identity"),
            q(1),
            q(2),
            q(3),
            TransformSpec("shear", (0.3,)),
            TransformSpec("shear", (-0.3,)),
            TransformSpec("scale", (0.7,)),
            TransformSpec("scale", (1.3,)),
            TransformSpec("translate", (PRETEXT_SHIFT, 0)),
            TransformSpec("translate", (-PRETEXT_SHIFT, 0)),
        ]
    raise InvalidArgumentError(f"unknown transform set {name!r}; choose from {', '.join(_SET_SIZES)}")


def make_transform_set(name):
    """Return the canonical transform set called ``name``.

    >>> make_transform_set("rot4").K
    4
    """
    if isinstance(name, TransformSet):
        return name
    return TransformSet(name, tuple(_canonical_members(name)))


def _check_label(tset, y):
    if isinstance(y, bool) or not isinstance(y, (int, np.integer)) or not 0 <= y < tset.K:
        raise InvalidArgumentError(f"label {y!r} out of range for {tset.name} (K={tset.K})")


def apply_transform(img, tset, y):
    """Apply member ``y`` of ``tset`` to ``img``."""
    tset = make_transform_set(tset)
    _check_label(tset, y)
    return tset.members[int(y)](img)


def apply_transform_batch(images, tset, labels):
    """Apply a per-image label from ``labels`` to a batch of images.

    Images sharing a label are processed together, so resampling maps are
    computed once per member rather than once per image.
    """
    tset = make_transform_set(tset)
    batch, _ = _as_batch(images)
    labels = np.asarray(labels)
    if labels.shape != (batch.shape[0],):
        raise InvalidArgumentError(f"need one label per image, got {labels.shape} for {batch.shape[0]} images")
    out = np.empty_like(batch)
    for y in np.unique(labels):
        _check_label(tset, int(y))
        sel = labels == y
        out[sel] = tset.members[int(y)](batch[sel])
    return out
