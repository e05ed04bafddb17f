"""Backbones with block-level truncation, pretext/probe heads and checkpoints.

Block boundaries per architecture:

==============  =======  ==========================================================
arch            blocks   block k
==============  =======  ==========================================================
vgg16           5        k-th conv group ending in a 2x2 max-pool
nin             3        k-th mlpconv stack (one k x k conv, two 1x1 convs)
resnet50        5        1 = 3x3 stem, 2..5 = bottleneck stages [3, 4, 6, 3]
resnet152v2     5        1 = 3x3 stem, 2..5 = pre-activation stages [3, 8, 36, 3]
densenet201     5        1 = 3x3 stem, 2..5 = dense block [6, 12, 48, 32] + transition
==============  =======  ==========================================================

ResNet and DenseNet use a stride-1 3x3 stem without the initial pooling so a
32x32 input survives five blocks. Every truncated backbone ends in global
average pooling, so heads see a flat ``(batch, feature_width)`` tensor.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigurationError, FormatError, IngestionError, InvalidArgumentError
from .io_utils import atomic_write_bytes

ARCH_BLOCKS = {"vgg16": 5, "nin": 3, "resnet50": 5, "resnet152v2": 5, "densenet201": 5}
PROBE_HIDDEN = 200
CHECKPOINT_MAGIC = b"TSSL1\n"


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture identity and truncation depth.

    ``width_multiplier`` scales every channel count; 1.0 is the standard
    architecture, smaller values give cheap desk-scale variants.
    """

    arch: str
    num_blocks: int
    width_multiplier: float = 1.0
    input_shape: tuple = (32, 32, 3)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if self.arch not in ARCH_BLOCKS:
            raise ConfigurationError(f"unknown arch {self.arch!r}; choose from {', '.join(ARCH_BLOCKS)}")
        top = ARCH_BLOCKS[self.arch]
        if isinstance(self.num_blocks, bool) or not isinstance(self.num_blocks, (int, np.integer)) \
                or not 1 <= self.num_blocks <= top:
            raise ConfigurationError(f"{self.arch} has blocks 1..{top}, got {self.num_blocks!r}")
        if not 0 < self.width_multiplier <= 4:
            raise ConfigurationError(f"width_multiplier must lie in (0, 4], got {self.width_multiplier}")
        if self.input_shape != (32, 32, 3):
            raise ConfigurationError(f"only 32x32x3 inputs are supported, got {self.input_shape}")

    @property
    def label(self):
        return f"{self.arch}-{self.num_blocks}"

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["arch"], int(d["num_blocks"]), float(d.get("width_multiplier", 1.0)),
                   tuple(d.get("input_shape", (32, 32, 3))))

    @classmethod
    def parse(cls, text, width_multiplier=1.0):
        """Parse ``"vgg16-2"`` style labels."""
        arch, _, blocks = str(text).rpartition("-")
        if not arch or not blocks.isdigit():
            raise ConfigurationError(f"backbone label must look like 'vgg16-2', got {text!r}")
        return cls(arch.lower(), int(blocks), width_multiplier)


def _ch(n, mult):
    return max(4, int(round(n * mult)))


def _conv_bn(cin, cout, k=3, stride=1):
    return [nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
            nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


def _vgg16_blocks(mult):
    cfg = [[64, 64], [128, 128], [256, 256, 256], [512, 512, 512], [512, 512, 512]]
    cin = 3
    for group in cfg:
        layers = []
        for c in group:
            c = _ch(c, mult)
            layers += _conv_bn(cin, c)
            cin = c
        layers.append(nn.MaxPool2d(2))
        yield nn.Sequential(*layers), cin


def _nin_blocks(mult):
    cfg = [
        (5, [192, 160, 96], nn.MaxPool2d(3, stride=2, padding=1)),
        (5, [192, 192, 192], nn.AvgPool2d(3, stride=2, padding=1)),
        (3, [192, 192, 192], None),
    ]
    cin = 3
    for k, widths, pool in cfg:
        widths = [_ch(c, mult) for c in widths]
        layers = _conv_bn(cin, widths[0], k) + _conv_bn(widths[0], widths[1], 1) + _conv_bn(widths[1], widths[2], 1)
        if pool is not None:
            layers.append(pool)
        cin = widths[2]
        yield nn.Sequential(*layers), cin


class _Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, mid, stride):
        super().__init__()
        cout = mid * self.expansion
        self.conv1 = nn.Conv2d(cin, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + (x if self.shortcut is None else self.shortcut(x)))


class _PreActBottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, mid, stride):
        super().__init__()
        cout = mid * self.expansion
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, mid, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, cout, 1, bias=False)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)

    def forward(self, x):
        pre = F.relu(self.bn1(x))
        skip = x if self.shortcut is None else self.shortcut(pre)
        out = self.conv1(pre)
        out = self.conv2(F.relu(self.bn2(out)))
        out = self.conv3(F.relu(self.bn3(out)))
        return out + skip


def _resnet_blocks(mult, block_cls, depths, preact):
    stem_c = _ch(64, mult)
    stem = [nn.Conv2d(3, stem_c, 3, padding=1, bias=False)]
    if not preact:
        stem += [nn.BatchNorm2d(stem_c), nn.ReLU(inplace=True)]
    yield nn.Sequential(*stem), stem_c
    cin = stem_c
    for i, (n, mid) in enumerate(zip(depths, (64, 128, 256, 512))):
        mid = _ch(mid, mult)
        layers = []
        for j in range(n):
            layers.append(block_cls(cin, mid, stride=2 if (i > 0 and j == 0) else 1))
            cin = mid * block_cls.expansion
        if preact and i == len(depths) - 1:
            layers += [nn.BatchNorm2d(cin), nn.ReLU(inplace=True)]
        yield nn.Sequential(*layers), cin


class _DenseLayer(nn.Module):
    def __init__(self, cin, growth, bn_size=4):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, bn_size * growth, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(bn_size * growth)
        self.conv2 = nn.Conv2d(bn_size * growth, growth, 3, padding=1, bias=False)

    def forward(self, x):
        out = self.conv1(F.relu(self.bn1(x)))
        out = self.conv2(F.relu(self.bn2(out)))
        return torch.cat([x, out], 1)


def _densenet_blocks(mult, depths=(6, 12, 48, 32)):
    growth = _ch(32, mult)
    stem_c = _ch(64, mult)
    yield nn.Sequential(nn.Conv2d(3, stem_c, 3, padding=1, bias=False)), stem_c
    cin = stem_c
    for i, n in enumerate(depths):
        layers = []
        for _ in range(n):
            layers.append(_DenseLayer(cin, growth))
            cin += growth
        if i < len(depths) - 1:
            cout = cin // 2
            layers += [nn.BatchNorm2d(cin), nn.ReLU(inplace=True), nn.Conv2d(cin, cout, 1, bias=False), nn.AvgPool2d(2)]
            cin = cout
        else:
            layers += [nn.BatchNorm2d(cin), nn.ReLU(inplace=True)]
        yield nn.Sequential(*layers), cin


def _block_iter(arch, mult):
    if arch == "vgg16":
        return _vgg16_blocks(mult)
    if arch == "nin":
        return _nin_blocks(mult)
    if arch == "resnet50":
        return _resnet_blocks(mult, _Bottleneck, (3, 4, 6, 3), preact=False)
    if arch == "resnet152v2":
        return _resnet_blocks(mult, _PreActBottleneck, (3, 8, 36, 3), preact=True)
    return _densenet_blocks(mult)


class Backbone(nn.Module):
    """Convolutional blocks ``block1..blockN`` followed by global average pooling."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        blocks = nn.Sequential()
        width = 3
        # generators build lazily, so blocks past num_blocks never touch the RNG
        for i, (block, width) in zip(range(spec.num_blocks), _block_iter(spec.arch, spec.width_multiplier)):
            blocks.add_module(f"block{i + 1}", block)
        self.blocks = blocks
        self.feature_width = width

    def feature_map(self, x):
        return self.blocks(x)

    def forward(self, x):
        return torch.flatten(F.adaptive_avg_pool2d(self.blocks(x), 1), 1)


def build_backbone(spec, init_seed=0):
    """Build the truncated backbone with parameters drawn from ``init_seed``."""
    if not isinstance(spec, BackboneSpec):
        raise ConfigurationError(f"expected a BackboneSpec, got {type(spec).__name__}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(init_seed))
        return Backbone(spec)


def shape_trace(spec):
    """Per-block output shapes ``[(name, C, H, W), ...]`` for one 32x32x3 input."""
    with torch.device("meta"):
        net = Backbone(spec)
        x = torch.empty(1, 3, 32, 32)
        trace = []
        for name, block in net.blocks.named_children():
            x = block(x)
            trace.append((name, *x.shape[1:]))
    return trace


class PretextHead(nn.Module):
    """One affine layer from pooled features to ``K`` transform logits."""

    def __init__(self, in_features, K):
        super().__init__()
        self.fc = nn.Linear(in_features, K)

    def forward(self, x):
        return self.fc(x)


class ProbeHead(nn.Sequential):
    """Three fully connected layers: two 200-unit hidden layers with BN + ReLU."""

    def __init__(self, in_features, classes=10, hidden=PROBE_HIDDEN):
        super().__init__(
            nn.Linear(in_features, hidden), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, classes),
        )


class GeoNet(nn.Module):
    """A backbone with a head on top; ``forward`` returns logits.

    While the backbone is frozen it stays in eval mode even when the model is
    put in training mode, so BN running statistics do not move either.
    """

    def __init__(self, backbone, head):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.backbone_trainable = True

    def forward(self, x):
        return self.head(self.backbone(x))

    def predict_proba(self, x):
        return F.softmax(self.forward(x), dim=1)

    def train(self, mode=True):
        super().train(mode)
        if not self.backbone_trainable:
            self.backbone.eval()
        return self


def _unwrap_backbone(model):
    if isinstance(model, GeoNet):
        return model.backbone
    if isinstance(model, Backbone):
        return model
    raise ConfigurationError(f"expected a Backbone or GeoNet, got {type(model).__name__}")


def attach_pretext_head(model, K, seed=None):
    """Return a :class:`GeoNet` predicting ``K`` transform classes."""
    if isinstance(K, bool) or not isinstance(K, (int, np.integer)) or K < 2:
        raise InvalidArgumentError(f"a pretext head needs K >= 2, got {K!r}")
    backbone = _unwrap_backbone(model)
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(int(seed))
        head = PretextHead(backbone.feature_width, int(K))
    return GeoNet(backbone, head)


def attach_probe_head(model, classes=10, seed=None):
    """Return a :class:`GeoNet` with the 3-layer probe on the pooled features."""
    backbone = _unwrap_backbone(model)
    if classes < 2:
        raise ConfigurationError(f"probe needs at least 2 classes, got {classes}")
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(int(seed))
        head = ProbeHead(backbone.feature_width, classes)
    return GeoNet(backbone, head)


def probe_parameter_count(feature_width, classes=10, hidden=PROBE_HIDDEN):
    """Trainable probe parameters (BN contributes scale and shift per channel)."""
    return (feature_width * hidden + hidden + 2 * hidden
            + hidden * hidden + hidden + 2 * hidden
            + hidden * classes + classes)


def set_backbone_trainable(model, trainable):
    """Freeze or unfreeze the backbone of a :class:`GeoNet` in place."""
    if not isinstance(model, GeoNet):
        raise ConfigurationError("set_backbone_trainable needs a model with a backbone/head split")
    model.backbone_trainable = bool(trainable)
    for p in model.backbone.parameters():
        p.requires_grad_(bool(trainable))
    model.train(model.training)
    return model


# -- input conversion ---------------------------------------------------------

def images_to_tensor(images, mean, std, device="cpu"):
    """uint8 ``(N, H, W, C)`` -> normalised float ``(N, C, H, W)`` tensor."""
    x = torch.from_numpy(np.ascontiguousarray(images)).to(device)
    x = x.permute(0, 3, 1, 2).float().div_(255.0)
    m = torch.as_tensor(np.asarray(mean, dtype=np.float32), device=device).view(1, -1, 1, 1)
    s = torch.as_tensor(np.asarray(std, dtype=np.float32), device=device).view(1, -1, 1, 1)
    return (x - m) / s


# -- checkpoints --------------------------------------------------------------

@dataclass(eq=False)
class Checkpoint:
    """Named parameters of a backbone (and optionally its head) plus metadata.

    Tensors are stored as numpy arrays keyed by ``state_dict`` name, with
    ``backbone.`` / ``head.`` prefixes.
    """

    spec: BackboneSpec
    tensors: dict
    norm_mean: np.ndarray
    norm_std: np.ndarray
    provenance: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, norm_mean, norm_std, provenance=None):
        state = model.state_dict()
        if isinstance(model, Backbone):
            state = {f"backbone.{k}": v for k, v in state.items()}
            spec = model.spec
        else:
            spec = model.backbone.spec
        tensors = {k: v.detach().cpu().numpy().copy() for k, v in state.items()}
        return cls(spec, tensors, np.asarray(norm_mean, np.float32), np.asarray(norm_std, np.float32),
                   dict(provenance or {}))

    def backbone_state(self):
        return {k[len("backbone."):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items()
                if k.startswith("backbone.")}

    def head_state(self):
        return {k[len("head."):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items()
                if k.startswith("head.")}

    def build_backbone(self):
        backbone = build_backbone(self.spec)
        state = self.backbone_state()
        try:
            backbone.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise ConfigurationError(f"checkpoint does not match {self.spec.label}: {exc}") from exc
        return backbone

    def with_backbone(self, backbone):
        """Copy of this checkpoint with backbone tensors taken from ``backbone``."""
        backbone = _unwrap_backbone(backbone)
        tensors = {k: v for k, v in self.tensors.items() if not k.startswith("backbone.")}
        for k, v in backbone.state_dict().items():
            tensors[f"backbone.{k}"] = v.detach().cpu().numpy().copy()
        ordered = {k: tensors[k] for k in sorted(tensors)}
        return Checkpoint(self.spec, ordered, self.norm_mean, self.norm_std, dict(self.provenance))

    def backbone_digest(self):
        """SHA-256 over backbone tensor names and bytes."""
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            if k.startswith("backbone."):
                v = np.ascontiguousarray(self.tensors[k])
                h.update(k.encode())
                h.update(str(v.dtype).encode())
                h.update(v.tobytes())
        return h.hexdigest()

    def to_bytes(self):
        index, blobs, offset = [], [], 0
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name]).copy(order="C")
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = arr.tobytes()
            index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {
            "format": "TSSL1",
            "spec": self.spec.to_dict(),
            "normalization": {"mean": [float(v) for v in self.norm_mean],
                              "std": [float(v) for v in self.norm_std]},
            "provenance": self.provenance,
            "tensors": index,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data, source="<bytes>"):
        if not data.startswith(CHECKPOINT_MAGIC):
            raise FormatError(source, "not a TSSL1 checkpoint (bad magic)")
        start = len(CHECKPOINT_MAGIC)
        if len(data) < start + 8:
            raise FormatError(source, "truncated checkpoint header")
        (hlen,) = struct.unpack("<Q", data[start:start + 8])
        body = start + 8 + hlen
        try:
            header = json.loads(data[start + 8:body].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(source, f"corrupt checkpoint header: {exc}") from exc
        tensors = {}
        for entry in header["tensors"]:
            lo = body + entry["offset"]
            raw = data[lo:lo + entry["nbytes"]]
            if len(raw) != entry["nbytes"]:
                raise FormatError(source, f"tensor {entry['name']} is truncated")
            arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(tuple(entry["shape"]))
            tensors[entry["name"]] = arr.copy()
        norm = header["normalization"]
        return cls(BackboneSpec.from_dict(header["spec"]), tensors,
                   np.asarray(norm["mean"], np.float32), np.asarray(norm["std"], np.float32),
                   header.get("provenance", {}))

    def save(self, path):
        """Write atomically; a failed write leaves no partial file behind."""
        atomic_write_bytes(path, self.to_bytes())
        return path

    @classmethod
    def load(cls, path):
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise IngestionError(path, f"cannot read checkpoint: {exc}") from exc
        return cls.from_bytes(data, source=str(path))


def model_from_checkpoint(ckpt, head="pretext"):
    """Rebuild a :class:`GeoNet` (``head="pretext"``) or bare backbone (``head=None``)."""
    backbone = ckpt.build_backbone()
    if head is None:
        return backbone
    head_state = ckpt.head_state()
    if "fc.weight" not in head_state:
        raise ConfigurationError("checkpoint carries no pretext head")
    model = attach_pretext_head(backbone, int(head_state["fc.weight"].shape[0]))
    model.head.load_state_dict(head_state)
    return model
