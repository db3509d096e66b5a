"""CNN branch (parallel VGG-style + residual-style backbones), the 1024/768
convolution cascade with its MLP head, and feature-level fusion of two branches.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .nn import functional as F
from .nn.layers import Conv2d, Dropout, Linear, MaxPool2d, Module
from .tensor import ShapeError, Tensor
from .errors import ConfigError
from .vit import build_vit

NUM_CLASSES = 8


# ---------------------------------------------------------------- configs
@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "vgg-style"
    widths: tuple = (16, 32, 64)
    depth: int = 1
    in_channels: int = 3
    expansion: int = 4

    def __post_init__(self):
        if self.kind not in ("vgg-style", "residual-style", "efficient-style"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.depth < 1 or not self.widths:
            raise ConfigError("backbone needs at least one stage and depth >= 1")


@dataclass(frozen=True)
class HeadConfig:
    """Cascade widths (1x1 conv, 3x3 conv, pool, 1x1 conv, 3x3 conv, 3x3 conv)
    and MLP widths (two hidden layers, then the feature layer)."""

    cascade: tuple = (1024, 1024, 768, 768, 768)
    mlp: tuple = (1024, 1024)
    feature_dim: int = 1024
    num_classes: int = NUM_CLASSES
    dropout: float = 0.1

    def __post_init__(self):
        if len(self.cascade) != 5 or len(self.mlp) != 2:
            raise ConfigError("head cascade needs 5 widths and the MLP 2 hidden widths")


@dataclass(frozen=True)
class MultiNetConfig:
    image_size: int = 224
    vgg: BackboneConfig = field(default_factory=lambda: BackboneConfig("vgg-style"))
    residual: BackboneConfig = field(default_factory=lambda: BackboneConfig("residual-style"))
    head: HeadConfig = field(default_factory=HeadConfig)


MULTINET_PRESETS = {
    # gradient-check scale
    "tiny": dict(widths=(2, 3), depth=1, cascade=(4, 4, 3, 3, 3), mlp=(6, 6), feature_dim=5),
    # desk scale: narrow backbones and cascade, 1024-unit feature layer kept
    "reduced": dict(widths=(16, 32, 64), depth=1, cascade=(128, 128, 96, 96, 96), mlp=(256, 256), feature_dim=1024),
    # cascade and MLP widths as described for the full model
    "full": dict(widths=(64, 128, 256, 512), depth=2, cascade=(1024, 1024, 768, 768, 768), mlp=(1024, 1024),
                 feature_dim=1024),
}


# -------------------------------------------------------------- backbones
class VGGStage(Module):
    def __init__(self, cin: int, cout: int, depth: int, rng):
        self.convs = [Conv2d(cin if i == 0 else cout, cout, 3, rng) for i in range(depth)]
        self.pool = MaxPool2d(2)

    def forward(self, x):
        for conv in self.convs:
            x = conv(x).relu()
        return self.pool(x)


class ResidualBlock(Module):
    """out = relu(F(x) + shortcut(x)), F = conv3x3(stride) -> relu -> conv3x3."""

    def __init__(self, cin: int, cout: int, stride: int, rng, zero_init_residual: bool = False):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        if zero_init_residual:
            self.conv2.weight.data[...] = 0
        self.shortcut = Conv2d(cin, cout, 1, rng, stride=stride) if (stride != 1 or cin != cout) else None

    def residual(self, x):
        return self.conv2(self.conv1(x).relu())

    def forward(self, x):
        skip = self.shortcut(x) if self.shortcut is not None else x
        return (self.residual(x) + skip).relu()


class InvertedBottleneck(Module):
    """1x1 expand -> 3x3 (full, not depthwise) -> 1x1 linear projection, with an
    identity skip when stride is 1 and widths match."""

    def __init__(self, cin: int, cout: int, stride: int, expansion: int, rng):
        hidden = cin * expansion
        self.expand = Conv2d(cin, hidden, 1, rng)
        self.conv = Conv2d(hidden, hidden, 3, rng, stride=stride)
        self.project = Conv2d(hidden, cout, 1, rng)
        self.use_skip = stride == 1 and cin == cout

    def forward(self, x):
        y = self.project(self.conv(self.expand(x).relu()).relu())
        return y + x if self.use_skip else y


class Backbone(Module):
    """Stack of stages; every stage halves the spatial extent."""

    def __init__(self, cfg: BackboneConfig, rng):
        self.cfg = cfg
        self.stages = []
        cin = cfg.in_channels
        if cfg.kind == "vgg-style":
            for width in cfg.widths:
                self.stages.append(VGGStage(cin, width, cfg.depth, rng))
                cin = width
        elif cfg.kind == "residual-style":
            self.stem = Conv2d(cin, cfg.widths[0], 3, rng)
            cin = cfg.widths[0]
            for width in cfg.widths:
                for i in range(cfg.depth):
                    self.stages.append(ResidualBlock(cin, width, 2 if i == 0 else 1, rng))
                    cin = width
        else:
            self.stem = Conv2d(cin, cfg.widths[0], 3, rng)
            cin = cfg.widths[0]
            for width in cfg.widths:
                for i in range(cfg.depth):
                    self.stages.append(InvertedBottleneck(cin, width, 2 if i == 0 else 1, cfg.expansion, rng))
                    cin = width
        self.out_channels = cin

    @property
    def reduction(self) -> int:
        return 2 ** len(self.cfg.widths)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"backbone expects (B,{self.cfg.in_channels},H,W), got {x.shape}")
        if x.shape[2] < self.reduction or x.shape[3] < self.reduction:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} too small for {len(self.cfg.widths)} downsampling stages")
        if self.cfg.kind != "vgg-style":
            x = self.stem(x).relu()
        for stage in self.stages:
            x = stage(x)
        return x


def backbone_forward(x: Tensor, backbone: Backbone) -> Tensor:
    return backbone(x)


def merge_parallel(fa: Tensor, fb: Tensor, equalize: bool = False) -> Tensor:
    """Channel-wise concatenation of two feature maps of equal spatial extent.

    With ``equalize`` the larger map is average-pooled down to the smaller
    extent first; otherwise mismatched extents raise.
    """
    if fa.ndim != 4 or fb.ndim != 4 or fa.shape[0] != fb.shape[0]:
        raise ShapeError(f"cannot merge feature maps {fa.shape} and {fb.shape}")
    if fa.shape[2:] != fb.shape[2:]:
        if not equalize:
            raise ShapeError(f"spatial extents differ: {fa.shape} vs {fb.shape}")
        size = (min(fa.shape[2], fb.shape[2]), min(fa.shape[3], fb.shape[3]))
        fa, fb = F.adaptive_avg_pool2d(fa, size), F.adaptive_avg_pool2d(fb, size)
    return T.concat([fa, fb], axis=1)


# --------------------------------------------------------------- the head
class MultiNetHead(Module):
    """conv1x1(c0) -> conv3x3(c1) -> 2x2 maxpool -> conv1x1(c2) -> conv3x3(c3) -> conv3x3(c4)
    -> flatten -> [linear, relu, dropout] x2 -> linear(feature_dim), relu -> linear(num_classes)."""

    def __init__(self, in_channels: int, spatial: int, cfg: HeadConfig, rng):
        self.cfg = cfg
        c = cfg.cascade
        self.conv1 = Conv2d(in_channels, c[0], 1, rng)
        self.conv2 = Conv2d(c[0], c[1], 3, rng)
        self.pool = MaxPool2d(2)
        self.conv3 = Conv2d(c[1], c[2], 1, rng)
        self.conv4 = Conv2d(c[2], c[3], 3, rng)
        self.conv5 = Conv2d(c[3], c[4], 3, rng)
        pooled = spatial // 2
        if pooled < 1:
            raise ConfigError(f"feature map {spatial}x{spatial} too small for the 2x2 max-pool")
        self.fc1 = Linear(c[4] * pooled * pooled, cfg.mlp[0], rng)
        self.drop1 = Dropout(cfg.dropout)
        self.fc2 = Linear(cfg.mlp[0], cfg.mlp[1], rng)
        self.drop2 = Dropout(cfg.dropout)
        self.fc3 = Linear(cfg.mlp[1], cfg.feature_dim, rng)
        self.out = Linear(cfg.feature_dim, cfg.num_classes, rng)

    def cascade(self, f: Tensor) -> list:
        """Return every cascade activation (used for shape inspection)."""
        acts = []
        x = self.conv1(f).relu()
        acts.append(x)
        x = self.conv2(x).relu()
        acts.append(x)
        x = self.pool(x)
        acts.append(x)
        for conv in (self.conv3, self.conv4, self.conv5):
            x = conv(x).relu()
            acts.append(x)
        return acts

    def forward(self, f: Tensor) -> dict:
        if f.shape[2] < 2 or f.shape[3] < 2:
            raise ShapeError(f"feature map {f.shape} too small for the 2x2 max-pool")
        x = T.flatten(self.cascade(f)[-1], 1)
        x = self.drop1(self.fc1(x).relu())
        x = self.drop2(self.fc2(x).relu())
        features = self.fc3(x).relu()
        return {"features": features, "logits": self.out(features)}


def multinet_head_forward(f: Tensor, head: MultiNetHead) -> dict:
    return head(f)


class MultiNet(Module):
    """Parallel VGG-style and residual-style backbones, merged by channel
    concatenation and fed through :class:`MultiNetHead`."""

    kind = "multinet"

    def __init__(self, cfg: MultiNetConfig, rng):
        self.cfg = cfg
        self.vgg = Backbone(cfg.vgg, rng)
        self.residual = Backbone(cfg.residual, rng)
        spatial = min(cfg.image_size // self.vgg.reduction, -(-cfg.image_size // self.residual.reduction))
        self.head = MultiNetHead(self.vgg.out_channels + self.residual.out_channels, spatial, cfg.head, rng)
        self._spatial = spatial

    @property
    def feature_dim(self) -> int:
        return self.cfg.head.feature_dim

    def forward(self, x: Tensor) -> dict:
        if x.shape[2:] != (self.cfg.image_size, self.cfg.image_size):
            raise ShapeError(f"MultiNet built for {self.cfg.image_size}x{self.cfg.image_size}, got {x.shape}")
        merged = merge_parallel(self.vgg(x), self.residual(x), equalize=True)
        return self.head(merged)


class CNNBranch(Module):
    """Single backbone + global average pool + linear classifier (stand-in for
    the off-the-shelf ResNet / EfficientNet comparators)."""

    def __init__(self, cfg: BackboneConfig, image_size: int, rng, num_classes: int = NUM_CLASSES):
        self.kind = cfg.kind
        self.image_size = image_size
        self.backbone = Backbone(cfg, rng)
        self.head = Linear(self.backbone.out_channels, num_classes, rng)

    @property
    def feature_dim(self) -> int:
        return self.backbone.out_channels

    def forward(self, x: Tensor) -> dict:
        if x.shape[2:] != (self.image_size, self.image_size):
            raise ShapeError(f"branch built for {self.image_size}x{self.image_size}, got {x.shape}")
        features = F.global_avg_pool2d(self.backbone(x))
        return {"features": features, "logits": self.head(features)}


class FusedModel(Module):
    """logits = Linear(concat(features_a, features_b))."""

    def __init__(self, branch_a: Module, branch_b: Module, rng, num_classes: int = NUM_CLASSES):
        self.branch_a = branch_a
        self.branch_b = branch_b
        self.classifier = Linear(branch_a.feature_dim + branch_b.feature_dim, num_classes, rng)

    @property
    def feature_dim(self) -> int:
        return self.classifier.in_features

    def forward(self, x: Tensor) -> dict:
        out_a = self.branch_a(x)
        out_b = self.branch_b(x)
        features = T.concat([out_a["features"], out_b["features"]], axis=1)
        return {"features": features, "logits": self.classifier(features), "branch_a": out_a, "branch_b": out_b}


def fuse_forward(x: Tensor, fused: FusedModel) -> Tensor:
    return fused(x)["logits"]


# -------------------------------------------------------------- registry
BRANCHES = ("vit", "deit", "multinet", "resnet-style", "efficient-style")
_ALIASES = {"resnet": "resnet-style", "efficientnet": "efficient-style", "efficient": "efficient-style",
            "eff": "efficient-style", "residual-style": "resnet-style"}

# ViT/DeiT combinations evaluated alongside the proposed ViT+MultiNet model
PAIRINGS = (
    "vit+multinet", "vit+resnet-style", "vit+efficient-style",
    "deit+multinet", "deit+resnet-style", "deit+efficient-style",
    "vit+deit",
)


def parse_pairing(name: str) -> tuple:
    parts = [p.strip().lower() for p in name.split("+")]
    if not 1 <= len(parts) <= 2 or not all(parts):
        raise ConfigError(f"model must be one branch or 'a+b', got {name!r}")
    parts = [_ALIASES.get(p, p) for p in parts]
    for p in parts:
        if p not in BRANCHES:
            raise ConfigError(f"unknown branch {p!r}; choose from {', '.join(BRANCHES)}")
    return tuple(parts)


def canonical_pairing(name: str) -> str:
    return "+".join(parse_pairing(name))


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to rebuild a model's architecture."""

    pairing: str = "vit+multinet"
    image_size: int = 224
    channels: int = 3
    num_classes: int = NUM_CLASSES
    vit_preset: str = "tiny"
    cnn_preset: str = "reduced"
    patch_size: int | None = None
    dropout: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


def multinet_config(preset: str, image_size: int, channels: int = 3, num_classes: int = NUM_CLASSES,
                    dropout: float = 0.1) -> MultiNetConfig:
    if preset not in MULTINET_PRESETS:
        raise ConfigError(f"unknown CNN preset {preset!r}; choose from {sorted(MULTINET_PRESETS)}")
    p = MULTINET_PRESETS[preset]
    return MultiNetConfig(
        image_size=image_size,
        vgg=BackboneConfig("vgg-style", p["widths"], p["depth"], channels),
        residual=BackboneConfig("residual-style", p["widths"], p["depth"], channels),
        head=HeadConfig(p["cascade"], p["mlp"], p["feature_dim"], num_classes, dropout),
    )


def build_branch(kind: str, spec: ModelSpec, rng) -> Module:
    if kind in ("vit", "deit"):
        return build_vit(rng, spec.image_size, spec.vit_preset, distilled=kind == "deit",
                         num_classes=spec.num_classes, patch_size=spec.patch_size, channels=spec.channels,
                         dropout=spec.dropout)
    if kind == "multinet":
        return MultiNet(multinet_config(spec.cnn_preset, spec.image_size, spec.channels, spec.num_classes,
                                        spec.dropout), rng)
    p = MULTINET_PRESETS[spec.cnn_preset]
    bkind = "residual-style" if kind == "resnet-style" else "efficient-style"
    return CNNBranch(BackboneConfig(bkind, p["widths"], p["depth"], spec.channels), spec.image_size, rng,
                     spec.num_classes)


def build_model(spec: ModelSpec | str, rng: np.random.Generator | int = 0) -> Module:
    """Construct a single branch or a fused pair from a pairing name like ``"vit+multinet"``."""
    if isinstance(spec, str):
        spec = ModelSpec(pairing=spec)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    parts = parse_pairing(spec.pairing)
    if len(parts) == 1:
        model = build_branch(parts[0], spec, rng)
    else:
        a = build_branch(parts[0], spec, rng)
        b = build_branch(parts[1], spec, rng)
        model = FusedModel(a, b, rng, spec.num_classes)
    model.spec = ModelSpec(**{**spec.to_dict(), "pairing": "+".join(parts)})
    return model.set_rng(np.random.default_rng(rng.integers(2 ** 32)))


def branches_of(model: Module) -> list:
    """(name, module) for each top-level branch of a fused model, or the model itself."""
    if isinstance(model, FusedModel):
        return [("branch_a", model.branch_a), ("branch_b", model.branch_b)]
    return [("model", model)]
