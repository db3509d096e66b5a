"""Vision Transformer branch, with an optional DeiT-style distillation token."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import functional as F
from .nn.layers import GELU, Dropout, LayerNorm, Linear, Module, Parameter
from .errors import ConfigError
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class PatchEmbedConfig:
    image_h: int = 224
    image_w: int = 224
    patch_size: int = 16
    channels: int = 3
    embed_dim: int = 64

    def __post_init__(self):
        p = self.patch_size
        if p < 1 or self.image_h % p or self.image_w % p:
            raise ConfigError(
                f"image size H={self.image_h}, W={self.image_w} is not divisible by patch size P={p}"
            )

    @property
    def num_patches(self) -> int:
        return (self.image_h * self.image_w) // (self.patch_size ** 2)

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 4
    heads: int = 4
    embed_dim: int = 64
    mlp_dim: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_dim: int = 128
    dropout: float = 0.1
    num_classes: int = 8
    distilled: bool = False

    @property
    def patch(self) -> PatchEmbedConfig:
        return PatchEmbedConfig(self.image_size, self.image_size, self.patch_size, self.channels, self.embed_dim)

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.depth, self.heads, self.embed_dim, self.mlp_dim, self.dropout)


VIT_PRESETS = {
    "micro": dict(embed_dim=8, depth=1, heads=2, mlp_dim=16),
    "tiny": dict(embed_dim=64, depth=4, heads=4, mlp_dim=128),
    "base": dict(embed_dim=768, depth=12, heads=12, mlp_dim=3072),
}


def patchify(x: Tensor, cfg: PatchEmbedConfig) -> Tensor:
    """(B,C,H,W) -> (B,N,P*P*C), patches in raster order.

    Each patch is flattened row-major over (P, P, C), i.e. pixel by pixel with
    channels innermost, matching the H x W x C image layout.
    """
    b, c, h, w = x.shape
    p = cfg.patch_size
    if h % p or w % p:
        raise ConfigError(f"image size H={h}, W={w} is not divisible by patch size P={p}")
    if (h, w, c) != (cfg.image_h, cfg.image_w, cfg.channels):
        raise ShapeError(f"input {x.shape} does not match patch config {cfg}")
    gh, gw = h // p, w // p
    t = x.reshape(b, c, gh, p, gw, p)
    t = t.transpose(0, 2, 4, 3, 5, 1)
    return t.reshape(b, gh * gw, p * p * c)


class TokenSet(Module):
    """Class token, optional distillation token and learned positional table."""

    def __init__(self, num_patches: int, dim: int, rng: np.random.Generator, distilled: bool = False):
        self.class_token = Parameter(rng.normal(0.0, 0.02, (1, 1, dim)))
        self.distillation_token = Parameter(rng.normal(0.0, 0.02, (1, 1, dim))) if distilled else None
        self.num_special = 2 if distilled else 1
        self.positional = Parameter(rng.normal(0.0, 0.02, (1, num_patches + self.num_special, dim)))


def embed(patches: Tensor, tokens: TokenSet, proj: Linear) -> Tensor:
    """Project patches, prepend special tokens, add positional embeddings."""
    b, n, _ = patches.shape
    if patches.shape[-1] != proj.in_features:
        raise ShapeError(f"patch dim {patches.shape[-1]} does not match projection input {proj.in_features}")
    x = proj(patches)
    d = x.shape[-1]
    special = [T.broadcast_to(tokens.class_token, (b, 1, d))]
    if tokens.distillation_token is not None:
        special.append(T.broadcast_to(tokens.distillation_token, (b, 1, d)))
    x = T.concat(special + [x], axis=1)
    if tokens.positional.shape[1] != x.shape[1]:
        raise ShapeError(f"positional table length {tokens.positional.shape[1]} != sequence length {x.shape[1]}")
    return x + tokens.positional


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention with fused QKV projection.

    The most recent attention weights are kept in ``last_attention``
    (shape B, heads, S, S) for inspection.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"embed_dim {dim} is not divisible by heads {heads}")
        self.dim, self.heads = dim, heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.last_attention = None

    def forward(self, x: Tensor) -> Tensor:
        b, s, d = x.shape
        if d != self.dim:
            raise ShapeError(f"attention expects embed dim {self.dim}, got {x.shape}")
        h, dh = self.heads, d // self.heads
        qkv = self.qkv(x).reshape(b, s, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        attn = F.softmax(scores, axis=-1)
        self.last_attention = attn.data
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, s, d)
        return self.proj(out)


def multi_head_attention(x: Tensor, params: MultiHeadAttention) -> Tensor:
    return params(x)


class EncoderBlock(Module):
    """Pre-norm transformer block: x + MHA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.norm1 = LayerNorm(cfg.embed_dim)
        self.attn = MultiHeadAttention(cfg.embed_dim, cfg.heads, rng)
        self.drop1 = Dropout(cfg.dropout)
        self.norm2 = LayerNorm(cfg.embed_dim)
        self.fc1 = Linear(cfg.embed_dim, cfg.mlp_dim, rng)
        self.act = GELU()
        self.fc2 = Linear(cfg.mlp_dim, cfg.embed_dim, rng)
        self.drop2 = Dropout(cfg.dropout)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.drop1(self.attn(self.norm1(x)))
        return x + self.drop2(self.fc2(self.act(self.fc1(self.norm2(x)))))


class VisionTransformer(Module):
    """ViT classifier.  ``forward`` returns ``{"features", "logits"}`` where the
    features are the final-normed class-token embedding (width ``embed_dim``).

    With ``distilled=True`` the model carries a second special token and head;
    see :meth:`forward` for the extra outputs.
    """

    kind = "vit"

    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        self.cfg = cfg
        patch = cfg.patch
        self.patch_cfg = patch
        self.proj = Linear(patch.patch_dim, cfg.embed_dim, rng)
        self.tokens = TokenSet(patch.num_patches, cfg.embed_dim, rng, distilled=cfg.distilled)
        self.drop = Dropout(cfg.dropout)
        self.blocks = [EncoderBlock(cfg.encoder, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.embed_dim)
        self.head = Linear(cfg.embed_dim, cfg.num_classes, rng)
        self.distill_head = Linear(cfg.embed_dim, cfg.num_classes, rng) if cfg.distilled else None

    @property
    def feature_dim(self) -> int:
        return self.cfg.embed_dim

    def encode(self, x: Tensor) -> Tensor:
        """Full token sequence after the encoder and final norm, shape (B, N+T, D)."""
        if x.ndim != 4 or x.shape[1:] != (self.cfg.channels, self.cfg.image_size, self.cfg.image_size):
            raise ShapeError(
                f"expected input (B,{self.cfg.channels},{self.cfg.image_size},{self.cfg.image_size}), got {x.shape}"
            )
        h = embed(patchify(x, self.patch_cfg), self.tokens, self.proj)
        h = self.drop(h)
        for block in self.blocks:
            h = block(h)
        return self.norm(h)

    def attention_maps(self) -> list:
        return [blk.attn.last_attention for blk in self.blocks]

    def forward(self, x: Tensor, teacher_logits: Tensor | None = None) -> dict:
        h = self.encode(x)
        cls = h[:, 0]
        if not self.cfg.distilled:
            return {"features": cls, "logits": self.head(cls)}
        return deit_heads(self, h, teacher_logits)


def deit_heads(model: VisionTransformer, h: Tensor, teacher_logits: Tensor | None) -> dict:
    """Class/distillation heads on an encoded DeiT sequence.

    ``combined`` holds the mean of the two head softmaxes (prediction rule);
    ``logits`` is the mean of the two head logits; ``features`` the mean of
    the two token embeddings.
    """
    cls, dist = h[:, 0], h[:, 1]
    class_logits = model.head(cls)
    distill_logits = model.distill_head(dist)
    if teacher_logits is not None and teacher_logits.shape != class_logits.shape:
        raise ShapeError(f"teacher_logits shape {teacher_logits.shape} != student logits {class_logits.shape}")
    combined = (F.softmax(class_logits.detach()).data + F.softmax(distill_logits.detach()).data) / 2
    return {
        "features": (cls + dist) * 0.5,
        "class_logits": class_logits,
        "distill_logits": distill_logits,
        "logits": (class_logits + distill_logits) * 0.5,
        "combined": combined,
        "teacher_logits": teacher_logits,
    }


def vit_forward(x: Tensor, model: VisionTransformer) -> dict:
    return model(x)


def deit_forward(x: Tensor, model: VisionTransformer, teacher_logits: Tensor | None = None) -> dict:
    if not model.cfg.distilled:
        raise ConfigError("deit_forward needs a model built with distilled=True")
    return model(x, teacher_logits)


def build_vit(rng: np.random.Generator, image_size: int = 224, preset: str = "tiny", distilled: bool = False,
              num_classes: int = 8, patch_size: int | None = None, channels: int = 3, dropout: float = 0.1,
              ) -> VisionTransformer:
    if preset not in VIT_PRESETS:
        raise ConfigError(f"unknown ViT preset {preset!r}; choose from {sorted(VIT_PRESETS)}")
    if patch_size is None:
        patch_size = 4 if preset == "micro" else 16
    cfg = ViTConfig(image_size=image_size, patch_size=patch_size, channels=channels, num_classes=num_classes,
                    distilled=distilled, dropout=dropout, **VIT_PRESETS[preset])
    model = VisionTransformer(cfg, rng)
    # train mode works out of the box; train() replaces this stream with its own
    return model.set_rng(np.random.default_rng(rng.integers(2 ** 32)))
