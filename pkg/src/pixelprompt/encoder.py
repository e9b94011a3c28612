"""Frozen patch-token transformer with a neighborhood-masked side path.

The backbone always runs plain query-key attention so token dynamics stay
stable layer to layer. At the last few layers a side path recomputes that
layer's attention with the configured variant and locality mask and sums the
results; the per-patch sums, unit-normalized, are the output feature map.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import sqrt

import numpy as np

from . import tensor as T
from .tensor import NEG_INF, Tensor
from .corpus import derive_seed

VARIANTS = ("qk", "vv", "qk-local", "vv-local")
LOCAL_VARIANTS = ("qk-local", "vv-local")


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 4
    embed_dim: int = 32
    layers: int = 2
    heads: int = 4
    neighbor_radius: float = 1.0
    variant: str = "vv-local"
    init_seed: int = 0
    fusion_depth: int | None = None  # None: min(3, layers)

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.neighbor_radius < 0:
            raise ValueError("neighbor_radius must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.fusion_depth is not None and not (1 <= self.fusion_depth <= self.layers):
            raise ValueError("fusion_depth must lie in [1, layers]")

    @property
    def resolved_fusion_depth(self) -> int:
        return self.fusion_depth if self.fusion_depth is not None else min(3, self.layers)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "layers": self.layers,
            "heads": self.heads,
            "neighbor_radius": self.neighbor_radius,
            "variant": self.variant,
            "init_seed": self.init_seed,
            "fusion_depth": self.fusion_depth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class FeatureMap:
    grid: np.ndarray  # (Hp, Wp, C), rows unit-norm
    cls: np.ndarray   # (C,), unit-norm

    @property
    def grid_shape(self):
        return self.grid.shape[:2]

    def flat(self) -> np.ndarray:
        return self.grid.reshape(-1, self.grid.shape[-1])


def build_locality_mask(grid_h: int, grid_w: int, radius: float) -> np.ndarray:
    """Additive (1+T, 1+T) mask: 0 between patches within Euclidean grid
    distance radius and from any patch to cls; NEG_INF elsewhere. The cls row
    is fully open."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    coords = np.stack(
        np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij"), axis=-1
    ).reshape(-1, 2)
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=-1)
    patch_block = np.where(d2 <= radius * radius, 0.0, NEG_INF)
    t = grid_h * grid_w
    mask = np.full((1 + t, 1 + t), NEG_INF)
    mask[1:, 1:] = patch_block
    mask[:, 0] = 0.0  # every patch may read the cls summary
    mask[0, :] = 0.0  # cls reads everything
    assert np.isfinite(np.diag(mask)).all()
    return mask


def downsample_mask_any(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Patch-level mask: a cell is set when any covered pixel is set."""
    h, w = mask.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"mask shape {mask.shape} not divisible by patch size {patch_size}")
    hp, wp = h // patch_size, w // patch_size
    blocks = mask.reshape(hp, patch_size, wp, patch_size)
    return (blocks.max(axis=(1, 3)) > 0).astype(np.float64)


class _Block:
    """One transformer layer's frozen weights.

    Variance-preserving 1/sqrt(fan_in) scales: the weights are never trained,
    so they must produce diverse random features as-is. Tiny training-style
    inits would leave the attention logits near zero and collapse every
    token's output onto the mean value vector.
    """

    def __init__(self, rng: np.random.Generator, dim: int):
        hidden = 4 * dim
        s = 1.0 / sqrt(dim)
        self.wq = Tensor(rng.normal(0.0, s, (dim, dim)))
        self.wk = Tensor(rng.normal(0.0, s, (dim, dim)))
        self.wv = Tensor(rng.normal(0.0, s, (dim, dim)))
        self.wo = Tensor(rng.normal(0.0, s, (dim, dim)))
        self.ln1_g = Tensor(np.ones(dim))
        self.ln1_b = Tensor(np.zeros(dim))
        self.ln2_g = Tensor(np.ones(dim))
        self.ln2_b = Tensor(np.zeros(dim))
        self.w1 = Tensor(rng.normal(0.0, s, (dim, hidden)))
        self.b1 = Tensor(np.zeros(hidden))
        self.w2 = Tensor(rng.normal(0.0, 1.0 / sqrt(hidden), (hidden, dim)))
        self.b2 = Tensor(np.zeros(dim))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    t, c = x.shape
    return T.transpose(T.reshape(x, (t, heads, c // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, t, d = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (t, h * d))


class Encoder:
    """Patchify + frozen transformer + masked side path. Weights are fixed at
    seeded initialization for the lifetime of the instance."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        c = config.embed_dim
        p2 = config.patch_size * config.patch_size
        self.patch_proj = Tensor(rng.normal(0.0, 1.0 / sqrt(p2), (p2, c)))
        self.patch_bias = Tensor(np.zeros(c))
        self.cls_token = Tensor(rng.normal(0.0, 0.25, (1, c)))
        self.blocks = [_Block(rng, c) for _ in range(config.layers)]
        self._pos_cache: dict[tuple[int, int], Tensor] = {}
        self._mask_cache: dict[tuple[int, int], np.ndarray] = {}

    def _positions(self, hp: int, wp: int) -> Tensor:
        key = (hp, wp)
        if key not in self._pos_cache:
            rng = np.random.default_rng(derive_seed(self.config.init_seed, "pos", hp, wp))
            # well below the patch-content scale (~0.5): positions must not
            # fingerprint cells or they drown per-cell content deviations
            self._pos_cache[key] = Tensor(
                rng.normal(0.0, 0.05, (1 + hp * wp, self.config.embed_dim))
            )
        return self._pos_cache[key]

    def grid_shape(self, image_shape) -> tuple[int, int]:
        h, w = image_shape
        p = self.config.patch_size
        if h % p or w % p:
            raise ValueError(f"image shape {image_shape} not divisible by patch size {p}")
        return h // p, w // p

    def patchify(self, image: np.ndarray) -> Tensor:
        """(1 + Hp*Wp, C) tokens: cls first, then patches row-major."""
        hp, wp = self.grid_shape(image.shape)
        p = self.config.patch_size
        patches = (
            image.reshape(hp, p, wp, p).transpose(0, 2, 1, 3).reshape(hp * wp, p * p)
        )
        tok = Tensor(patches) @ self.patch_proj + self.patch_bias
        tokens = T.concat([self.cls_token, tok], axis=0)
        return tokens + self._positions(hp, wp)

    def attend(self, tokens: Tensor, variant: str, mask: np.ndarray | None,
               layer_index: int = 0) -> Tensor:
        """Multi-head attention over tokens with the given logit variant and
        optional additive mask (shared across heads)."""
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        blk = self.blocks[layer_index]
        t1 = tokens.shape[0]
        if mask is not None and mask.shape != (t1, t1):
            raise ValueError(f"mask shape {mask.shape} does not match token count {t1}")
        heads = self.config.heads
        v = _split_heads(tokens @ blk.wv, heads)
        if variant.startswith("qk"):
            q = _split_heads(tokens @ blk.wq, heads)
            k = _split_heads(tokens @ blk.wk, heads)
            logits = T.scale(q @ T.transpose(k, (0, 2, 1)), 1.0 / sqrt(self.config.head_dim))
        else:
            logits = T.scale(v @ T.transpose(v, (0, 2, 1)), 1.0 / sqrt(self.config.head_dim))
        if mask is not None:
            logits = T.masked_fill(logits, mask)
        weights = T.softmax(logits, axis=-1)
        return _merge_heads(weights @ v) @ blk.wo

    def _mlp(self, x: Tensor, blk: _Block) -> Tensor:
        return T.gelu(x @ blk.w1 + blk.b1) @ blk.w2 + blk.b2

    def locality_mask(self, hp: int, wp: int) -> np.ndarray:
        key = (hp, wp)
        if key not in self._mask_cache:
            self._mask_cache[key] = build_locality_mask(hp, wp, self.config.neighbor_radius)
        return self._mask_cache[key]

    def encode(self, image: np.ndarray) -> FeatureMap:
        cfg = self.config
        hp, wp = self.grid_shape(image.shape)
        mask = self.locality_mask(hp, wp) if cfg.variant in LOCAL_VARIANTS else None
        fusion_from = cfg.layers - cfg.resolved_fusion_depth

        tokens = self.patchify(image)
        side_sum = None
        for i, blk in enumerate(self.blocks):
            normed = T.layer_norm(tokens) * blk.ln1_g + blk.ln1_b
            backbone_attn = self.attend(normed, "qk", None, i)
            if i >= fusion_from:
                if cfg.variant == "qk" and mask is None:
                    side = backbone_attn
                else:
                    side = self.attend(normed, cfg.variant, mask, i)
                side_sum = side if side_sum is None else side_sum + side
            tokens = tokens + backbone_attn
            normed2 = T.layer_norm(tokens) * blk.ln2_g + blk.ln2_b
            tokens = tokens + self._mlp(normed2, blk)

        patch_features = side_sum.data[1:]
        norms = np.sqrt((patch_features**2).sum(axis=-1, keepdims=True))
        grid = (patch_features / np.maximum(norms, 1e-30)).reshape(hp, wp, cfg.embed_dim)
        cls = tokens.data[0]
        cls = cls / max(float(np.sqrt((cls**2).sum())), 1e-30)
        return FeatureMap(grid=grid, cls=cls)


def encoder_for(config: EncoderConfig, variant: str | None = None) -> Encoder:
    """Encoder with an optional variant override (same frozen weights seed)."""
    if variant is not None and variant != config.variant:
        config = replace(config, variant=variant)
    return Encoder(config)
