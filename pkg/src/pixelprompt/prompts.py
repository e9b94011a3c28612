"""Learnable prompt parameters, the frozen text-side encoder, and score maps.

A prompt is prefix + class token + suffix in a continuous embedding space;
the frozen two-layer transformer maps either sequence to a unit embedding.
Score maps pair the normal/abnormal embeddings against image features and
softmax the two channels per cell.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from math import sqrt
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .corpus import derive_seed
from .encoder import FeatureMap


@dataclass(frozen=True)
class PromptConfig:
    prefix_len: int = 8
    normal_suffix_len: int = 4
    abnormal_suffix_len: int = 4
    text_dim: int = 32
    embed_dim: int = 32       # must match the image encoder's output width
    init_std: float = 0.02
    init_seed: int = 0
    text_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "prefix_len": self.prefix_len,
            "normal_suffix_len": self.normal_suffix_len,
            "abnormal_suffix_len": self.abnormal_suffix_len,
            "text_dim": self.text_dim,
            "embed_dim": self.embed_dim,
            "init_std": self.init_std,
            "init_seed": self.init_seed,
            "text_seed": self.text_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptConfig":
        return cls(**d)


class PromptPair:
    """Shared learnable prefix, frozen per-class token, and the two learnable
    suffixes. The prefix is stored once so both branches accumulate into it."""

    def __init__(self, config: PromptConfig, class_name: str):
        self.config = config
        self.class_name = class_name
        rng = np.random.default_rng(derive_seed(config.init_seed, "prompt-init", class_name))
        ct = config.text_dim
        self.prefix = Tensor(
            rng.normal(0.0, config.init_std, (config.prefix_len, ct)), requires_grad=True
        )
        cls_rng = np.random.default_rng(derive_seed("class-token", class_name))
        self.class_token = Tensor(cls_rng.normal(0.0, config.init_std, (1, ct)))
        self.normal_suffix = Tensor(
            rng.normal(0.0, config.init_std, (config.normal_suffix_len, ct)),
            requires_grad=True,
        )
        self.abnormal_suffix = Tensor(
            rng.normal(0.0, config.init_std, (config.abnormal_suffix_len, ct)),
            requires_grad=True,
        )

    def normal_sequence(self) -> Tensor:
        parts = [p for p in (self.prefix, self.class_token, self.normal_suffix) if p.shape[0]]
        return T.concat(parts, axis=0)

    def abnormal_sequence(self) -> Tensor:
        parts = [p for p in (self.prefix, self.class_token, self.abnormal_suffix) if p.shape[0]]
        return T.concat(parts, axis=0)

    def parameters(self) -> tuple[Tensor, ...]:
        return (self.prefix, self.normal_suffix, self.abnormal_suffix)

    def normal_parameters(self) -> tuple[Tensor, ...]:
        return (self.prefix, self.normal_suffix)

    def abnormal_parameters(self) -> tuple[Tensor, ...]:
        return (self.prefix, self.abnormal_suffix)

    def detached_clone(self) -> "PromptPair":
        clone = PromptPair.__new__(PromptPair)
        clone.config = self.config
        clone.class_name = self.class_name
        clone.prefix = Tensor(self.prefix.data.copy())
        clone.class_token = Tensor(self.class_token.data.copy())
        clone.normal_suffix = Tensor(self.normal_suffix.data.copy())
        clone.abnormal_suffix = Tensor(self.abnormal_suffix.data.copy())
        return clone


@dataclass
class AnchorPair:
    """Frozen reference embeddings the live prompts are guided against."""

    normal: np.ndarray    # (C,), unit
    abnormal: np.ndarray  # (C,), unit
    round_index: int = 0
    # mean training-cell feature; set at initial-anchor construction and used
    # only to pick the warm-start operating point, never serialized
    feature_mean: np.ndarray | None = None


class TextEncoder:
    """Frozen seeded 2-layer transformer from token embeddings to one unit
    embedding: mean-pool over tokens, project to the image feature width."""

    LAYERS = 2

    def __init__(self, config: PromptConfig, max_len: int | None = None):
        self.config = config
        if max_len is None:
            max_len = config.prefix_len + 1 + max(
                config.normal_suffix_len, config.abnormal_suffix_len
            )
        self.max_len = max(1, max_len)
        rng = np.random.default_rng(derive_seed(config.text_seed, "text-encoder"))
        ct = config.text_dim
        s = 1.0 / sqrt(ct)
        # positions sit at the prompt-embedding init scale so learnable
        # content and position start comparable; the blocks are frozen random
        # features and use variance-preserving scales like the image encoder
        self.pos = Tensor(rng.normal(0.0, config.init_std, (self.max_len, ct)))
        self.block_weights = []
        for _ in range(self.LAYERS):
            self.block_weights.append(
                {
                    "wq": Tensor(rng.normal(0.0, s, (ct, ct))),
                    "wk": Tensor(rng.normal(0.0, s, (ct, ct))),
                    "wv": Tensor(rng.normal(0.0, s, (ct, ct))),
                    "wo": Tensor(rng.normal(0.0, s, (ct, ct))),
                    "ln1_g": Tensor(np.ones(ct)),
                    "ln1_b": Tensor(np.zeros(ct)),
                    "ln2_g": Tensor(np.ones(ct)),
                    "ln2_b": Tensor(np.zeros(ct)),
                    "w1": Tensor(rng.normal(0.0, s, (ct, 4 * ct))),
                    "b1": Tensor(np.zeros(4 * ct)),
                    "w2": Tensor(rng.normal(0.0, 1.0 / sqrt(4 * ct), (4 * ct, ct))),
                    "b2": Tensor(np.zeros(ct)),
                }
            )
        # orthogonal block keeps the projection well-conditioned, so every
        # output direction is reachable from the pooled stream at unit cost
        dim = max(ct, config.embed_dim)
        q, r = np.linalg.qr(rng.normal(0.0, 1.0, (dim, dim)))
        q = q * np.sign(np.diag(r))
        self.out_proj = Tensor(q[:ct, : config.embed_dim])

    def _blocks(self, x: Tensor) -> Tensor:
        # single-head attention; sequences are a dozen tokens
        scale = 1.0 / sqrt(self.config.text_dim)
        batched = len(x.shape) == 3
        perm = (0, 2, 1) if batched else (1, 0)
        for w in self.block_weights:
            normed = T.layer_norm(x) * w["ln1_g"] + w["ln1_b"]
            q, k, v = normed @ w["wq"], normed @ w["wk"], normed @ w["wv"]
            att = T.softmax(T.scale(q @ T.transpose(k, perm), scale), axis=-1)
            x = x + (att @ v) @ w["wo"]
            normed2 = T.layer_norm(x) * w["ln2_g"] + w["ln2_b"]
            x = x + T.gelu(normed2 @ w["w1"] + w["b1"]) @ w["w2"] + w["b2"]
        return x

    def encode(self, sequence: Tensor) -> Tensor:
        """(L, Ct) embeddings -> (C,) unit embedding, differentiable in the input."""
        if len(sequence.shape) != 2 or sequence.shape[0] == 0:
            raise ValueError(f"expected a non-empty (L, Ct) sequence, got shape {sequence.shape}")
        length = sequence.shape[0]
        if length > self.max_len:
            raise ValueError(f"sequence length {length} exceeds positional table {self.max_len}")
        x = sequence + Tensor(self.pos.data[:length])
        x = self._blocks(x)
        pooled = T.reshape(x.mean(axis=0), (1, self.config.text_dim))
        return T.l2_normalize(T.reshape(pooled @ self.out_proj, (self.config.embed_dim,)))

    def encode_pair(self, prompts: PromptPair) -> tuple[Tensor, Tensor]:
        """Both prompt embeddings. Equal-length suffixes share one batched pass."""
        n_seq = prompts.normal_sequence()
        a_seq = prompts.abnormal_sequence()
        if n_seq.shape[0] != a_seq.shape[0]:
            return self.encode(n_seq), self.encode(a_seq)
        length, ct = n_seq.shape
        stacked = T.reshape(T.concat([n_seq, a_seq], axis=0), (2, length, ct))
        x = stacked + Tensor(self.pos.data[:length])
        x = self._blocks(x)
        pooled = x.mean(axis=1)  # (2, Ct)
        pair = T.l2_normalize(pooled @ self.out_proj, axis=-1)  # (2, C)
        c = self.config.embed_dim
        t_n = T.reshape(Tensor([[1.0, 0.0]]) @ pair, (c,))
        t_a = T.reshape(Tensor([[0.0, 1.0]]) @ pair, (c,))
        return t_n, t_a

    def encode_pair_detached(self, prompts: PromptPair) -> tuple[np.ndarray, np.ndarray]:
        """Embedding values only, with no graph built."""
        t_n, t_a = self.encode_pair(prompts.detached_clone())
        return t_n.data.copy(), t_a.data.copy()


@dataclass
class ScoreMapPair:
    """Per-cell normality/abnormality probabilities plus the raw logit maps."""

    normal: Tensor        # (T, 1) probabilities
    abnormal: Tensor      # (T, 1)
    raw_normal: Tensor    # (T, 1) temperature-scaled logits
    raw_abnormal: Tensor
    temperature: float
    grid_shape: tuple[int, int]

    def normal_map(self) -> np.ndarray:
        return self.normal.data.reshape(self.grid_shape)

    def abnormal_map(self) -> np.ndarray:
        return self.abnormal.data.reshape(self.grid_shape)


def _as_feature_tensor(features) -> tuple[Tensor, tuple[int, int]]:
    if isinstance(features, FeatureMap):
        return Tensor(features.flat()), features.grid_shape
    if isinstance(features, Tensor):
        if len(features.shape) != 2:
            raise ValueError(f"expected (T, C) features, got shape {features.shape}")
        return features, (features.shape[0], 1)
    raise TypeError("features must be a FeatureMap or a (T, C) Tensor")


def score_maps(features, t_normal: Tensor, t_abnormal: Tensor, temperature: float,
               ) -> ScoreMapPair:
    """Softmax-paired similarity maps of the two prompt embeddings."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    f, grid_shape = _as_feature_tensor(features)
    c = f.shape[1]
    for name, t in (("features", f), ("normal embedding", t_normal),
                    ("abnormal embedding", t_abnormal)):
        norms = np.sqrt((t.data**2).sum(axis=-1))
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError(f"{name} must be unit-norm (max deviation {np.max(np.abs(norms - 1.0)):.2e})")
    logits_n = f @ T.reshape(t_normal, (c, 1))
    logits_a = f @ T.reshape(t_abnormal, (c, 1))
    raw = T.scale(T.concat([logits_n, logits_a], axis=1), temperature)  # (T, 2)
    probs = T.softmax(raw, axis=1)
    sel_n, sel_a = Tensor([[1.0], [0.0]]), Tensor([[0.0], [1.0]])
    pair = ScoreMapPair(
        normal=probs @ sel_n,
        abnormal=probs @ sel_a,
        raw_normal=raw @ sel_n,
        raw_abnormal=raw @ sel_a,
        temperature=float(temperature),
        grid_shape=grid_shape,
    )
    total = pair.normal.data + pair.abnormal.data
    assert np.max(np.abs(total - 1.0)) < 1e-9
    return pair


def upsample_scores(grid: np.ndarray, scale: int) -> np.ndarray:
    """Bilinear upsampling by an integer factor, half-pixel centers, edges
    clamped. Convex interpolation keeps values inside the input range."""
    if scale < 1:
        raise ValueError("scale must be a positive integer")
    hp, wp = grid.shape
    h, w = hp * scale, wp * scale
    ys = np.clip((np.arange(h) + 0.5) / scale - 0.5, 0.0, hp - 1.0)
    xs = np.clip((np.arange(w) + 0.5) / scale - 0.5, 0.0, wp - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, hp - 1)
    x1 = np.minimum(x0 + 1, wp - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bot = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


# ---------------------------------------------------------------------------
# Checkpoint io: one JSON header line, then little-endian float64 blocks in a
# fixed order (prefix, class token, normal suffix, abnormal suffix, anchors).

CHECKPOINT_FORMAT = "prompt-pair-v1"
_BLOCK_ORDER = ("prefix", "class_token", "normal_suffix", "abnormal_suffix",
                "anchor_normal", "anchor_abnormal")


def save_checkpoint(path, prompts: PromptPair, anchors: AnchorPair,
                    extra: dict | None = None) -> None:
    cfg = prompts.config
    header = {
        "format": CHECKPOINT_FORMAT,
        "class_name": prompts.class_name,
        "prompt_config": cfg.to_dict(),
        "round_index": anchors.round_index,
        "extra": extra or {},
    }
    blocks = {
        "prefix": prompts.prefix.data,
        "class_token": prompts.class_token.data,
        "normal_suffix": prompts.normal_suffix.data,
        "abnormal_suffix": prompts.abnormal_suffix.data,
        "anchor_normal": anchors.normal,
        "anchor_abnormal": anchors.abnormal,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for name in _BLOCK_ORDER:
            f.write(np.ascontiguousarray(blocks[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[PromptPair, AnchorPair, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    raw = path.read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    cfg = PromptConfig.from_dict(header["prompt_config"])
    prompts = PromptPair(cfg, header["class_name"])
    shapes = {
        "prefix": (cfg.prefix_len, cfg.text_dim),
        "class_token": (1, cfg.text_dim),
        "normal_suffix": (cfg.normal_suffix_len, cfg.text_dim),
        "abnormal_suffix": (cfg.abnormal_suffix_len, cfg.text_dim),
        "anchor_normal": (cfg.embed_dim,),
        "anchor_abnormal": (cfg.embed_dim,),
    }
    offset = nl + 1
    arrays = {}
    for name in _BLOCK_ORDER:
        shape = shapes[name]
        count = int(np.prod(shape))
        block = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        if block.size != count:
            raise ValueError(f"{path}: truncated checkpoint block {name}")
        arrays[name] = block.reshape(shape).astype(np.float64)
        offset += count * 8
    prompts.prefix.data = arrays["prefix"]
    prompts.class_token.data = arrays["class_token"]
    prompts.normal_suffix.data = arrays["normal_suffix"]
    prompts.abnormal_suffix.data = arrays["abnormal_suffix"]
    anchors = AnchorPair(
        normal=arrays["anchor_normal"],
        abnormal=arrays["anchor_abnormal"],
        round_index=int(header["round_index"]),
    )
    return prompts, anchors, header
