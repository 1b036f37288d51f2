"""ViT-style image encoder and transformer text encoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, VocabularyError
from .nn import ParamStore, TransformerBlockConfig
from .tensor import Tensor

CLS_ID = 0
PAD_ID = 1
UNK_ID = 2


@dataclass(frozen=True)
class ImageEncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    mlp_ratio: float = 4.0
    projection: bool = False

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size={self.image_size} is not a multiple of patch_size={self.patch_size}")
        if self.n_blocks < 0:
            raise ConfigError("n_blocks must be >= 0")
        TransformerBlockConfig(self.d_model, self.n_heads, self.mlp_ratio)

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def block(self) -> TransformerBlockConfig:
        return TransformerBlockConfig(self.d_model, self.n_heads, self.mlp_ratio)


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int = 256
    max_len: int = 16
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    mlp_ratio: float = 4.0
    cls_id: int = CLS_ID
    pad_id: int = PAD_ID

    def __post_init__(self):
        if self.cls_id == self.pad_id:
            raise ConfigError("cls_id and pad_id must differ")
        if not (0 <= self.cls_id < self.vocab_size and 0 <= self.pad_id < self.vocab_size):
            raise ConfigError("cls_id and pad_id must be valid vocabulary ids")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        if self.n_blocks < 0:
            raise ConfigError("n_blocks must be >= 0")
        TransformerBlockConfig(self.d_model, self.n_heads, self.mlp_ratio)

    @property
    def block(self) -> TransformerBlockConfig:
        return TransformerBlockConfig(self.d_model, self.n_heads, self.mlp_ratio)


@dataclass
class EncodedImage:
    v: Tensor


@dataclass
class EncodedText:
    t_seq: Tensor
    t0: Tensor


# ---------------------------------------------------------------------------
# image side

def patchify(images: np.ndarray, patch_size: int, image_size: int | None = None) -> np.ndarray:
    """Split ``[H, W, C]`` (or ``[B, H, W, C]``) into row-major flattened patches.

    Each patch is flattened channel-last, giving ``[n_patches, p*p*C]``.
    """
    images = np.asarray(images, dtype=T.DTYPE)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4:
        raise DimensionError(f"patchify: expected [H, W, C] image(s), got shape {images.shape}")
    b, h, w, c = images.shape
    if image_size is not None and (h != image_size or w != image_size):
        raise DimensionError(f"patchify: image is {h}x{w}, encoder expects {image_size}x{image_size}")
    if h % patch_size or w % patch_size:
        raise DimensionError(f"patchify: {h}x{w} is not divisible into {patch_size}-pixel patches")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, gh, patch_size, gw, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, gh * gw, patch_size * patch_size * c)
    return x[0] if single else x


def init_image_encoder(store: ParamStore, cfg: ImageEncoderConfig, rng: np.random.Generator,
                       prefix: str = "img_enc") -> None:
    nn.init_linear(store, f"{prefix}.patch_embed", cfg.patch_dim, cfg.d_model, rng)
    store.add(f"{prefix}.cls_token", nn.trunc_normal(rng, (1, cfg.d_model)))
    store.add(f"{prefix}.pos_embed", nn.trunc_normal(rng, (cfg.n_patches + 1, cfg.d_model)))
    for i in range(cfg.n_blocks):
        nn.init_transformer_block(store, f"{prefix}.block{i}", cfg.block, rng)
    nn.init_layer_norm(store, f"{prefix}.ln_final", cfg.d_model)
    if cfg.projection:
        nn.init_linear(store, f"{prefix}.proj", cfg.d_model, cfg.d_model, rng)


def encode_images(store: ParamStore, cfg: ImageEncoderConfig, images: np.ndarray,
                  prefix: str = "img_enc") -> Tensor:
    """Encode a batch ``[B, H, W, C]`` into class-token features ``[B, d]``."""
    images = np.asarray(images, dtype=T.DTYPE)
    if images.ndim != 4 or images.shape[-1] != cfg.channels:
        raise DimensionError(f"encode_images: expected [B, H, W, {cfg.channels}], got {images.shape}")
    patches = Tensor(patchify(images, cfg.patch_size, cfg.image_size))
    b = patches.shape[0]
    x = nn.linear(store, f"{prefix}.patch_embed", patches)
    cls = T.embedding(store[f"{prefix}.cls_token"], np.zeros((b, 1), dtype=np.int64))
    x = T.concat((cls, x), axis=1) + store[f"{prefix}.pos_embed"]
    for i in range(cfg.n_blocks):
        x = nn.transformer_block(store, f"{prefix}.block{i}", x, cfg.block)
    x = nn.layer_norm(store, f"{prefix}.ln_final", x)
    v = x[:, 0, :]
    if cfg.projection:
        v = nn.linear(store, f"{prefix}.proj", v)
    return v


def encode_image(store: ParamStore, cfg: ImageEncoderConfig, image: np.ndarray,
                 prefix: str = "img_enc") -> EncodedImage:
    image = np.asarray(image, dtype=T.DTYPE)
    if image.ndim != 3:
        raise DimensionError(f"encode_image: expected [H, W, C], got {image.shape}")
    v = encode_images(store, cfg, image[None], prefix)
    return EncodedImage(T.reshape(v, (cfg.d_model,)))


# ---------------------------------------------------------------------------
# text side

def pad_tokens(tokens: Sequence[int], cfg: TextEncoderConfig) -> np.ndarray:
    """Right-pad to ``max_len``; overlength input keeps its first ``max_len - 1`` ids."""
    ids = [int(t) for t in tokens]
    if not ids or ids[0] != cfg.cls_id:
        raise ContractError("token sequence must start with the cls id")
    if len(ids) > cfg.max_len:
        ids = ids[: cfg.max_len - 1]
    bad = [t for t in ids if not 0 <= t < cfg.vocab_size]
    if bad:
        raise VocabularyError(f"token ids {bad} outside vocabulary of size {cfg.vocab_size}")
    return np.array(ids + [cfg.pad_id] * (cfg.max_len - len(ids)), dtype=np.int64)


def init_text_encoder(store: ParamStore, cfg: TextEncoderConfig, rng: np.random.Generator,
                      prefix: str = "txt_enc") -> None:
    store.add(f"{prefix}.tok_embed", nn.trunc_normal(rng, (cfg.vocab_size, cfg.d_model)))
    store.add(f"{prefix}.pos_embed", nn.trunc_normal(rng, (cfg.max_len, cfg.d_model)))
    for i in range(cfg.n_blocks):
        nn.init_transformer_block(store, f"{prefix}.block{i}", cfg.block, rng)
    nn.init_layer_norm(store, f"{prefix}.ln_final", cfg.d_model)


def encode_texts(store: ParamStore, cfg: TextEncoderConfig, token_batch: Sequence[Sequence[int]],
                 prefix: str = "txt_enc") -> tuple[Tensor, Tensor]:
    """Encode a batch of token sequences. Returns ``(t_seq [B, l, d], t0 [B, d])``."""
    ids = np.stack([pad_tokens(t, cfg) for t in token_batch])
    x = nn.embedding_lookup(ids, store[f"{prefix}.tok_embed"]) + store[f"{prefix}.pos_embed"]
    for i in range(cfg.n_blocks):
        x = nn.transformer_block(store, f"{prefix}.block{i}", x, cfg.block)
    t_seq = nn.layer_norm(store, f"{prefix}.ln_final", x)
    return t_seq, t_seq[:, 0, :]


def encode_text(store: ParamStore, cfg: TextEncoderConfig, tokens: Sequence[int],
                prefix: str = "txt_enc") -> EncodedText:
    t_seq, _ = encode_texts(store, cfg, [tokens], prefix)
    t_seq = T.reshape(t_seq, (cfg.max_len, cfg.d_model))
    return EncodedText(t_seq, t_seq[0])
