"""RET-CLIP head: binocular fusion, report decoupling and the tripartite loss.

Both eyes go through the same image encoder. Their features are concatenated
(left first) and fused by a two-layer MLP into a patient-level image feature.
The report's class-token embedding is mapped by three independent MLPs into
left, right and patient text features, and each of the three levels
contributes a symmetric InfoNCE term over the in-batch cosine similarities.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .encoders import (
    ImageEncoderConfig,
    TextEncoderConfig,
    encode_images,
    encode_texts,
    init_image_encoder,
    init_text_encoder,
)
from .errors import ConfigError, DimensionError
from .nn import ParamStore
from .tensor import Tensor

LEVELS = ("left", "right", "patient")
MAX_LOGIT_SCALE = 100.0
CLIP_INIT_LOGIT_SCALE = math.log(1 / 0.07)


@dataclass(frozen=True)
class LossToggles:
    left: bool = True
    right: bool = True
    patient: bool = True

    @classmethod
    def from_name(cls, name: str) -> "LossToggles":
        """``all`` (tripartite), ``patient`` or ``monocular`` (left + right)."""
        try:
            return {
                "all": cls(True, True, True),
                "patient": cls(False, False, True),
                "monocular": cls(True, True, False),
            }[name]
        except KeyError:
            raise ConfigError(f"unknown loss configuration {name!r}") from None

    def enabled(self) -> tuple[str, ...]:
        return tuple(lv for lv in LEVELS if getattr(self, lv))


@dataclass(frozen=True)
class RetClipConfig:
    image: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    head_hidden: int | None = None
    init_logit_scale: float = CLIP_INIT_LOGIT_SCALE
    # multiplier on cosine similarity; 1.0 gives raw cosines as logits
    fixed_scale: float | None = None

    def __post_init__(self):
        if self.image.d_model != self.text.d_model:
            raise ConfigError(
                f"image d_model={self.image.d_model} differs from text d_model={self.text.d_model}")
        if self.fixed_scale is not None and not 0 < self.fixed_scale <= MAX_LOGIT_SCALE:
            raise ConfigError(f"fixed_scale must lie in (0, {MAX_LOGIT_SCALE}]")

    @property
    def d_model(self) -> int:
        return self.image.d_model

    @property
    def hidden(self) -> int:
        return self.head_hidden or self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RetClipConfig":
        d = dict(d)
        img = ImageEncoderConfig(**d.pop("image", {}))
        txt = TextEncoderConfig(**d.pop("text", {}))
        return cls(image=img, text=txt, **d)


@dataclass
class RetClipModel:
    config: RetClipConfig
    params: ParamStore

    @property
    def d_model(self) -> int:
        return self.config.d_model


@dataclass
class BatchFeatures:
    v_l: Tensor
    v_r: Tensor
    v_p: Tensor
    t0: Tensor
    t_l: Tensor
    t_r: Tensor
    t_p: Tensor

    def __post_init__(self):
        shapes = {m.shape for m in (self.v_l, self.v_r, self.v_p, self.t0, self.t_l, self.t_r, self.t_p)}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise DimensionError(f"batch features must share one [N, d] shape, got {shapes}")

    @property
    def n(self) -> int:
        return self.v_l.shape[0]

    def pair(self, level: str) -> tuple[Tensor, Tensor]:
        return {"left": (self.v_l, self.t_l), "right": (self.v_r, self.t_r),
                "patient": (self.v_p, self.t_p)}[level]


@dataclass
class SimilarityPair:
    p_v2t: Tensor
    p_t2v: Tensor


@dataclass
class LossBreakdown:
    """Per-level symmetric InfoNCE terms; ``total`` sums the enabled ones.

    ``directions`` holds the (image->text, text->image) CE values per level.
    """

    l_left: Tensor
    l_right: Tensor
    l_patient: Tensor
    total: Tensor
    enabled: tuple[str, ...]
    directions: dict[str, tuple[float, float]]

    def values(self) -> dict[str, float]:
        return {
            "loss_left": self.l_left.item(),
            "loss_right": self.l_right.item(),
            "loss_patient": self.l_patient.item(),
            "loss_total": self.total.item(),
        }


# ---------------------------------------------------------------------------
# construction

def init_params(config: RetClipConfig, seed: int) -> RetClipModel:
    """Fresh parameters; truncated-normal weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(np.uint64(seed % 2**64))
    store = ParamStore()
    d = config.d_model
    init_image_encoder(store, config.image, rng)
    init_text_encoder(store, config.text, rng)
    nn.init_mlp(store, "fuse", 2 * d, config.hidden, d, rng)
    for level in LEVELS:
        nn.init_mlp(store, f"decouple.{level}", d, config.hidden, d, rng)
    store.add("logit_scale", np.array(config.init_logit_scale))
    return RetClipModel(config, store)


def logit_scale_of(model: RetClipModel) -> Tensor:
    if model.config.fixed_scale is not None:
        return Tensor(math.log(model.config.fixed_scale))
    return model.params["logit_scale"]


# ---------------------------------------------------------------------------
# heads

def fuse_patient(model: RetClipModel, v_l: Tensor, v_r: Tensor) -> Tensor:
    if v_l.shape != v_r.shape or v_l.ndim != 2:
        raise DimensionError(f"fuse_patient: left {v_l.shape} and right {v_r.shape} must be equal [N, d]")
    return nn.two_layer_mlp(model.params, "fuse", T.concat_last(v_l, v_r))


def decouple_text(model: RetClipModel, t0: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    return tuple(nn.two_layer_mlp(model.params, f"decouple.{lv}", t0) for lv in LEVELS)


def _scale_multiplier(logit_scale) -> Tensor:
    ls = logit_scale if isinstance(logit_scale, Tensor) else Tensor(float(logit_scale))
    return T.clamp_max(T.exp(ls), MAX_LOGIT_SCALE)


def similarity_pair(v: Tensor, t: Tensor, logit_scale) -> SimilarityPair:
    """Scaled cosine similarities; ``logit_scale`` is the log of the multiplier."""
    if v.shape != t.shape or v.ndim != 2:
        raise DimensionError(f"similarity_pair: {v.shape} vs {t.shape}")
    cos = T.matmul(T.l2_normalize_rows(v), T.transpose(T.l2_normalize_rows(t)))
    p = T.mul(cos, _scale_multiplier(logit_scale))
    return SimilarityPair(p, T.transpose(p))


def _ce_diag(logits: Tensor) -> Tensor:
    n = logits.shape[0]
    diag = T.log_softmax_rows(logits)[np.arange(n), np.arange(n)]
    return T.scale(T.mean_all(diag), -1.0)


def infonce_directions(sim: SimilarityPair) -> tuple[Tensor, Tensor]:
    n = sim.p_v2t.shape
    if len(n) != 2 or n[0] != n[1] or sim.p_t2v.shape != n:
        raise DimensionError(f"infonce: similarity matrices must be square, got {n}")
    return _ce_diag(sim.p_v2t), _ce_diag(sim.p_t2v)


def infonce_symmetric(sim: SimilarityPair) -> Tensor:
    """Mean of the two cross-entropy directions with the diagonal as targets."""
    a, b = infonce_directions(sim)
    return T.scale(a + b, 0.5)


def tripartite_loss(feats: BatchFeatures, logit_scale, toggles: LossToggles = LossToggles()) -> LossBreakdown:
    enabled = toggles.enabled()
    if not enabled:
        raise ConfigError("tripartite_loss: at least one loss level must be enabled")
    terms: dict[str, Tensor] = {}
    directions: dict[str, tuple[float, float]] = {}
    for level in LEVELS:
        v, t = feats.pair(level)
        v2t, t2v = infonce_directions(similarity_pair(v, t, logit_scale))
        terms[level] = T.scale(v2t + t2v, 0.5)
        directions[level] = (v2t.item(), t2v.item())
    total = terms[enabled[0]]
    for level in enabled[1:]:
        total = total + terms[level]
    return LossBreakdown(terms["left"], terms["right"], terms["patient"], total, enabled, directions)


# ---------------------------------------------------------------------------
# end to end

def encode_batch(model: RetClipModel, left_images, right_images, report_tokens: Sequence[Sequence[int]]
                 ) -> BatchFeatures:
    left_images = np.asarray(left_images, dtype=T.DTYPE)
    right_images = np.asarray(right_images, dtype=T.DTYPE)
    n = left_images.shape[0]
    if right_images.shape != left_images.shape or len(report_tokens) != n:
        raise DimensionError("encode_batch: left, right and report batches must align")
    both = encode_images(model.params, model.config.image, np.concatenate([left_images, right_images]))
    v_l, v_r = both[:n], both[n:]
    v_p = fuse_patient(model, v_l, v_r)
    _, t0 = encode_texts(model.params, model.config.text, report_tokens)
    t_l, t_r, t_p = decouple_text(model, t0)
    return BatchFeatures(v_l, v_r, v_p, t0, t_l, t_r, t_p)


def forward_batch(model: RetClipModel, batch, toggles: LossToggles = LossToggles(),
                  left_images=None, right_images=None) -> tuple[BatchFeatures, LossBreakdown]:
    """Features and loss for a batch of patient triplets.

    Augmented pixel arrays may be passed via ``left_images``/``right_images``
    to override the triplets' own images.
    """
    if len(batch) < 1:
        raise ConfigError("forward_batch: empty batch")
    if left_images is None:
        left_images = np.stack([p.left_image for p in batch])
    if right_images is None:
        right_images = np.stack([p.right_image for p in batch])
    feats = encode_batch(model, left_images, right_images, [p.report_tokens for p in batch])
    return feats, tripartite_loss(feats, logit_scale_of(model), toggles)


def retrieval_top1(feats: BatchFeatures) -> dict[str, tuple[float, float]]:
    """In-batch top-1 accuracy (image->text, text->image) for each level."""
    out = {}
    with T.no_grad():
        for level in LEVELS:
            v, t = feats.pair(level)
            cos = similarity_pair(Tensor(v.data), Tensor(t.data), 0.0).p_v2t.data
            target = np.arange(cos.shape[0])
            out[level] = (float(np.mean(cos.argmax(axis=1) == target)),
                          float(np.mean(cos.argmax(axis=0) == target)))
    return out
