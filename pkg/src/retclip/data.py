"""Synthetic binocular cohorts, augmentation, toy tokenizer and manifest I/O.

Each synthetic patient has two fundus-like images and one report. Every
condition has a fixed visual signature (a coloured disk at a class-specific
position); the report names each eye's findings behind ``left:``/``right:``
markers, so the per-eye information is present in the text but mixed at the
patient level.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .encoders import CLS_ID, PAD_ID, UNK_ID
from .errors import ConfigError, IngestionError, ManifestParseError

logger = logging.getLogger(__name__)

SPECIAL_TOKENS = ("[cls]", "[pad]", "[unk]")
LEFT_MARK = "left:"
RIGHT_MARK = "right:"
NORMAL_REPORT = "fundus normal in both eyes"
CONDITION_NAMES = (
    "drusen", "hemorrhage", "exudate", "cupping", "neovascularization", "atrophy",
    "edema", "pigmentation", "tortuosity", "scar", "detachment", "myopic",
)
BASE_WORDS = (LEFT_MARK, RIGHT_MARK, "normal", "fundus", "in", "both", "eyes", "and", "with")

MANIFEST_NAME = "manifest.tsv"
VOCAB_NAME = "vocab.txt"
EYE_LABELS_NAME = "eye_labels.tsv"


# ---------------------------------------------------------------------------
# vocabulary / tokenizer

class Vocabulary:
    """Word list whose line number is the token id (0/1/2 = cls/pad/unk)."""

    def __init__(self, words: Sequence[str]):
        words = list(words)
        if tuple(words[:3]) != SPECIAL_TOKENS:
            raise ConfigError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(words)) != len(words):
            raise ConfigError("vocabulary contains duplicate tokens")
        self.words = words
        self._ids = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def id_of(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(SPECIAL_TOKENS + BASE_WORDS + CONDITION_NAMES)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.split("\n") if line != ""])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")


def tokenize(text: str, vocab: Vocabulary | None = None, max_len: int | None = None) -> list[int]:
    """Whitespace split, cls prepended, unknown words mapped to unk.

    With ``max_len`` the result is truncated/right-padded the same way the
    text encoder does it.
    """
    vocab = vocab or Vocabulary.default()
    ids = [CLS_ID] + [vocab.id_of(w) for w in text.split()]
    if max_len is not None:
        if len(ids) > max_len:
            ids = ids[: max_len - 1]
        ids = ids + [PAD_ID] * (max_len - len(ids))
    return ids


def detokenize(ids: Iterable[int], vocab: Vocabulary | None = None) -> str:
    vocab = vocab or Vocabulary.default()
    words = [vocab.words[i] for i in ids if i not in (CLS_ID, PAD_ID)]
    return " ".join(words)


# ---------------------------------------------------------------------------
# cohort

@dataclass
class PatientTriplet:
    patient_id: str
    left_image: np.ndarray
    right_image: np.ndarray
    report_tokens: list[int]
    report_text: str = ""
    # per-eye condition indices; synthetic side channel, never used in pre-training
    left_labels: tuple[int, ...] | None = None
    right_labels: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.left_image.shape != self.right_image.shape:
            raise ConfigError(f"{self.patient_id}: left/right image shapes differ")
        if not self.report_tokens or self.report_tokens[0] != CLS_ID:
            raise ConfigError(f"{self.patient_id}: report tokens must start with cls")


@dataclass(frozen=True)
class SyntheticCohortConfig:
    n_patients: int = 64
    image_size: int = 32
    n_conditions: int = 4
    condition_prior: float | tuple[float, ...] = 0.3
    noise_std: float = 0.03
    template_mix: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 0:
            raise ConfigError("n_patients must be >= 0")
        if not 2 <= self.n_conditions <= len(CONDITION_NAMES):
            raise ConfigError(f"n_conditions must be in [2, {len(CONDITION_NAMES)}]")
        if self.image_size < 8:
            raise ConfigError("image_size must be >= 8")
        priors = self.priors()
        if len(priors) != self.n_conditions or not all(0.0 <= p <= 1.0 for p in priors):
            raise ConfigError("condition_prior must give one probability in [0, 1] per condition")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")

    def priors(self) -> tuple[float, ...]:
        p = self.condition_prior
        if isinstance(p, (int, float)):
            return (float(p),) * self.n_conditions
        return tuple(float(x) for x in p)


_PALETTE = np.array([
    [0.95, 0.95, 0.55], [0.45, 0.02, 0.02], [1.00, 0.85, 0.30], [0.98, 0.98, 0.98],
    [0.20, 0.55, 0.20], [0.55, 0.50, 0.45], [0.60, 0.70, 0.95], [0.08, 0.06, 0.05],
    [0.85, 0.25, 0.65], [0.35, 0.35, 0.80], [0.10, 0.40, 0.55], [0.75, 0.60, 0.10],
])
_FUNDUS_RGB = np.array([0.62, 0.30, 0.14])


def condition_signature(k: int, n_conditions: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """(mask [size, size], rgb) of condition ``k``'s disk."""
    angle = 2 * math.pi * k / n_conditions
    cy = size / 2 + 0.24 * size * math.sin(angle)
    cx = size / 2 + 0.24 * size * math.cos(angle)
    radius = max(1.5, 0.11 * size)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    mask = ((yy - cy) ** 2 + (xx - cx) ** 2) <= radius**2
    return mask, _PALETTE[k]


def render_eye(labels: Sequence[int], cfg: SyntheticCohortConfig, rng: np.random.Generator) -> np.ndarray:
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    fundus = ((yy - s / 2) ** 2 + (xx - s / 2) ** 2) <= (0.47 * s) ** 2
    img = np.zeros((s, s, 3))
    img[fundus] = _FUNDUS_RGB
    for k in labels:
        mask, rgb = condition_signature(k, cfg.n_conditions, s)
        img[mask] = rgb
    if cfg.noise_std > 0:
        img = img + rng.normal(0.0, cfg.noise_std, img.shape)
    # quantised to the 8-bit grid so PNG round-trips are exact
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def compose_report(left: Sequence[int], right: Sequence[int], template_mix: bool,
                   rng: np.random.Generator) -> str:
    if not left and not right:
        return NORMAL_REPORT
    if not template_mix:
        words = [LEFT_MARK] + ([CONDITION_NAMES[k] for k in left] or ["normal"])
        words += [RIGHT_MARK] + ([CONDITION_NAMES[k] for k in right] or ["normal"])
        return " ".join(words)
    items = [(LEFT_MARK, CONDITION_NAMES[k]) for k in left] or [(LEFT_MARK, "normal")]
    items += [(RIGHT_MARK, CONDITION_NAMES[k]) for k in right] or [(RIGHT_MARK, "normal")]
    order = rng.permutation(len(items))
    return " ".join(f"{items[i][0]} {items[i][1]}" for i in order)


def patient_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed % 2**63, index])


def generate_patient(index: int, cfg: SyntheticCohortConfig, vocab: Vocabulary | None = None) -> PatientTriplet:
    rng = patient_rng(cfg.seed, index)
    priors = np.array(cfg.priors())
    left = tuple(int(k) for k in np.flatnonzero(rng.random(cfg.n_conditions) < priors))
    right = tuple(int(k) for k in np.flatnonzero(rng.random(cfg.n_conditions) < priors))
    left_img = render_eye(left, cfg, rng)
    right_img = render_eye(right, cfg, rng)
    text = compose_report(left, right, cfg.template_mix, rng)
    return PatientTriplet(
        patient_id=f"P{index:05d}",
        left_image=left_img,
        right_image=right_img,
        report_tokens=tokenize(text, vocab),
        report_text=text,
        left_labels=left,
        right_labels=right,
    )


def generate_cohort(cfg: SyntheticCohortConfig, vocab: Vocabulary | None = None) -> list[PatientTriplet]:
    """Deterministic in ``cfg``; patient ``i`` only depends on ``(seed, i)``."""
    return [generate_patient(i, cfg, vocab) for i in range(cfg.n_patients)]


def eye_label_matrix(cohort: Sequence[PatientTriplet], n_conditions: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack every eye image with its multi-hot label row (left eyes first per patient)."""
    images, labels = [], []
    for p in cohort:
        for img, lab in ((p.left_image, p.left_labels), (p.right_image, p.right_labels)):
            row = np.zeros(n_conditions, dtype=np.int64)
            row[list(lab or ())] = 1
            images.append(img)
            labels.append(row)
    return np.array(images), np.array(labels)


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentConfig:
    crop_scale_range: tuple[float, float] = (0.8, 1.0)
    out_size: int = 32
    hflip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.1
    norm_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    norm_std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop_scale_range {self.crop_scale_range} must satisfy 0 < lo <= hi <= 1")
        if not 0 <= self.hflip_prob <= 1:
            raise ConfigError("hflip_prob must be in [0, 1]")
        if min(self.brightness, self.contrast, self.saturation) < 0:
            raise ConfigError("jitter strengths must be >= 0")
        if self.out_size < 1:
            raise ConfigError("out_size must be positive")
        if any(s <= 0 for s in self.norm_std):
            raise ConfigError("norm_std entries must be positive")

    @classmethod
    def identity(cls, out_size: int, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)) -> "AugmentConfig":
        return cls((1.0, 1.0), out_size, 0.0, 0.0, 0.0, 0.0, tuple(mean), tuple(std))


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of ``[H, W, C]``; same size is the identity."""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()

    def coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    fx = fx[None, :, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy[:, None, None]) + bot * fy[:, None, None]


def normalize(image: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    return (image - np.asarray(cfg.norm_mean)) / np.asarray(cfg.norm_std)


def preprocess(image: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """Deterministic evaluation path: resize then normalise."""
    return normalize(resize_bilinear(np.asarray(image, dtype=np.float64), cfg.out_size, cfg.out_size), cfg)


def _gray(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random crop -> bilinear resize -> h-flip -> colour jitter -> normalisation."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    lo, hi = cfg.crop_scale_range
    area = rng.uniform(lo, hi)
    side = int(round(math.sqrt(area * h * w)))
    if 1 <= side <= min(h, w):
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        img = img[top:top + side, left:left + side]
    img = resize_bilinear(img, cfg.out_size, cfg.out_size)
    if rng.random() < cfg.hflip_prob:
        img = img[:, ::-1]
    if cfg.brightness > 0:
        img = img * rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    if cfg.contrast > 0:
        m = _gray(img).mean()
        img = (img - m) * rng.uniform(1 - cfg.contrast, 1 + cfg.contrast) + m
    if cfg.saturation > 0:
        g = _gray(img)[..., None]
        img = g + (img - g) * rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
    img = np.clip(img, 0.0, 1.0)
    return normalize(np.ascontiguousarray(img), cfg)


# ---------------------------------------------------------------------------
# files

def save_png(image: np.ndarray, path) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_cohort(cohort: Sequence[PatientTriplet], out_dir, vocab: Vocabulary | None = None,
                n_conditions: int | None = None) -> Path:
    """Write PNGs, ``manifest.tsv`` and ``vocab.txt`` (plus per-eye labels when known)."""
    vocab = vocab or Vocabulary.default()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines, label_lines = [], []
    for p in cohort:
        lp, rp = f"images/{p.patient_id}_L.png", f"images/{p.patient_id}_R.png"
        save_png(p.left_image, out / lp)
        save_png(p.right_image, out / rp)
        text = p.report_text or detokenize(p.report_tokens, vocab)
        if "\t" in text or "\n" in text:
            raise ConfigError(f"{p.patient_id}: report text may not contain tabs or newlines")
        lines.append(f"{p.patient_id}\t{lp}\t{rp}\t{text}\n")
        if p.left_labels is not None and p.right_labels is not None:
            label_lines.append(f"{lp}\t{','.join(map(str, p.left_labels))}\n")
            label_lines.append(f"{rp}\t{','.join(map(str, p.right_labels))}\n")
    (out / MANIFEST_NAME).write_text("".join(lines), encoding="utf-8")
    vocab.save(out / VOCAB_NAME)
    if n_conditions is not None and len(label_lines) == 2 * len(cohort):
        header = f"#task=multilabel n_classes={n_conditions}\n"
        (out / EYE_LABELS_NAME).write_text(header + "".join(label_lines), encoding="utf-8")
    return out / MANIFEST_NAME


def load_manifest(path, vocab: Vocabulary | None = None) -> list[PatientTriplet]:
    """Read ``patient_id<TAB>left<TAB>right<TAB>report`` lines.

    Image paths are relative to the manifest's directory. A ``vocab.txt``
    next to the manifest is used when no vocabulary is given.
    """
    path = Path(path)
    base = path.parent
    if vocab is None:
        vocab = Vocabulary.load(base / VOCAB_NAME) if (base / VOCAB_NAME).exists() else Vocabulary.default()
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise ManifestParseError(path, line_no, f"expected 4 tab-separated fields, got {len(fields)}")
            pid, lp, rp, text = fields
            images = []
            for p in (lp, rp):
                full = base / p if not os.path.isabs(p) else Path(p)
                if not full.exists():
                    raise IngestionError(f"patient {pid}: image file {full} not found")
                images.append(load_png(full))
            out.append(PatientTriplet(pid, images[0], images[1], tokenize(text, vocab), text))
    logger.info("loaded %d patients from %s", len(out), path)
    return out
