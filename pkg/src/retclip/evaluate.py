"""Downstream adaptation: stratified splits, linear probing, fine-tuning, AUROC/AUPR."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import nn
from . import tensor as T
from .data import AugmentConfig, load_png, preprocess
from .encoders import encode_images
from .errors import ConfigError, IngestionError, ManifestParseError, SplitError, UndefinedMetricError
from .model import RetClipModel
from .nn import ParamStore
from .tensor import Tensor
from .train import AdamW, Checkpoint, load_checkpoint

logger = logging.getLogger(__name__)

TASK_KINDS = ("multiclass", "multilabel")


@dataclass
class LabeledImageDataset:
    """Images ``[n, H, W, 3]`` in [0, 1] with integer (multiclass) or multi-hot (multilabel) labels."""

    images: np.ndarray
    labels: np.ndarray
    task_kind: str
    n_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"task_kind must be one of {TASK_KINDS}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ConfigError("images and labels differ in length")
        if self.task_kind == "multiclass":
            if self.labels.ndim != 1 or (self.labels.size and not
                                          (0 <= self.labels.min() and self.labels.max() < self.n_classes)):
                raise ConfigError(f"multiclass labels must be integers in [0, {self.n_classes})")
        elif self.labels.shape[1:] != (self.n_classes,) or not np.isin(self.labels, (0, 1)).all():
            raise ConfigError(f"multilabel labels must be multi-hot rows of width {self.n_classes}")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledImageDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledImageDataset(self.images[idx], self.labels[idx], self.task_kind, self.n_classes, self.name)

    def one_hot(self) -> np.ndarray:
        if self.task_kind == "multilabel":
            return self.labels
        return np.eye(self.n_classes, dtype=np.int64)[self.labels]


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.56, 0.14, 0.3)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ConfigError("ratios must be three non-negative numbers")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"ratios {self.ratios} must sum to 1")


# ---------------------------------------------------------------------------
# splitting

def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer counts summing to ``n`` closest to ``n * ratios``; ties go to the earlier part."""
    exact = [n * r for r in ratios]
    counts = [int(math.floor(e)) for e in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _strata(ds: LabeledImageDataset) -> list[np.ndarray]:
    present = ds.one_hot().sum(axis=0)
    for k in range(ds.n_classes):
        if present[k] == 0:
            raise SplitError(f"class {k} has no samples")
    if ds.task_kind == "multiclass":
        return [np.flatnonzero(ds.labels == k) for k in range(ds.n_classes)]
    keys = [tuple(row) for row in ds.labels]
    return [np.array([i for i, kk in enumerate(keys) if kk == key]) for key in sorted(set(keys))]


def stratified_split(ds: LabeledImageDataset, spec: SplitSpec
                     ) -> tuple[LabeledImageDataset, LabeledImageDataset, LabeledImageDataset]:
    """Per-class (per label-set for multilabel) partition at ``spec.ratios``."""
    rng = np.random.default_rng(spec.seed)
    parts: list[list[int]] = [[], [], []]
    for members in _strata(ds):
        members = rng.permutation(members)
        counts = largest_remainder(len(members), spec.ratios)
        start = 0
        for j, c in enumerate(counts):
            parts[j].extend(members[start:start + c].tolist())
            start += c
    return tuple(ds.subset(rng.permutation(np.array(p, dtype=np.int64))) for p in parts)


# ---------------------------------------------------------------------------
# metrics

def _binary_inputs(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ConfigError(f"scores {s.shape} and labels {y.shape} differ")
    if not np.isin(y, (0, 1)).all():
        raise ConfigError("labels must be binary")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic (wins + ties/2) / (P*N) via average ranks."""
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Average precision; tied scores keep their input order."""
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPR needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    tp = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    precisions = (tp / ranks)[hits]
    return math.fsum(precisions.tolist()) / n_pos


def per_class_metrics(scores: np.ndarray, ds_or_onehot, ) -> list[dict | None]:
    """One-vs-rest AUROC/AUPR for each column; ``None`` where undefined."""
    onehot = ds_or_onehot.one_hot() if isinstance(ds_or_onehot, LabeledImageDataset) else ds_or_onehot
    out = []
    for k in range(onehot.shape[1]):
        try:
            out.append({"auroc": auroc(scores[:, k], onehot[:, k]), "aupr": aupr(scores[:, k], onehot[:, k])})
        except UndefinedMetricError:
            out.append(None)
    return out


def aggregate_metrics(per_class: Sequence[dict | None], task_kind: str = "multiclass") -> dict:
    """Macro average over classes with defined metrics; the rest are reported as excluded."""
    if task_kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {task_kind!r}")
    defined = [m for m in per_class if m is not None]
    excluded = [k for k, m in enumerate(per_class) if m is None]
    if not defined:
        raise UndefinedMetricError("no class has a defined metric")
    return {
        "auroc": float(np.mean([m["auroc"] for m in defined])),
        "aupr": float(np.mean([m["aupr"] for m in defined])),
        "excluded_classes": excluded,
        "n_excluded": len(excluded),
    }


# ---------------------------------------------------------------------------
# heads

def init_head(d: int, n_classes: int, seed: int) -> ParamStore:
    store = ParamStore()
    nn.init_linear(store, "head", d, n_classes, np.random.default_rng([seed % 2**63, 7]))
    return store


def head_logits(head: ParamStore, feats: Tensor) -> Tensor:
    return nn.linear(head, "head", feats)


def head_probabilities(logits: np.ndarray, task_kind: str) -> np.ndarray:
    """Softmax for multiclass heads, sigmoid for multilabel heads."""
    if task_kind == "multiclass":
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    return 0.5 * (1.0 + np.tanh(0.5 * logits))


def head_loss(logits: Tensor, labels: np.ndarray, task_kind: str) -> Tensor:
    if task_kind == "multiclass":
        n = logits.shape[0]
        picked = T.log_softmax_rows(logits)[np.arange(n), labels]
        return T.scale(T.mean_all(picked), -1.0)
    y = Tensor(labels.astype(np.float64))
    # BCE with logits: softplus(z) - y*z
    return T.mean_all(T.softplus(logits) - T.mul(y, logits))


# ---------------------------------------------------------------------------
# adaptation

@dataclass(frozen=True)
class AdaptConfig:
    epochs: int = 50
    batch_size: int = 16
    probe_lr: float = 1e-2
    finetune_lr: float = 1e-4
    # head learning rate during fine-tuning; None uses probe_lr
    finetune_head_lr: float | None = None
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


def _as_model(source) -> RetClipModel:
    if isinstance(source, RetClipModel):
        return source
    if isinstance(source, Checkpoint):
        return source.to_model()
    return load_checkpoint(source).to_model()


def eval_transform(model: RetClipModel, norm_mean=(0.5, 0.5, 0.5), norm_std=(0.5, 0.5, 0.5)) -> AugmentConfig:
    return AugmentConfig.identity(model.config.image.image_size, norm_mean, norm_std)


def _prepare(images: np.ndarray, tf: AugmentConfig) -> np.ndarray:
    return np.stack([preprocess(im, tf) for im in images]) if len(images) else np.zeros((0, tf.out_size, tf.out_size, 3))


def extract_features(model: RetClipModel, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Frozen image-encoder features ``[n, d]`` for already-preprocessed images."""
    out = []
    with T.no_grad():
        for s in range(0, len(images), chunk):
            out.append(encode_images(model.params, model.config.image, images[s:s + chunk]).data)
    return np.concatenate(out) if out else np.zeros((0, model.d_model))


def _encoder_snapshot(model: RetClipModel) -> dict[str, bytes]:
    return {n: t.data.tobytes() for n, t in model.params.subset("img_enc.")}


def _macro_auroc(scores: np.ndarray, ds: LabeledImageDataset) -> float | None:
    if len(ds) == 0:
        return None
    try:
        return aggregate_metrics(per_class_metrics(scores, ds), ds.task_kind)["auroc"]
    except UndefinedMetricError:
        return None


def _result(mode: str, ds: LabeledImageDataset, cfg: AdaptConfig, best_epoch: int, scores: np.ndarray,
            test: LabeledImageDataset) -> dict:
    per_class = per_class_metrics(scores, test)
    summary = aggregate_metrics(per_class, test.task_kind)
    return {
        "dataset": ds.name,
        "mode": mode,
        "seed": cfg.seed,
        "auroc": summary["auroc"],
        "aupr": summary["aupr"],
        "per_class": per_class,
        "excluded_classes": summary["excluded_classes"],
        "epochs": cfg.epochs,
        "best_epoch": best_epoch,
    }


def linear_probe(source, ds: LabeledImageDataset, spec: SplitSpec | None = None,
                 cfg: AdaptConfig = AdaptConfig()) -> dict:
    """Train only a linear head on frozen image features; select the best-validation epoch."""
    model = _as_model(source)
    spec = spec or SplitSpec(seed=cfg.seed)
    before = _encoder_snapshot(model)
    train, val, test = stratified_split(ds, spec)
    tf = eval_transform(model)
    f_train, f_val, f_test = (extract_features(model, _prepare(s.images, tf)) for s in (train, val, test))

    head = init_head(model.d_model, ds.n_classes, cfg.seed)
    opt = AdamW(head, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed % 2**63, 11])
    best, best_epoch, best_state = -np.inf, cfg.epochs, head.state()
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(train))
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            head.zero_grad()
            loss = head_loss(head_logits(head, Tensor(f_train[idx])), train.labels[idx], ds.task_kind)
            T.backward(loss)
            opt.step(cfg.probe_lr)
        with T.no_grad():
            val_scores = head_probabilities(head_logits(head, Tensor(f_val)).data, ds.task_kind)
        score = _macro_auroc(val_scores, val)
        if score is not None and score > best:
            best, best_epoch, best_state = score, epoch, head.state()
    if best == -np.inf:
        best_state, best_epoch = head.state(), cfg.epochs
    head.load_state(best_state)
    with T.no_grad():
        test_scores = head_probabilities(head_logits(head, Tensor(f_test)).data, ds.task_kind)
    if _encoder_snapshot(model) != before:
        raise AssertionError("linear probe modified encoder parameters")
    return _result("probe", ds, cfg, best_epoch, test_scores, test)


def fine_tune(source, ds: LabeledImageDataset, spec: SplitSpec | None = None,
              cfg: AdaptConfig = AdaptConfig(), return_model: bool = False):
    """Train image encoder and linear head jointly; select the best-validation epoch.

    The model is deep-copied first, so the caller's parameters stay intact.
    """
    base = _as_model(source)
    model = RetClipModel(base.config, base.params.copy())
    spec = spec or SplitSpec(seed=cfg.seed)
    train, val, test = stratified_split(ds, spec)
    tf = eval_transform(model)
    x_train, x_val, x_test = (_prepare(s.images, tf) for s in (train, val, test))

    head = init_head(model.d_model, ds.n_classes, cfg.seed)
    enc_names = [n for n, _ in model.params.subset("img_enc.")]
    enc_opt = AdamW(model.params, weight_decay=cfg.weight_decay, names=enc_names)
    head_opt = AdamW(head, weight_decay=cfg.weight_decay)
    head_lr = cfg.finetune_head_lr if cfg.finetune_head_lr is not None else cfg.probe_lr
    rng = np.random.default_rng([cfg.seed % 2**63, 11])
    icfg = model.config.image

    def snapshot():
        return {n: model.params[n].data.copy() for n in enc_names}, head.state()

    def scores_for(x):
        return head_probabilities(head_logits(head, Tensor(extract_features(model, x))).data, ds.task_kind)

    best, best_epoch, best_state = -np.inf, cfg.epochs, snapshot()
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(train))
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            model.params.zero_grad()
            head.zero_grad()
            feats = encode_images(model.params, icfg, x_train[idx])
            T.backward(head_loss(head_logits(head, feats), train.labels[idx], ds.task_kind))
            enc_opt.step(cfg.finetune_lr)
            head_opt.step(head_lr)
        score = _macro_auroc(scores_for(x_val), val)
        if score is not None and score > best:
            best, best_epoch, best_state = score, epoch, snapshot()
    if best == -np.inf:
        best_state, best_epoch = snapshot(), cfg.epochs
    for n, arr in best_state[0].items():
        model.params[n].data = arr
    head.load_state(best_state[1])
    result = _result("finetune", ds, cfg, best_epoch, scores_for(x_test), test)
    return (result, model) if return_model else result


# ---------------------------------------------------------------------------
# files

def load_labeled_manifest(path, name: str | None = None) -> LabeledImageDataset:
    """Read ``#task=... n_classes=K`` then ``image_path<TAB>label_spec`` lines."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").split("\n")
    if not lines or not lines[0].startswith("#"):
        raise ManifestParseError(path, 1, "missing '#task=... n_classes=K' header")
    opts = dict(tok.split("=", 1) for tok in lines[0][1:].split() if "=" in tok)
    task = opts.get("task")
    if task not in TASK_KINDS or "n_classes" not in opts:
        raise ManifestParseError(path, 1, f"bad header {lines[0]!r}")
    try:
        k = int(opts["n_classes"])
    except ValueError:
        raise ManifestParseError(path, 1, "n_classes must be an integer") from None
    images, labels = [], []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.rstrip("\r").split("\t")
        if len(fields) != 2:
            raise ManifestParseError(path, line_no, f"expected 2 tab-separated fields, got {len(fields)}")
        img_path, spec = fields
        try:
            ids = [int(x) for x in spec.split(",") if x.strip() != ""]
        except ValueError:
            raise ManifestParseError(path, line_no, f"bad label spec {spec!r}") from None
        if task == "multiclass":
            if len(ids) != 1:
                raise ManifestParseError(path, line_no, "multiclass rows need exactly one label")
            labels.append(ids[0])
        else:
            row = np.zeros(k, dtype=np.int64)
            if any(not 0 <= i < k for i in ids):
                raise ManifestParseError(path, line_no, f"label outside [0, {k})")
            row[ids] = 1
            labels.append(row)
        full = Path(img_path) if Path(img_path).is_absolute() else path.parent / img_path
        if not full.exists():
            raise IngestionError(f"{path}:{line_no}: image file {full} not found")
        images.append(load_png(full))
    return LabeledImageDataset(np.array(images), np.array(labels), task, k, name or path.stem)


def write_results(records: Sequence[dict], path) -> None:
    Path(path).write_text(json.dumps(list(records), indent=2, sort_keys=True) + "\n", encoding="utf-8")
