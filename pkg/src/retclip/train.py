"""Pre-training loop: warmup schedule, AdamW, batching and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import AugmentConfig, PatientTriplet, augment
from .errors import (
    CheckpointBoundsError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    NonFiniteLossError,
    NumericError,
)
from .model import LossToggles, RetClipConfig, RetClipModel, forward_batch, init_params
from .nn import ParamStore

logger = logging.getLogger(__name__)

LOG_FIELDS = ("step", "lr", "loss_left", "loss_right", "loss_patient", "loss_total")
NO_DECAY = ("logit_scale",)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 10
    peak_lr: float = 3e-4
    warmup_steps: int = 50
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    loss: str = "all"
    schedule: str = "constant"
    # overrides epochs when set
    max_steps: int | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.epochs < 0 or (self.max_steps is not None and self.max_steps < 0):
            raise ConfigError("epochs and max_steps must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ConfigError("betas must lie in [0, 1)")
        LossToggles.from_name(self.loss)

    @property
    def toggles(self) -> LossToggles:
        return LossToggles.from_name(self.loss)

    def total_steps(self, n_patients: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return self.epochs * math.ceil(n_patients / self.batch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["augment"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["augment"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        aug = dict(d.pop("augment", {}))
        for k in ("crop_scale_range", "norm_mean", "norm_std"):
            if k in aug:
                aug[k] = tuple(aug[k])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(augment=AugmentConfig(**aug), **d)


# ---------------------------------------------------------------------------
# schedule and optimiser

def lr_at_step(step: int, config: TrainConfig, total_steps: int | None = None) -> float:
    """Linear ramp from 0 to ``peak_lr`` over ``warmup_steps``, then flat.

    With ``schedule="cosine"`` and a known ``total_steps`` the post-warmup
    phase decays to zero along a half cosine instead.
    """
    if step < 0:
        raise ConfigError("step must be >= 0")
    w = config.warmup_steps
    if step < w:
        return config.peak_lr * step / w
    if config.schedule == "cosine" and total_steps and total_steps > w:
        frac = min(1.0, (step - w) / (total_steps - w))
        return config.peak_lr * 0.5 * (1 + math.cos(math.pi * frac))
    return config.peak_lr


def adamw_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
                 lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One AdamW update; returns new (param, m, v). ``step`` counts from 1."""
    if step < 1:
        raise ConfigError("AdamW step counter starts at 1")
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    param = param * (1 - lr * weight_decay)
    param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


class AdamW:
    """AdamW over a :class:`ParamStore`, decoupled decay except for ``no_decay`` names."""

    def __init__(self, store: ParamStore, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, no_decay: Sequence[str] = NO_DECAY,
                 names: Sequence[str] | None = None):
        self.store = store
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.names = list(names) if names is not None else store.names()
        self.m = {n: np.zeros(store[n].shape) for n in self.names}
        self.v = {n: np.zeros(store[n].shape) for n in self.names}
        self.t = 0

    def step(self, lr: float) -> None:
        grads = {}
        for n in self.names:
            g = self.store[n].grad
            g = np.zeros(self.store[n].shape) if g is None else g
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {n}")
            grads[n] = g
        self.t += 1
        for n in self.names:
            p = self.store[n]
            wd = 0.0 if n in self.no_decay else self.weight_decay
            p.data, self.m[n], self.v[n] = adamw_update(
                p.data, grads[n], self.m[n], self.v[n], self.t, lr, self.betas, self.eps, wd)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: b"RCLP" | u32 version | u64 header length | header JSON (utf-8)
#         | u64 payload length | little-endian float32 payload

MAGIC = b"RCLP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_U64 = struct.Struct("<Q")


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    tensors: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] | None = None
    optimizer_step: int = 0

    @classmethod
    def from_model(cls, model: RetClipModel, train_config: TrainConfig | None = None,
                   optimizer: AdamW | None = None) -> "Checkpoint":
        opt = None
        if optimizer is not None:
            opt = {f"m/{n}": a.astype("<f4") for n, a in optimizer.m.items()}
            opt.update({f"v/{n}": a.astype("<f4") for n, a in optimizer.v.items()})
        return cls(
            model_config=model.config.to_dict(),
            train_config=train_config.to_dict() if train_config else {},
            tensors={n: t.data.astype("<f4") for n, t in model.params.items()},
            optimizer=opt,
            optimizer_step=optimizer.t if optimizer is not None else 0,
        )

    def to_model(self) -> RetClipModel:
        cfg = RetClipConfig.from_dict(self.model_config)
        model = init_params(cfg, 0)
        model.params.load_state({n: a.astype(np.float64) for n, a in self.tensors.items()})
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries, chunks, offset = [], [], 0
    named = [(n, ckpt.tensors[n]) for n in sorted(ckpt.tensors)]
    if ckpt.optimizer:
        named += [(f"optim.{n}", ckpt.optimizer[n]) for n in sorted(ckpt.optimizer)]
    for name, arr in named:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "dtype": "float32", "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "optimizer_step": ckpt.optimizer_step,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(_U64.pack(len(payload)))
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size or blob[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    _, version, hlen = _PREFIX.unpack_from(blob, 0)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    pos = _PREFIX.size
    if len(blob) < pos + hlen + _U64.size:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from None
    pos += hlen
    (plen,) = _U64.unpack_from(blob, pos)
    pos += _U64.size
    payload = blob[pos:]
    if len(payload) < plen:
        raise CheckpointTruncatedError(f"{path}: payload has {len(payload)} of {plen} bytes")
    if len(payload) > plen:
        raise CheckpointFormatError(f"{path}: {len(payload) - plen} trailing bytes after payload")

    tensors, optim, spans = {}, {}, []
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        start, end = e["offset"], e["offset"] + nbytes
        if e.get("dtype") != "float32" or e.get("nbytes", nbytes) != nbytes:
            raise CheckpointFormatError(f"{path}: bad manifest entry for {e['name']}")
        if start < 0 or end > plen:
            raise CheckpointBoundsError(f"{path}: tensor {e['name']} spans [{start}, {end}) beyond payload of {plen}")
        spans.append((start, end, e["name"]))
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape).copy()
        if e["name"].startswith("optim."):
            optim[e["name"][len("optim."):]] = arr
        else:
            tensors[e["name"]] = arr
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointBoundsError(f"{path}: tensors {n0} and {n1} overlap")
    return Checkpoint(header["model_config"], header["train_config"], tensors,
                      optim or None, header.get("optimizer_step", 0))


# ---------------------------------------------------------------------------
# pre-training

@dataclass
class PretrainResult:
    model: RetClipModel
    log: list[dict]
    checkpoint_path: Path | None


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Augmentation stream for one optimisation step, independent of all others."""
    return np.random.default_rng([seed % 2**63, 1, step])


def _augment_batch(batch: Sequence[PatientTriplet], cfg: AugmentConfig, rng: np.random.Generator):
    left = np.stack([augment(p.left_image, cfg, rng) for p in batch])
    right = np.stack([augment(p.right_image, cfg, rng) for p in batch])
    return left, right


def write_metrics_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_metrics_csv(rows))


def format_metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in rows:
        w.writerow([r["step"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])
    return buf.getvalue()


def pretrain(cohort: Sequence[PatientTriplet], model_config: RetClipConfig, train_config: TrainConfig,
             out_path=None, log_path=None, model: RetClipModel | None = None) -> PretrainResult:
    """Run contrastive pre-training; deterministic in ``train_config.seed``.

    A non-finite loss or gradient aborts with :class:`NonFiniteLossError`
    after writing the last parameters that produced a finite loss.
    """
    if not cohort:
        raise ConfigError("pretrain: cohort is empty")
    cfg = train_config
    model = model or init_params(model_config, cfg.seed)
    opt = AdamW(model.params, cfg.betas, cfg.eps, cfg.weight_decay)
    order_rng = np.random.default_rng([cfg.seed % 2**63, 0])
    n = len(cohort)
    total = cfg.total_steps(n)
    toggles = cfg.toggles
    log: list[dict] = []
    step = 0
    last_good = model.params.state()

    def dump():
        if out_path is not None:
            save_checkpoint(Checkpoint.from_model(model, cfg), out_path)
        if log_path is not None:
            write_metrics_csv(log, log_path)

    while step < total:
        perm = order_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            if step >= total:
                break
            batch = [cohort[i] for i in perm[start:start + cfg.batch_size]]
            step += 1
            lr = lr_at_step(step, cfg, total)
            left, right = _augment_batch(batch, cfg.augment, step_rng(cfg.seed, step))
            model.params.zero_grad()
            try:
                _, losses = forward_batch(model, batch, toggles, left, right)
                values = losses.values()
            except NumericError as exc:
                values = {"error": str(exc), "loss_total": math.nan}
            if not all(isinstance(v, str) or math.isfinite(v) for v in values.values()):
                model.params.load_state(last_good)
                dump()
                raise NonFiniteLossError(f"non-finite loss at step {step}: {values}")
            last_good = model.params.state()
            T.backward(losses.total)
            try:
                opt.step(lr)
            except NumericError as exc:
                model.params.load_state(last_good)
                dump()
                raise NonFiniteLossError(f"step {step}: {exc}") from exc
            log.append({"step": step, "lr": lr, **values})
            if step % 50 == 0 or step == total:
                logger.info("step %d/%d lr %.3g loss %.4f", step, total, lr, values["loss_total"])
    dump()
    return PretrainResult(model, log, Path(out_path) if out_path is not None else None)
