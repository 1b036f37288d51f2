"""Parameterised layers as plain functions over a named :class:`ParamStore`.

Each layer comes in two halves: ``init_*`` registers its parameters under a
dotted prefix, and the forward function reads them back by the same prefix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

INIT_STD = 0.02


class ParamStore:
    """Ordered (lexicographic) map from hierarchical name to trainable tensor."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def tensors(self) -> list[Tensor]:
        return [self._params[n] for n in self.names()]

    def subset(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.items() if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise KeyError(f"state keys do not match parameters: {sorted(missing)}")
        for n, arr in state.items():
            if arr.shape != self._params[n].shape:
                raise DimensionError(f"{n}: shape {arr.shape} != {self._params[n].shape}")
            self._params[n].data = np.array(arr, dtype=T.DTYPE)

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for n, t in self.items():
            other.add(n, t.data.copy())
        return other

    def num_parameters(self) -> int:
        return sum(t.size for t in self._params.values())


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


@dataclass(frozen=True)
class TransformerBlockConfig:
    d_model: int
    n_heads: int
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0:
            raise ConfigError("d_model and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def hidden(self) -> int:
        return max(1, int(round(self.d_model * self.mlp_ratio)))


# ---------------------------------------------------------------------------
# init

def init_linear(store: ParamStore, name: str, din: int, dout: int, rng: np.random.Generator) -> None:
    store.add(f"{name}.weight", trunc_normal(rng, (din, dout)))
    store.add(f"{name}.bias", np.zeros(dout))


def init_layer_norm(store: ParamStore, name: str, d: int) -> None:
    store.add(f"{name}.gain", np.ones(d))
    store.add(f"{name}.bias", np.zeros(d))


def init_mlp(store: ParamStore, name: str, din: int, hidden: int, dout: int,
             rng: np.random.Generator) -> None:
    init_linear(store, f"{name}.fc1", din, hidden, rng)
    init_linear(store, f"{name}.fc2", hidden, dout, rng)


def init_attention(store: ParamStore, name: str, d: int, rng: np.random.Generator) -> None:
    for proj in ("wq", "wk", "wv", "wo"):
        init_linear(store, f"{name}.{proj}", d, d, rng)


def init_transformer_block(store: ParamStore, name: str, cfg: TransformerBlockConfig,
                           rng: np.random.Generator) -> None:
    init_layer_norm(store, f"{name}.ln1", cfg.d_model)
    init_attention(store, f"{name}.attn", cfg.d_model, rng)
    init_layer_norm(store, f"{name}.ln2", cfg.d_model)
    init_mlp(store, f"{name}.mlp", cfg.d_model, cfg.hidden, cfg.d_model, rng)


# ---------------------------------------------------------------------------
# forward

def linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    w = store[f"{name}.weight"]
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"{name}: input feature dim {x.shape[-1]} != {w.shape[0]}")
    return T.matmul(x, w) + store[f"{name}.bias"]


def embedding_lookup(ids, table: Tensor) -> Tensor:
    return T.embedding(table, ids)


def layer_norm(store: ParamStore, name: str, x: Tensor, eps: float = 1e-5) -> Tensor:
    return T.layer_norm(x, store[f"{name}.gain"], store[f"{name}.bias"], eps)


def two_layer_mlp(store: ParamStore, name: str, x: Tensor) -> Tensor:
    """linear -> GELU -> linear."""
    return linear(store, f"{name}.fc2", T.gelu(linear(store, f"{name}.fc1", x)))


def multi_head_attention(store: ParamStore, name: str, x: Tensor, n_heads: int) -> Tensor:
    """Unmasked scaled dot-product self-attention over ``x`` of shape [..., l, d]."""
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise DimensionError(f"{name}: expected [l, d] or [batch, l, d], got {x.shape}")
    b, l, d = x.shape
    if d % n_heads:
        raise ConfigError(f"{name}: d={d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (b, l, n_heads, dh)), (0, 2, 1, 3))

    q = heads(linear(store, f"{name}.wq", x))
    k = heads(linear(store, f"{name}.wk", x))
    v = heads(linear(store, f"{name}.wv", x))
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
    ctx = T.matmul(T.softmax_rows(scores), v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, l, d))
    out = linear(store, f"{name}.wo", ctx)
    return T.reshape(out, (l, d)) if squeeze else out


def transformer_block(store: ParamStore, name: str, x: Tensor, cfg: TransformerBlockConfig) -> Tensor:
    """Pre-norm block: x + attn(LN(x)), then h + MLP(LN(h))."""
    h = x + multi_head_attention(store, f"{name}.attn", layer_norm(store, f"{name}.ln1", x), cfg.n_heads)
    return h + two_layer_mlp(store, f"{name}.mlp", layer_norm(store, f"{name}.ln2", h))
