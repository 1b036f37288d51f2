"""Finite-difference verification of every differentiable op and the full loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .encoders import ImageEncoderConfig, TextEncoderConfig
from .model import RetClipConfig, encode_batch, init_params, logit_scale_of, tripartite_loss
from .tensor import Tensor

THRESHOLD = 1e-4


def tiny_config() -> RetClipConfig:
    """d=8 model small enough for exhaustive finite differences."""
    return RetClipConfig(
        image=ImageEncoderConfig(image_size=8, patch_size=4, d_model=8, n_blocks=1, n_heads=2, mlp_ratio=2.0),
        text=TextEncoderConfig(vocab_size=16, max_len=6, d_model=8, n_blocks=1, n_heads=2, mlp_ratio=2.0),
    )


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    """Random linear functional of ``out``; avoids the symmetric cancellations of a plain sum."""
    return T.sum_all(T.mul(out, Tensor(rng.normal(size=out.shape))))


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    a, b = _param(rng, 3, 4), _param(rng, 4, 5)
    bat, w = _param(rng, 2, 3, 4), _param(rng, 4, 2)
    bias = _param(rng, 4)
    x, y = _param(rng, 3, 4), _param(rng, 3, 4)
    g, beta = _param(rng, 4), _param(rng, 4)
    tbl = _param(rng, 5, 3)
    c = _param(rng, 3, 2)
    ids = np.array([[0, 3], [3, 4]])

    store = nn.ParamStore()
    bcfg = nn.TransformerBlockConfig(d_model=4, n_heads=2, mlp_ratio=2.0)
    nn.init_transformer_block(store, "blk", bcfg, rng)
    for _, t in store.items():
        t.data = rng.normal(0.0, 0.5, t.shape)
    seq = Tensor(rng.normal(size=(2, 3, 4)))

    wx = lambda out: _weighted(out, np.random.default_rng(1))  # noqa: E731
    return {
        "matmul": (lambda: wx(T.matmul(a, b)), [a, b]),
        "matmul_batched": (lambda: wx(T.matmul(bat, w)), [bat, w]),
        "add_bias": (lambda: wx(x + bias), [x, bias]),
        "sub": (lambda: wx(x - y), [x, y]),
        "mul": (lambda: wx(T.mul(x, y)), [x, y]),
        "scale_exp_log": (lambda: wx(T.log(T.exp(T.scale(x, 0.5)) + 2.0)), [x]),
        "gelu": (lambda: wx(T.gelu(x)), [x]),
        "softplus": (lambda: wx(T.softplus(x)), [x]),
        "softmax_rows": (lambda: wx(T.softmax_rows(x)), [x]),
        "log_softmax_rows": (lambda: wx(T.log_softmax_rows(x)), [x]),
        "layer_norm": (lambda: wx(T.layer_norm(x, g, beta, 1e-5)), [x, g, beta]),
        "l2_normalize_rows": (lambda: wx(T.l2_normalize_rows(x)), [x]),
        "concat_last": (lambda: wx(T.concat_last(x, c)), [x, c]),
        "transpose_reshape": (lambda: wx(T.reshape(T.transpose(bat, (0, 2, 1)), (2, 12))), [bat]),
        "index_embedding": (lambda: wx(T.embedding(tbl, ids)) + wx(tbl[np.array([0, 0, 2])]), [tbl]),
        "mean_sum_axis": (lambda: T.mean_all(T.sum_axis(T.mul(x, x), axis=1)), [x]),
        "clamp_max": (lambda: wx(T.clamp_max(x, 10.0)), [x]),
        "attention_block": (lambda: wx(nn.transformer_block(store, "blk", seq, bcfg)), store.tensors()),
    }


def _corrupted_square(x: Tensor) -> Tensor:
    # negative control: reports 2.2*x instead of 2*x
    return T._make(x.data * x.data, "bad_square", (x,), lambda g: (g * 2.2 * x.data,))


def end_to_end_case(seed: int = 0, n: int = 2):
    """Tripartite loss composed from raw pixels and tokens through every head."""
    cfg = tiny_config()
    model = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for _, t in model.params.items():
        if t.ndim:
            t.data = t.data + rng.normal(0.0, 0.3, t.shape)
    left = rng.random((n, 8, 8, 3))
    right = rng.random((n, 8, 8, 3))
    tokens = [[0] + list(rng.integers(3, 16, 3)) for _ in range(n)]

    def f():
        feats = encode_batch(model, left, right, tokens)
        return tripartite_loss(feats, logit_scale_of(model)).total

    return f, model.params.tensors()


def run_gradcheck(eps: float = 1e-6, seed: int = 0, corrupt: bool = False,
                  max_coords: int | None = None) -> dict[str, float]:
    """Max relative error per component."""
    rng = np.random.default_rng(seed)
    report = {}
    for name, (f, params) in op_cases(rng).items():
        report[name] = T.finite_difference_check(f, params, eps)
    f, params = end_to_end_case(seed)
    report["tripartite_end_to_end"] = T.finite_difference_check(
        f, params, eps, max_coords=max_coords, rng=np.random.default_rng(seed))
    if corrupt:
        x = _param(rng, 3)
        report["corrupted_square"] = T.finite_difference_check(
            lambda: T.sum_all(_corrupted_square(x)), [x], eps)
    return report
