"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every differentiable op returns a new :class:`Tensor` whose ``node`` records
the op name, its inputs and a closure mapping the output gradient to input
gradients. :func:`backward` linearises the graph reachable from a scalar loss
into a :class:`Tape` (topological order) and walks it once in reverse.

Broadcasting is deliberately narrow: operands must have equal shapes, or one
shape must be a trailing suffix of the other (bias add, per-feature gain), or
one operand must be a scalar.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DTYPE = np.float64

_grad_enabled = True
_node_ids = itertools.count()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (frozen inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    id: int = field(default_factory=lambda: next(_node_ids))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(*shape: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(*shape: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _make(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = _grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    out.node = Node(op, inputs, backward_fn) if track else None
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] == short:
        return
    raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape, dtype=np.int64)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, "scale", (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, "exp", (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), "log", (x,), lambda g: (g / xd,))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    xd = x.data
    y = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))
    return _make(y, "softplus", (x,), lambda g: (g * sig,))


def clamp_max(x: Tensor, hi: float) -> Tensor:
    """min(x, hi); the gradient is zero wherever the clamp is active."""
    xd = x.data
    mask = xd <= hi
    return _make(np.minimum(xd, hi), "clamp_max", (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    y = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner),)

    return _make(y, "gelu", (x,), bw)


# ---------------------------------------------------------------------------
# reductions

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), "sum_all", (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(np.asarray(x.data.mean()), "mean_all", (x,),
                 lambda g: (np.full(shape, float(g) / n),))


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    shape = x.shape
    ax = axis % x.ndim

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=ax, keepdims=keepdims), "sum_axis", (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra and shape

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix (shared
    weight) or has exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), "transpose", (x,),
                 lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(tuple(shape)), "reshape", (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat: shapes {[tt.shape for tt in tensors]} disagree off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=ax), "concat", tensors,
                 lambda g: tuple(np.split(g, splits, axis=ax)))


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    return concat((a, b), axis=-1)


def index(x: Tensor, key) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate on backward."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(x.data[key]), "index", (x,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]``; output shape is ``ids.shape + (d,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding: ids outside [0, {table.shape[0]})")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], "embedding", (table,), bw)


# ---------------------------------------------------------------------------
# row-wise normalisations

def _require_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


def softmax_rows(x: Tensor) -> Tensor:
    _require_finite(x.data, "softmax_rows")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, "softmax_rows", (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    _require_finite(x.data, "log_softmax_rows")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(y, "log_softmax_rows", (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs feature dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, (d,)), _unbroadcast(g, (d,))

    return _make(xhat * gd + bias.data, "layer_norm", (x, gain, bias), bw)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each last-axis row to unit norm. All-zero rows stay zero."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    nz = norm > 0
    safe = np.where(nz, norm, 1.0)
    y = np.where(nz, xd / safe, 0.0)

    def bw(g):
        dx = (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe
        return (np.where(nz, dx, 0.0),)

    return _make(y, "l2_normalize_rows", (x,), bw)


# ---------------------------------------------------------------------------
# backward pass

@dataclass
class Tape:
    """Topologically ordered computation records reachable from a root."""

    records: list[Node]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def build_tape(root: Tensor) -> Tape:
    order: list[Node] = []
    seen: set[int] = set()
    if root.node is None:
        return Tape(order)
    stack: list[tuple[Node, bool]] = [(root.node, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for t in reversed(node.inputs):
            if t.node is not None and t.node.id not in seen:
                stack.append((t.node, False))
    return Tape(order)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every leaf that requires grad and feeds ``loss``.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not connected to any parameter")
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    if loss.node is None:
        _accumulate_leaf(loss, grads[id(loss)])
        return tape
    outputs: dict[int, Tensor] = {}
    _index_outputs(loss, outputs)
    for node in reversed(tape.records):
        out = outputs[node.id]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                _accumulate_leaf(t, gi)
            else:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    return tape


def _index_outputs(root: Tensor, outputs: dict[int, Tensor]) -> None:
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node is None or t.node.id in outputs:
            continue
        outputs[t.node.id] = t
        stack.extend(t.node.inputs)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=DTYPE).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# gradient checking

def finite_difference_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    ``f`` is re-evaluated from scratch for every perturbation and must be
    smooth at the evaluation point (e.g. ``abs`` at 0 is not supported).
    With ``max_coords`` only a random subset of coordinates per parameter is
    probed, chosen by ``rng``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"finite_difference_check: eps={eps} outside [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("finite_difference_check: objective is not finite")
    if loss.requires_grad:
        backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        a_flat = analytic.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = float(f().data)
            flat[i] = orig - eps
            with no_grad():
                fm = float(f().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError("finite_difference_check: objective is not finite")
            numeric = (fp - fm) / (2 * eps)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
            worst = max(worst, err)
    return worst
