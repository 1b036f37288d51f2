import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retclip import tensor as T
from retclip.errors import ContractError, DimensionError, NumericError
from retclip.tensor import Tensor


def p(data):
    return Tensor(data, requires_grad=True)


# --- matmul ---------------------------------------------------------------

def test_matmul_identity_is_exact(rng):
    a = Tensor(rng.normal(size=(3, 5)))
    out = T.matmul(Tensor(np.eye(3)), a)
    assert np.array_equal(out.data, a.data)


def test_matmul_hand_example():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [1]]))
    assert out.data.tolist() == [[2.0], [4.0]]


def test_matmul_zero_annihilates(rng):
    out = T.matmul(T.zeros(2, 3), Tensor(rng.normal(size=(3, 4))))
    assert out.shape == (2, 4) and not out.data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 4\)"):
        T.matmul(T.zeros(2, 3), T.zeros(4, 4))


# --- softmax / log-softmax ------------------------------------------------

def test_softmax_uniform_row():
    out = T.softmax_rows(Tensor([[0.7, 0.7, 0.7, 0.7]]))
    assert np.allclose(out.data, 0.25, atol=1e-15)


def test_softmax_closed_form():
    out = T.softmax_rows(Tensor([[0.0, math.log(3.0)]]))
    assert out.data == pytest.approx(np.array([[0.25, 0.75]]), abs=1e-15)


def test_softmax_large_logits_do_not_overflow():
    out = T.softmax_rows(Tensor([[1000.0, 0.0]]))
    assert np.isfinite(out.data).all()
    assert out.data[0, 0] == pytest.approx(1.0) and out.data[0, 1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        T.softmax_rows(Tensor([[0.0, np.nan]]))


def test_log_softmax_matches_log_of_softmax(rng):
    x = Tensor(rng.normal(size=(4, 6)) * 5)
    assert np.allclose(T.log_softmax_rows(x).data, np.log(T.softmax_rows(x).data), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**32 - 1), st.floats(0.1, 50))
def test_softmax_rows_are_distributions(m, n, seed, scale):
    x = np.random.default_rng(seed).normal(size=(m, n)) * scale
    y = T.softmax_rows(Tensor(x)).data
    assert np.all(np.abs(y.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all((y >= 0) & (y <= 1))


# --- layer norm -----------------------------------------------------------

def test_layer_norm_constant_vector_is_zero():
    out = T.layer_norm(Tensor([[3.0, 3.0, 3.0]]), T.ones(3), T.zeros(3), 1e-5)
    assert np.array_equal(out.data, np.zeros((1, 3)))


def test_layer_norm_already_normalised():
    out = T.layer_norm(Tensor([1.0, -1.0]), T.ones(2), T.zeros(2), 1e-15)
    assert out.data == pytest.approx([1.0, -1.0], abs=1e-12)


def test_layer_norm_zero_gain_gives_bias():
    out = T.layer_norm(Tensor([[1.0, 5.0, -2.0]]), T.zeros(3), Tensor([0.1, 0.2, 0.3]), 1e-5)
    assert np.array_equal(out.data, [[0.1, 0.2, 0.3]])


def test_layer_norm_moments(rng):
    out = T.layer_norm(Tensor(rng.normal(3.0, 4.0, size=(5, 16))), T.ones(16), T.zeros(16), 1e-12)
    assert np.abs(out.data.mean(axis=-1)).max() <= 1e-9
    assert np.abs(out.data.var(axis=-1) - 1.0).max() <= 1e-9


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ContractError):
        T.layer_norm(T.ones(1, 2), T.ones(2), T.zeros(2), 0.0)


# --- small ops ------------------------------------------------------------

def test_l2_normalize_345():
    assert T.l2_normalize_rows(Tensor([[3.0, 4.0]])).data.tolist() == [[0.6, 0.8]]


def test_l2_normalize_zero_row_stays_zero():
    x = p([[0.0, 0.0], [1.0, 1.0]])
    y = T.l2_normalize_rows(x)
    assert y.data[0].tolist() == [0.0, 0.0]
    T.backward(T.sum_all(y))
    assert np.isfinite(x.grad).all() and x.grad[0].tolist() == [0.0, 0.0]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 7), st.integers(0, 2**32 - 1))
def test_l2_normalize_unit_rows(m, n, seed):
    x = np.random.default_rng(seed).normal(size=(m, n))
    y = T.l2_normalize_rows(Tensor(x)).data
    assert np.abs(np.linalg.norm(y, axis=1) - 1.0).max() <= 1e-9


def test_gelu_zero():
    assert T.gelu(Tensor([0.0])).data.tolist() == [0.0]


def test_concat_last():
    assert T.concat_last(Tensor([1.0, 2.0]), Tensor([3.0])).data.tolist() == [1.0, 2.0, 3.0]


def test_concat_shape_mismatch():
    with pytest.raises(DimensionError):
        T.concat_last(T.zeros(2, 2), T.zeros(3, 1))


def test_broadcast_limited_to_suffix_and_scalar():
    T.add(T.zeros(2, 3), T.zeros(3))
    T.mul(T.zeros(2, 3), Tensor(2.0))
    with pytest.raises(DimensionError):
        T.add(T.zeros(2, 3), T.zeros(2))


def test_softplus_is_stable():
    y = T.softplus(Tensor([-1000.0, 0.0, 1000.0])).data
    assert y == pytest.approx([0.0, math.log(2.0), 1000.0])


# --- backward -------------------------------------------------------------

def test_backward_quadratic():
    w = p([1.0, 2.0])
    T.backward(T.sum_all(T.mul(w, w)))
    assert w.grad.tolist() == [2.0, 4.0]


def test_backward_mean_matmul_matches_finite_differences(rng):
    w = p(rng.normal(size=(3, 4)))
    x = Tensor(rng.normal(size=(4, 2)))
    err = T.finite_difference_check(lambda: T.mean_all(T.matmul(w, x)), [w], eps=1e-6)
    assert err <= 1e-6


def test_unused_parameter_gets_zero_gradient():
    used, unused = p([1.0]), p([5.0])
    T.backward(T.sum_all(T.scale(used, 3.0)))
    assert unused.grad is None or not unused.grad.any()
    err = T.finite_difference_check(lambda: T.sum_all(T.scale(used, 3.0)), [used, unused], 1e-6)
    assert err == 0.0 or err < 1e-9


def test_fan_out_accumulates():
    x = p([2.0])
    y = T.mul(x, x) + T.scale(x, 3.0)
    T.backward(T.sum_all(y))
    assert x.grad.tolist() == [7.0]


def test_non_grad_tensor_never_accumulates():
    c = Tensor([1.0, 2.0])
    w = p([3.0, 4.0])
    T.backward(T.sum_all(T.mul(c, w)))
    assert c.grad is None


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        T.backward(T.scale(p([1.0, 2.0]), 2.0))


def test_backward_is_bit_deterministic(rng):
    data = rng.normal(size=(4, 5))

    def run():
        w = p(data)
        y = T.log_softmax_rows(T.matmul(T.gelu(w), Tensor(data.T)))
        T.backward(T.mean_all(T.mul(y, y)))
        return w.grad

    assert np.array_equal(run(), run())


def test_tape_is_topological_and_visits_each_record_once(rng):
    w = p(rng.normal(size=(2, 2)))
    h = T.gelu(w)
    loss = T.sum_all(T.mul(h, h) + h)
    tape = T.backward(loss)
    ids = [r.id for r in tape]
    assert len(ids) == len(set(ids))
    position = {r.id: i for i, r in enumerate(tape)}
    for r in tape:
        for inp in r.inputs:
            if inp.node is not None:
                assert position[inp.node.id] < position[r.id]


def test_no_grad_records_nothing():
    w = p([1.0])
    with T.no_grad():
        y = T.scale(w, 2.0)
    assert y.node is None and not y.requires_grad


# --- finite-difference checker ------------------------------------------

def test_fd_check_square():
    x = p([3.0])
    assert T.finite_difference_check(lambda: T.sum_all(T.mul(x, x)), [x], eps=1e-5) <= 1e-8


def test_fd_check_constant_is_zero():
    x = p([3.0])
    assert T.finite_difference_check(lambda: T.sum_all(T.scale(x, 0.0)), [x], eps=1e-5) == 0.0


def test_fd_check_eps_range():
    x = p([1.0])
    with pytest.raises(ContractError):
        T.finite_difference_check(lambda: T.sum_all(x), [x], eps=1e-2)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fd_check_rejects_nonfinite():
    x = p([-1.0])
    with pytest.raises(NumericError):
        T.finite_difference_check(lambda: T.sum_all(T.log(x)), [x], eps=1e-5)


_UNARY = {
    "gelu": T.gelu,
    "softmax_rows": T.softmax_rows,
    "log_softmax_rows": T.log_softmax_rows,
    "l2_normalize_rows": T.l2_normalize_rows,
    "softplus": T.softplus,
    "exp": T.exp,
    "transpose": T.transpose,
}


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(sorted(_UNARY) + ["matmul", "layer_norm", "mul_bias", "concat"]),
       st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_every_op_matches_finite_differences(op, m, n, seed):
    rng = np.random.default_rng(seed)
    x = p(rng.normal(size=(m, n)))
    weights = Tensor(rng.normal(size=(m, n)))
    if op == "matmul":
        w = p(rng.normal(size=(n, 3)))
        f, params = (lambda: T.sum_all(T.matmul(x, w))), [x, w]
    elif op == "layer_norm":
        g, b = p(rng.normal(size=n)), p(rng.normal(size=n))
        f, params = (lambda: T.sum_all(T.mul(T.layer_norm(x, g, b, 1e-3), weights))), [x, g, b]
    elif op == "mul_bias":
        b = p(rng.normal(size=n))
        f, params = (lambda: T.sum_all(T.mul(T.mul(x, b) + b, weights))), [x, b]
    elif op == "concat":
        y = p(rng.normal(size=(m, 2)))
        w2 = Tensor(rng.normal(size=(m, n + 2)))
        f, params = (lambda: T.sum_all(T.mul(T.concat_last(x, y), w2))), [x, y]
    elif op == "transpose":
        f, params = (lambda: T.sum_all(T.mul(T.transpose(x), Tensor(weights.data.T)))), [x]
    else:
        fn = _UNARY[op]
        f, params = (lambda: T.sum_all(T.mul(fn(x), weights))), [x]
    assert T.finite_difference_check(f, params, eps=1e-6) <= 1e-4
