from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sivforecast import autodiff as ad
from sivforecast.autodiff import ContractError, DArray, DimensionError, NumericalError, Tape


def leaf(x):
    return DArray(x, requires_grad=True)


def central_difference(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Plain float64 central differences of the scalar f(x), independent of the tape."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += eps
        down[idx] -= eps
        g[idx] = (f(up) - f(down)) / (2 * eps)
    return g


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    out = ad.matmul(DArray([[1, 0], [0, 1]]), DArray([[3], [4]]))
    assert out.data.tolist() == [[3], [4]]


def test_matmul_row_by_column():
    assert ad.matmul(DArray([[1, 2]]), DArray([[3], [4]])).data.tolist() == [[11]]


def test_matmul_gradient_matches_finite_difference():
    A = leaf([[1.0, 2.0]])
    B = DArray([[3.0], [4.0]])
    with Tape():
        ad.backward(ad.sum_(ad.matmul(A, B)))
    fd = central_difference(lambda a: float((a @ B.data).sum()), A.data.copy())
    np.testing.assert_allclose(A.grad, [[3.0, 4.0]], rtol=1e-12)
    np.testing.assert_allclose(fd, A.grad, rtol=1e-9)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(DArray(np.ones((2, 3))), DArray(np.ones((2, 3))))


# ------------------------------------------------------------ elementwise

def test_relu_definition():
    assert ad.elementwise("relu", DArray([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]


def test_sigmoid_at_zero():
    assert ad.elementwise("sigmoid", DArray([0.0])).data[0] == 0.5


def test_tanh_derivative_at_zero():
    x = leaf([0.0])
    with Tape():
        ad.backward(ad.sum_(ad.elementwise("tanh", x)))
    assert x.grad[0] == 1.0


def test_relu_backward_passes_gradient_only_where_positive():
    x = leaf([-1.0, 0.0, 2.0])
    with Tape():
        ad.backward(ad.sum_(ad.relu(x)))
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_binary_ops_reject_shape_mismatch():
    for op in ("add", "mul"):
        with pytest.raises(DimensionError):
            ad.elementwise(op, DArray([1.0, 2.0]), DArray([1.0, 2.0, 3.0]))


def test_unknown_elementwise_op():
    with pytest.raises(ContractError):
        ad.elementwise("softplus", DArray([1.0]))


def test_sigmoid_saturates_without_overflow():
    with np.errstate(all="raise"):
        out = ad.sigmoid(DArray([-1000.0, 1000.0])).data
    assert out.tolist() == [0.0, 1.0]


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)))
def test_relu_is_nonnegative_and_splits_absolute_value(x):
    pos = ad.relu(DArray(x)).data
    neg = ad.relu(DArray(-x)).data
    assert np.all(pos >= 0)
    np.testing.assert_array_equal(pos + neg, np.abs(x))


# ------------------------------------------------------ restructuring ops

def test_concat_axis0():
    out = ad.concat([DArray([[1.0], [2.0]]), DArray([[3.0]])], axis=0)
    assert out.data.tolist() == [[1], [2], [3]]


def test_slice_range():
    assert ad.slice_(DArray([1.0, 2.0, 3.0]), 0, 1, 3).data.tolist() == [2, 3]


def test_slice_out_of_range():
    with pytest.raises(IndexError):
        ad.slice_(DArray([1.0, 2.0, 3.0]), 0, 1, 4)


def test_concat_gradient_is_ones():
    a = leaf(np.arange(6.0).reshape(2, 3))
    b = leaf(np.ones((1, 3)))
    with Tape():
        ad.backward(ad.sum_(ad.concat([a, b], axis=0)))
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))


def test_concat_rejects_mismatched_off_axis():
    with pytest.raises(DimensionError):
        ad.concat([DArray(np.ones((2, 3))), DArray(np.ones((2, 2)))], axis=0)


def test_slice_gradient_routes_to_region():
    a = leaf(np.arange(4.0))
    with Tape():
        ad.backward(ad.sum_(ad.slice_(a, 0, 1, 3)))
    assert a.grad.tolist() == [0, 1, 1, 0]


def test_take_and_put_rows_round_trip():
    a = leaf(np.arange(6.0).reshape(3, 2))
    rows = np.array([0, 2])
    with Tape():
        out = ad.put_rows(ad.take_rows(a, rows), rows, 3)
        ad.backward(ad.sum_(out))
    np.testing.assert_array_equal(out.data, [[0, 1], [0, 0], [4, 5]])
    np.testing.assert_array_equal(a.grad, [[1, 1], [0, 0], [1, 1]])


# -------------------------------------------------------------------- mse

def test_mse_zero_error():
    assert ad.mse(DArray([1.0, 1.0]), DArray([1.0, 1.0])).data == 0


def test_mse_value():
    assert ad.mse(DArray([0.0, 0.0]), DArray([3.0, 4.0])).data == 12.5


def test_mse_gradient():
    p = leaf([0.0])
    with Tape():
        ad.backward(ad.mse(p, DArray([2.0])))
    assert p.grad.tolist() == [-4.0]


def test_mse_length_mismatch():
    with pytest.raises(DimensionError):
        ad.mse(DArray([1.0]), DArray([1.0, 2.0]))


# --------------------------------------------------------------- backward

def test_backward_sum():
    x = leaf([1.0, 2.0, 3.0])
    with Tape():
        ad.backward(ad.sum_(x))
    assert x.grad.tolist() == [1, 1, 1]


def test_backward_linear_least_squares_matches_finite_difference():
    rng = np.random.default_rng(3)
    W = leaf(rng.normal(size=(3, 3)))
    x = DArray(rng.normal(size=(3, 1)))
    y = DArray(rng.normal(size=(3, 1)))
    rep = ad.grad_check(lambda: ad.mse(ad.matmul(W, x), y), [W], eps=1e-5, tol=1e-4)
    assert rep.passed, rep.max_rel_error
    # independent oracle: plain float64 differences without the tape
    fd = central_difference(lambda w: float(np.mean((w @ x.data - y.data) ** 2)), W.data.copy())
    W.zero_grad()
    with Tape():
        ad.backward(ad.mse(ad.matmul(W, x), y))
    np.testing.assert_allclose(W.grad, fd, rtol=1e-6, atol=1e-10)


def test_backward_twice_with_zeroing_is_identical():
    rng = np.random.default_rng(0)
    W = leaf(rng.normal(size=(2, 4)))
    x = DArray(rng.normal(size=(4, 3)))
    with Tape():
        loss = ad.sum_(ad.tanh(ad.matmul(W, x)))
        ad.backward(loss)
        first = W.grad.copy()
        W.zero_grad()
        ad.backward(loss)
    np.testing.assert_array_equal(first, W.grad)


def test_backward_accumulates_without_zeroing():
    x = leaf([1.0, 2.0])
    with Tape():
        loss = ad.sum_(x)
        ad.backward(loss)
        ad.backward(loss)
    assert x.grad.tolist() == [2.0, 2.0]


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with Tape():
        y = ad.tanh(x)
    with pytest.raises(ContractError):
        ad.backward(y)


def test_backward_rejects_untaped_loss():
    with pytest.raises(ContractError):
        ad.backward(ad.sum_(leaf([1.0])))


def test_no_recording_outside_a_tape():
    x = leaf([1.0])
    y = ad.tanh(x)
    assert y.tape is None and not y.requires_grad


def test_tape_order_is_topological():
    x = leaf([0.5])
    with Tape() as tape:
        a = ad.tanh(x)
        b = ad.sigmoid(a)
        ad.add(a, b)
    produced = set()
    for node in tape.nodes:
        for inp in node.inputs:
            assert inp.tape is not tape or id(inp) in produced
        produced.update(id(o) for o in node.outputs)


# ------------------------------------------------------------- grad_check

def test_grad_check_square():
    x = leaf([3.0])
    rep = ad.grad_check(lambda: ad.sum_(ad.mul(x, x)), [x], eps=1e-5)
    assert rep.passed
    assert abs(x.grad[0] - 6.0) < 1e-12


def test_grad_check_constant_function():
    x = leaf([3.0, -1.0])
    rep = ad.grad_check(lambda: ad.sum_(DArray([1.0])), [x])
    assert rep.passed and rep.max_rel_error == 0.0


def test_grad_check_eps_range():
    x = leaf([1.0])
    for eps in (1e-7, 1e-3):
        with pytest.raises(ContractError):
            ad.grad_check(lambda: ad.sum_(x), [x], eps=eps)


def test_grad_check_reports_non_finite():
    x = leaf([1.0])
    with pytest.raises(NumericalError):
        ad.grad_check(lambda: ad.sum_(ad.scale(x, np.inf)), [x])


def test_grad_check_detects_wrong_rule():
    x = leaf([0.3, -0.7])

    def wrong():
        v = x.data
        return ad._one(np.array(np.sum(v ** 2)), (x,), lambda g: (g * v,))  # missing factor 2

    assert not ad.grad_check(wrong, [x]).passed


def test_grad_check_restores_parameters():
    x = leaf([0.25, 0.5])
    before = x.data.copy()
    ad.grad_check(lambda: ad.sum_(ad.tanh(x)), [x])
    assert x.data.dtype == np.float64
    np.testing.assert_array_equal(x.data, before)


# ------------------------------------------------------ fused LSTM kernels

def _reference_layer(xs, w_ih, w_hh, b, reverse):
    T, N, _ = xs.shape
    H = w_hh.shape[1]
    h = DArray(np.zeros((N, H)))
    c = DArray(np.zeros((N, H)))
    outs = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        x = ad.reshape(ad.slice_(xs, 0, t, t + 1), (N, xs.shape[2]))
        h, c = ad.lstm_cell(x, h, c, w_ih, w_hh, b)
        outs[t] = ad.reshape(h, (1, N, H))
    return ad.concat(outs, axis=0)


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_layer_equals_stepwise_cells(reverse):
    rng = np.random.default_rng(1)
    xs = leaf(rng.normal(size=(5, 3, 2)))
    w_ih, w_hh, b = leaf(rng.normal(size=(12, 2))), leaf(rng.normal(size=(12, 3))), leaf(rng.normal(size=12))
    g = rng.normal(size=(5, 3, 3))
    grads = []
    for fn in (ad.lstm_layer, _reference_layer):
        for p in (xs, w_ih, w_hh, b):
            p.zero_grad()
        with Tape():
            out = fn(xs, w_ih, w_hh, b, reverse)
            ad.backward(ad.sum_(ad.mul(out, DArray(g))))
        grads.append((out.data.copy(), [p.grad.copy() for p in (xs, w_ih, w_hh, b)]))
    np.testing.assert_allclose(grads[0][0], grads[1][0], rtol=1e-13, atol=1e-15)
    for a, r in zip(grads[0][1], grads[1][1]):
        np.testing.assert_allclose(a, r, rtol=1e-11, atol=1e-13)


def test_lstm_layer_grad_check():
    rng = np.random.default_rng(2)
    xs = leaf(rng.normal(size=(4, 2, 3)))
    w_ih, w_hh, b = leaf(rng.normal(size=(8, 3))), leaf(rng.normal(size=(8, 2))), leaf(rng.normal(size=8))
    rep = ad.grad_check(lambda: ad.sum_(ad.tanh(ad.lstm_layer(xs, w_ih, w_hh, b, True))),
                        [xs, w_ih, w_hh, b])
    assert rep.passed, rep.max_rel_error


# ------------------------------------------------------- property tests

UNARY = {"tanh": ad.tanh, "sigmoid": ad.sigmoid, "scale": lambda a: ad.scale(a, -1.7)}
BINARY = {"add": ad.add, "sub": ad.sub, "mul": ad.mul}


@st.composite
def expressions(draw):
    n, k = draw(st.integers(1, 3)), draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2**32 - 1))
    ops = draw(st.lists(st.sampled_from(sorted(UNARY) + sorted(BINARY) + ["matmul", "rowscale"]),
                        min_size=1, max_size=6))
    return n, k, seed, ops


@settings(max_examples=40, deadline=None)
@given(expressions())
def test_composite_expressions_match_finite_differences(case):
    n, k, seed, ops = case
    rng = np.random.default_rng(seed)
    a = leaf(rng.normal(size=(n, k)))
    b = leaf(rng.normal(size=(n, k)))
    w = leaf(rng.normal(size=(k, k)) / np.sqrt(k))
    s = leaf(rng.normal(size=(n, 1)))

    def f():
        x = a
        for op in ops:
            if op in UNARY:
                x = UNARY[op](x)
            elif op in BINARY:
                x = BINARY[op](x, b)
            elif op == "matmul":
                x = ad.matmul(x, w)
            else:
                x = ad.rowscale(x, s)
        return ad.sum_(ad.mul(x, x))

    rep = ad.grad_check(f, [a, b, w, s], eps=1e-5, tol=1e-4)
    assert rep.passed, (ops, rep.max_rel_error)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_tape_replay_is_bit_identical(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(3, 4))
    x = rng.normal(size=(2, 3))

    def run():
        W = leaf(w)
        with Tape():
            loss = ad.sum_(ad.sigmoid(ad.matmul(DArray(x), W)))
            ad.backward(loss)
        return loss.data.copy(), W.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()
