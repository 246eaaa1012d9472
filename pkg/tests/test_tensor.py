import math

import numpy as np
import pytest

from molora import tensor as T
from molora.tensor import (
    GraphError,
    ShapeError,
    Tensor,
    col_slice,
    concat_cols,
    cross_entropy,
    embedding,
    finite_diff_check,
    linear,
    matmul,
    rmsnorm,
    rows_select,
    silu,
    softmax,
    transpose,
    tsum,
)


def rng(seed=0):
    return np.random.default_rng(seed)


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]], dtype=np.float64)
    eye = Tensor(np.eye(2), dtype=np.float64)
    out = matmul(a, eye)
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_annihilating_product():
    a = Tensor([[1.0, 0.0], [0.0, 0.0]], dtype=np.float64)
    b = Tensor([[0.0, 0.0], [0.0, 1.0]], dtype=np.float64)
    out = matmul(a, b)
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_matmul_shape_error_names_both_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 2)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(a, b)


def test_matmul_gradcheck():
    g = rng(1)
    a0 = g.standard_normal((3, 4))
    b = Tensor(g.standard_normal((4, 2)), dtype=np.float64)

    err_a = finite_diff_check(
        lambda a: tsum(matmul(a, b)), Tensor(a0, dtype=np.float64), step=1e-5)
    assert err_a < 1e-6

    a = Tensor(a0, dtype=np.float64)
    err_b = finite_diff_check(
        lambda bb: tsum(matmul(a, bb)), b, step=1e-5)
    assert err_b < 1e-6


def test_matmul_associativity():
    g = rng(2)
    for _ in range(10):
        a = g.standard_normal((3, 4))
        b = g.standard_normal((4, 5))
        c = g.standard_normal((5, 2))
        lhs = (a @ b) @ c
        rhs = a @ (b @ c)
        assert np.max(np.abs(lhs - rhs)) < 1e-10


# -- softmax ------------------------------------------------------------------

def test_softmax_uniform():
    out = softmax(Tensor([0.0, 0.0, 0.0, 0.0], dtype=np.float64))
    np.testing.assert_allclose(out.data, [0.25, 0.25, 0.25, 0.25], atol=1e-15)


def test_softmax_shift_invariance():
    g = rng(3)
    x = g.standard_normal(7)
    a = softmax(Tensor(x, dtype=np.float64)).data
    b = softmax(Tensor(x + 123.456, dtype=np.float64)).data
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_softmax_pinned_values():
    # Independent exp/normalize oracle, plus frozen regression constants.
    x = np.array([1.0, 2.0, 3.0])
    oracle = np.exp(x) / np.exp(x).sum()
    out = softmax(Tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(out, oracle, rtol=1e-15)
    np.testing.assert_allclose(
        out,
        [0.09003057317038046, 0.24472847105479767, 0.6652409557748219],
        rtol=1e-14,
    )


def test_softmax_rows_sum_to_one():
    g = rng(4)
    x = Tensor(g.standard_normal((6, 9)) * 10, dtype=np.float64)
    sums = softmax(x).data.sum(axis=-1)
    assert np.max(np.abs(sums - 1.0)) < 1e-12


def test_softmax_empty_axis_error():
    with pytest.raises(ShapeError):
        softmax(Tensor(np.zeros((3, 0))))


def test_softmax_gradcheck():
    g = rng(5)
    x = Tensor(g.standard_normal((2, 5)), dtype=np.float64)
    d = Tensor(g.standard_normal((2, 5)), dtype=np.float64)
    err = finite_diff_check(lambda t: tsum(softmax(t) * d), x)
    assert err < 1e-6


# -- silu ---------------------------------------------------------------------

def test_silu_zero():
    assert silu(Tensor([0.0], dtype=np.float64)).data[0] == 0.0


def test_silu_asymptotes():
    out = silu(Tensor([-40.0, 40.0], dtype=np.float64)).data
    assert abs(out[0]) < 1e-15
    assert abs(out[1] - 40.0) < 1e-12


def test_silu_pinned_at_one():
    oracle = 1.0 / (1.0 + math.exp(-1.0))
    out = silu(Tensor([1.0], dtype=np.float64)).data[0]
    assert out == pytest.approx(oracle, rel=1e-15)
    assert out == pytest.approx(0.7310585786300049, rel=1e-14)


def test_silu_gradcheck():
    g = rng(6)
    x = Tensor(g.standard_normal(11) * 2, dtype=np.float64)
    err = finite_diff_check(lambda t: tsum(silu(t)), x)
    assert err < 1e-7


# -- rmsnorm ------------------------------------------------------------------

def test_rmsnorm_zero_input():
    w = Tensor(np.ones(4), dtype=np.float64)
    out = rmsnorm(Tensor(np.zeros((2, 4)), dtype=np.float64), w, eps=1e-5)
    np.testing.assert_array_equal(out.data, np.zeros((2, 4)))


def test_rmsnorm_unit_rms_passthrough():
    # mean square exactly 1, weight 1, eps tiny -> output ~ x
    x = np.array([[1.0, -1.0, 1.0, -1.0]])
    w = Tensor(np.ones(4), dtype=np.float64)
    out = rmsnorm(Tensor(x, dtype=np.float64), w, eps=1e-12)
    np.testing.assert_allclose(out.data, x, rtol=1e-9)


def test_rmsnorm_gradcheck():
    g = rng(7)
    x0 = g.standard_normal((3, 6))
    w = Tensor(g.standard_normal(6), requires_grad=True, dtype=np.float64)

    err_x = finite_diff_check(
        lambda t: tsum(rmsnorm(t, w, eps=1e-5)), Tensor(x0, dtype=np.float64))
    assert err_x < 1e-5

    x = Tensor(x0, dtype=np.float64)
    err_w = finite_diff_check(
        lambda ww: tsum(rmsnorm(x, ww, eps=1e-5)), w)
    assert err_w < 1e-5


def test_rmsnorm_bad_eps():
    with pytest.raises(ValueError):
        rmsnorm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), eps=0.0)


# -- cross entropy ------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    v = 11
    logits = Tensor(np.zeros((4, v)), dtype=np.float64)
    loss = cross_entropy(logits, [0, 3, 7, 10])
    assert loss.item() == pytest.approx(math.log(v), rel=1e-12)


def test_cross_entropy_margin_limit():
    losses = []
    for margin in (5.0, 20.0, 80.0):
        z = np.zeros((1, 6))
        z[0, 2] = margin
        losses.append(cross_entropy(Tensor(z, dtype=np.float64), [2]).item())
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-30


def test_cross_entropy_target_out_of_range():
    logits = Tensor(np.zeros((2, 5)))
    with pytest.raises(IndexError):
        cross_entropy(logits, [0, 5])


def test_cross_entropy_gradcheck():
    g = rng(8)
    logits = Tensor(g.standard_normal((4, 7)), dtype=np.float64)
    targets = [1, 6, 0, 3]
    err = finite_diff_check(lambda t: cross_entropy(t, targets), logits)
    assert err < 1e-5


# -- backward contract ---------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(rng(9).standard_normal((3, 4)), requires_grad=True)
    tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4), dtype=np.float32))


def test_backward_detached_gets_no_grad():
    x = Tensor(np.ones((2, 2)), requires_grad=False)
    y = Tensor(np.ones((2, 2)), requires_grad=True)
    tsum(x * y).backward()
    assert x.grad is None
    assert y.grad is not None


def test_backward_nonscalar_rejected():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(GraphError):
        (x * 2.0).backward()


def test_backward_accumulates_until_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
    loss = tsum(x * x)
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    np.testing.assert_allclose(x.grad, 2 * first)
    x.zero_grad()
    assert x.grad is None


def test_shared_node_grad_sums_paths():
    # loss = sum(x*x + x) -> dL/dx = 2x + 1
    x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True, dtype=np.float64)
    tsum(x * x + x).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


# -- structural ops ------------------------------------------------------------

def test_transpose_gradcheck():
    x = Tensor(rng(10).standard_normal((3, 5)), dtype=np.float64)
    d = Tensor(rng(11).standard_normal((5, 3)), dtype=np.float64)
    err = finite_diff_check(lambda t: tsum(transpose(t) * d), x)
    assert err < 1e-7


def test_linear_matches_matmul_transpose():
    g = rng(12)
    x = Tensor(g.standard_normal((4, 6)), dtype=np.float64)
    w = Tensor(g.standard_normal((3, 6)), dtype=np.float64)
    np.testing.assert_allclose(
        linear(x, w).data, matmul(x, transpose(w)).data, rtol=1e-12)


def test_linear_gradcheck():
    g = rng(13)
    x0 = g.standard_normal((4, 6))
    w = Tensor(g.standard_normal((3, 6)), dtype=np.float64)
    err_x = finite_diff_check(
        lambda t: tsum(linear(t, w)), Tensor(x0, dtype=np.float64))
    err_w = finite_diff_check(
        lambda ww: tsum(linear(Tensor(x0, dtype=np.float64), ww)), w)
    assert err_x < 1e-6 and err_w < 1e-6


def test_embedding_lookup_and_grad():
    table = Tensor(rng(14).standard_normal((5, 3)), requires_grad=True,
                   dtype=np.float64)
    out = embedding(table, [1, 1, 4])
    np.testing.assert_array_equal(out.data[0], table.data[1])
    tsum(out).backward()
    assert table.grad[1].sum() == pytest.approx(6.0)  # selected twice, d=3
    assert np.all(table.grad[0] == 0.0)


def test_embedding_out_of_range():
    table = Tensor(np.zeros((5, 3)))
    with pytest.raises(IndexError):
        embedding(table, [0, 5])


def test_rows_select_gradcheck():
    x = Tensor(rng(15).standard_normal((6, 3)), dtype=np.float64)
    err = finite_diff_check(lambda t: tsum(rows_select(t, [0, 2, 2])), x)
    assert err < 1e-7


def test_col_slice_concat_roundtrip():
    x = Tensor(rng(16).standard_normal((3, 8)), requires_grad=True,
               dtype=np.float64)
    parts = [col_slice(x, 0, 3), col_slice(x, 3, 8)]
    out = concat_cols(parts)
    np.testing.assert_array_equal(out.data, x.data)
    tsum(out).backward()
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


# -- finite-difference oracle ----------------------------------------------------

def test_finite_diff_self_check_quadratic():
    # f(x) = sum(x^2): closed-form gradient 2x, oracle must agree tightly.
    x = Tensor(rng(17).standard_normal(9), dtype=np.float64)
    err = finite_diff_check(lambda t: tsum(t * t), x, step=1e-5)
    assert err < 1e-8


def test_finite_diff_linear_is_exact():
    c = Tensor(rng(18).standard_normal(7), dtype=np.float64)
    x = Tensor(rng(19).standard_normal(7), dtype=np.float64)
    err = finite_diff_check(lambda t: tsum(t * c), x, step=1e-5)
    assert err < 1e-10


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_check(lambda t: tsum(t), Tensor(np.ones(2)), step=0.0)


# -- dtype modes ----------------------------------------------------------------

def test_default_dtype_is_float32():
    assert Tensor([1.0, 2.0]).data.dtype == np.float32


def test_float64_mode_preserved_through_ops():
    x = Tensor(np.ones((2, 2)), dtype=np.float64)
    y = silu(softmax(x * 3.0))
    assert y.data.dtype == np.float64


def test_data_is_row_major_and_sized():
    x = Tensor(rng(20).standard_normal((4, 5)))
    assert x.data.flags["C_CONTIGUOUS"]
    assert x.size == 20 and x.shape == (4, 5)
