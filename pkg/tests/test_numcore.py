import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphparse import numcore as nc
from graphparse.errors import ConfigError, DataError, DimensionError, NumericError, UsageError
from graphparse.numcore import Parameter, Tensor


def p64(name, value):
    return Parameter(name, np.asarray(value, dtype=np.float64), dtype=np.float64)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    b = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(nc.matmul(np.eye(2), b).data, b.astype(np.float32))


def test_matmul_hand_example():
    out = nc.matmul([[1, 2], [3, 4]], [[0], [1]])
    assert np.array_equal(out.data, [[2], [4]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nc.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradients_are_textbook():
    with nc.precision(np.float64):
        rs = np.random.default_rng(0)
        a, b = p64("a", rs.normal(size=(3, 4))), p64("b", rs.normal(size=(4, 2)))
        g = rs.normal(size=(3, 2))
        nc.backward(nc.sum(nc.mul(nc.matmul(a, b), g)))
        np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-12)


def test_matmul_batched_weight_gradient():
    with nc.precision(np.float64):
        rs = np.random.default_rng(1)
        x, w = p64("x", rs.normal(size=(2, 5, 3))), p64("w", rs.normal(size=(3, 4)))
        assert nc.grad_check(lambda: nc.sum(nc.matmul(x, w)), [x, w]).passed
        a = p64("a", rs.normal(size=(4, 5)))
        assert nc.grad_check(lambda: nc.sum(nc.mul(nc.matmul(a, x), 0.3)), [a, x]).passed


def test_matmul_sum_gradient_matches_finite_differences():
    with nc.precision(np.float64):
        rs = np.random.default_rng(2)
        a, b = p64("a", rs.normal(size=(4, 3))), p64("b", rs.normal(size=(3, 5)))
        report = nc.grad_check(lambda: nc.sum(nc.matmul(a, b)), [a, b])
        assert report.passed and report.worst() <= 1e-6


# ---------------------------------------------------------------- softmax

def test_softmax_examples():
    np.testing.assert_allclose(nc.softmax([0.0, 0.0, 0.0]).data, [1 / 3] * 3, atol=1e-7)
    np.testing.assert_allclose(nc.softmax([1000.0, 1000.0]).data, [0.5, 0.5])
    with nc.precision(np.float64):
        np.testing.assert_allclose(nc.softmax([0.0, math.log(3)]).data, [0.25, 0.75], atol=1e-15)


def test_softmax_bad_axis():
    with pytest.raises(DimensionError):
        nc.softmax(np.ones((2, 3)), axis=2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(seed, shift):
    with nc.precision(np.float64):
        x = np.random.default_rng(seed).normal(scale=5, size=(4, 7))
        y = nc.softmax(x, axis=-1).data
        assert (y >= 0).all()
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(nc.softmax(x + shift, axis=-1).data, y, atol=1e-6)


# ------------------------------------------------------------- activation

def test_relu_examples():
    assert np.array_equal(nc.activation([-1.0, 0.0, 2.0], "relu").data, [0, 0, 2])
    assert not nc.relu(-np.ones(5)).data.any()


def test_relu_subgradient_at_zero_is_zero():
    x = Parameter("x", np.array([0.0, 1.0, -1.0]))
    nc.backward(nc.sum(nc.relu(x)))
    assert np.array_equal(x.grad, [0, 1, 0])


def test_unknown_activation():
    with pytest.raises(ConfigError):
        nc.activation([1.0], "tanh")


# ---------------------------------------------------------- cross entropy

def test_cross_entropy_uniform_is_log_k():
    with nc.precision(np.float64):
        loss = nc.cross_entropy(np.zeros((6, 4)), np.arange(6) % 4)
        assert abs(loss.item() - math.log(4)) < 1e-12


def test_cross_entropy_large_margin_goes_to_zero():
    logits = np.zeros((3, 5))
    labels = np.array([0, 2, 4])
    logits[np.arange(3), labels] = 60.0
    assert nc.cross_entropy(logits, labels).item() < 1e-12


def test_cross_entropy_matches_scalar_oracle():
    rs = np.random.default_rng(3)
    logits = rs.normal(size=(3, 5))
    labels = [4, 0, 2]
    expected = 0.0
    for row, y in zip(logits.tolist(), labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        expected += lse - row[y]
    expected /= 3
    with nc.precision(np.float64):
        assert abs(nc.cross_entropy(logits, labels).item() - expected) < 1e-12


def test_cross_entropy_ignore_index_and_all_ignored():
    with nc.precision(np.float64):
        x = p64("x", np.random.default_rng(0).normal(size=(4, 3)))
        full = nc.cross_entropy(x.data[:2], [1, 2]).item()
        assert abs(nc.cross_entropy(x, [1, 2, 255, 255], ignore_index=255).item() - full) < 1e-12
        loss = nc.cross_entropy(x, [255] * 4, ignore_index=255)
        nc.backward(loss)
        assert loss.item() == 0.0 and not x.grad.any()


def test_cross_entropy_bad_label_names_pixel():
    with pytest.raises(DataError, match="pixel 2"):
        nc.cross_entropy(np.zeros((3, 4)), [0, 1, 7])


# --------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    w = Parameter("w", np.arange(6.0).reshape(2, 3))
    nc.backward(nc.sum(w))
    assert np.array_equal(w.grad, np.ones((2, 3)))


def test_backward_half_square_gives_value_and_accumulates():
    w = Parameter("w", np.array([1.0, -2.0, 3.0]))
    f = lambda: nc.mul(nc.sum(nc.mul(w, w)), 0.5)
    nc.backward(f())
    assert np.array_equal(w.grad, w.data)
    nc.backward(f())
    assert np.array_equal(w.grad, 2 * w.data)
    nc.zero_grad([w])
    assert w.grad is None


def test_backward_non_scalar_is_usage_error():
    w = Parameter("w", np.ones(3))
    with pytest.raises(UsageError):
        nc.backward(nc.mul(w, 2.0))


def test_no_grad_records_nothing():
    w = Parameter("w", np.ones(3))
    with nc.no_grad():
        y = nc.sum(nc.mul(w, 2.0))
    assert not y.requires_grad


def test_zero_extent_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


def test_check_finite():
    with pytest.raises(NumericError):
        nc.check_finite(Tensor([1.0, np.nan]), "x")


# ------------------------------------------------------------------- conv

def test_conv2d_matches_direct_loop():
    rs = np.random.default_rng(4)
    x = rs.normal(size=(1, 5, 6, 2))
    w = rs.normal(size=(3, 3, 2, 4))
    b = rs.normal(size=4)
    with nc.precision(np.float64):
        out = nc.conv2d(x, w, b, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 3, 3, 4))
    for i in range(3):
        for j in range(3):
            patch = xp[0, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            ref[0, i, j] = np.tensordot(patch, w, axes=3) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_conv2d_shape_errors():
    with pytest.raises(DimensionError):
        nc.conv2d(np.ones((1, 4, 4, 3)), np.ones((3, 3, 2, 4)))
    with pytest.raises(DimensionError):
        nc.conv2d(np.ones((1, 2, 2, 3)), np.ones((5, 5, 3, 4)))


# ------------------------------------------------------------- batch norm

def test_batch_norm_training_and_eval():
    rs = np.random.default_rng(5)
    x = rs.normal(loc=3.0, scale=2.0, size=(4, 3, 3, 2))
    rm, rv = np.zeros(2), np.ones(2)
    with nc.precision(np.float64):
        y = nc.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, training=True, momentum=1.0).data
        np.testing.assert_allclose(y.mean(axis=(0, 1, 2)), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(0, 1, 2)), 1, atol=1e-4)
        np.testing.assert_allclose(rm, x.mean(axis=(0, 1, 2)))
        n = x.size // 2
        np.testing.assert_allclose(rv, x.var(axis=(0, 1, 2)) * n / (n - 1))
        before = rm.copy()
        y_eval = nc.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, training=False).data
        assert np.array_equal(rm, before)
        np.testing.assert_allclose(y_eval, (x - rm) / np.sqrt(rv + 1e-5))


# -------------------------------------------------------------------- sgd

def test_sgd_plain_step():
    w = Parameter("w", np.array([1.0, 2.0]), dtype=np.float64)
    w.grad = np.array([0.5, -1.0])
    nc.sgd_step([w], lr=1.0)
    assert np.array_equal(w.data, [0.5, 3.0])


def test_sgd_momentum_two_steps_total_decrement():
    g = np.array([1.0, -3.0])
    w = Parameter("w", np.zeros(2), dtype=np.float64)
    for _ in range(2):
        w.grad = g.copy()
        nc.sgd_step([w], lr=1.0, momentum=0.9)
    np.testing.assert_allclose(-w.data, g + 1.9 * g, rtol=1e-15)


def test_sgd_weight_decay_scales_value():
    w = Parameter("w", np.array([2.0, -4.0]), dtype=np.float64)
    w.grad = np.zeros(2)
    nc.sgd_step([w], lr=0.1, weight_decay=5e-4)
    np.testing.assert_allclose(w.data, np.array([2.0, -4.0]) * (1 - 0.1 * 5e-4), rtol=1e-15)


def test_sgd_matches_textbook_bitwise_in_float64():
    rs = np.random.default_rng(6)
    v, g = rs.normal(size=5), rs.normal(size=5)
    w = Parameter("w", v.copy(), dtype=np.float64)
    w.grad = g.copy()
    nc.sgd_step([w], lr=0.3, momentum=0.0, weight_decay=0.01)
    assert np.array_equal(w.data, v - 0.3 * (g + 0.01 * v))


def test_sgd_rejects_nonpositive_lr_and_skips_frozen():
    w = Parameter("w", np.ones(2))
    w.grad = np.ones(2)
    with pytest.raises(ConfigError):
        nc.sgd_step([w], lr=0.0)
    w.frozen = True
    nc.sgd_step([w], lr=1.0)
    assert np.array_equal(w.data, np.ones(2))


# ------------------------------------------------------------- grad check

def test_grad_check_requires_float64():
    w = Parameter("w", np.ones(2))
    with pytest.raises(ConfigError):
        nc.grad_check(lambda: nc.sum(w), [w])


def test_grad_check_linear_function_is_exact():
    with nc.precision(np.float64):
        w = p64("w", np.random.default_rng(0).normal(size=(3, 3)))
        c = np.random.default_rng(1).normal(size=(3, 3))
        assert nc.grad_check(lambda: nc.sum(nc.mul(w, c)), [w]).worst() < 1e-9


def test_grad_check_detects_corrupted_gradient():
    with nc.precision(np.float64):
        w = p64("w", np.random.default_rng(0).normal(size=(2, 2)))
        f = lambda: nc.sum(nc.mul(w, w))
        bad = [2 * w.data + 0.1]
        report = nc.grad_check(f, [w], analytic=bad)
        assert not report.passed and not report.pass_


@pytest.mark.filterwarnings("ignore:divide by zero")
def test_grad_check_non_finite_is_numeric_error():
    with nc.precision(np.float64):
        w = p64("w", np.ones(2))
        with pytest.raises(NumericError):
            nc.grad_check(lambda: nc.sum(nc.div(w, 0.0)), [w])


def test_grad_check_subsampling():
    with nc.precision(np.float64):
        w = p64("w", np.random.default_rng(0).normal(size=(10, 10)))
        report = nc.grad_check(lambda: nc.sum(nc.mul(w, w)), [w], max_coords=7)
        assert report.checked == 7 and report.passed


@pytest.mark.parametrize("seed", range(20))
def test_random_compositions_match_finite_differences(seed):
    rs = np.random.default_rng(seed)
    with nc.precision(np.float64):
        a = p64("a", rs.normal(size=(3, 4)))
        b = p64("b", rs.normal(size=(4, 5)))
        c = p64("c", rs.normal(size=(5,)) + 3.0)

        def f():
            h = nc.relu(nc.matmul(a, b))
            h = nc.softmax(nc.div(h, c), axis=-1)
            h = nc.l2_normalize(nc.add(h, nc.mean(h, axis=0, keepdims=True)))
            return nc.sum(nc.mul(nc.transpose(h), nc.sub(1.0, nc.transpose(h))))

        assert nc.grad_check(f, [a, b, c]).passed


def test_operations_are_deterministic():
    rs = np.random.default_rng(0)
    x, w = rs.normal(size=(2, 8, 8, 3)), rs.normal(size=(3, 3, 3, 5))
    a = nc.softmax(nc.conv2d(x, w, padding=1)).data
    b = nc.softmax(nc.conv2d(x, w, padding=1)).data
    assert a.tobytes() == b.tobytes()
