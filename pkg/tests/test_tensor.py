import math

import numpy as np
import pytest

from forgeflow import tensor as T
from forgeflow.errors import DataError, GeometryError, ShapeError, UsageError
from forgeflow.gradcheck import check_gradients, finite_diff, rel_err
from forgeflow.tensor import GradientTape, Tensor, reference_mode

from oracles import conv2d_loops, gelu_scalar, layer_norm_direct, softmax_direct


def test_default_dtype_is_float32():
    t = Tensor([1.0, 2.0])
    assert t.data.dtype == np.float32


def test_reference_mode_switches_to_float64():
    with reference_mode():
        t = Tensor([1.0])
        assert t.data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_add_and_operator_sugar():
    a = Tensor([1.0, 2.0])
    b = Tensor([3.0, 4.0])
    c = a + b * 2.0 - 1.0
    np.testing.assert_allclose(c.data, [6.0, 9.0])


def test_softmax_known_values():
    # exp of [0, ln2, ln3] is [1, 2, 3], so probabilities are sixths
    x = Tensor([0.0, math.log(2.0), math.log(3.0)])
    y = T.softmax(x, axis=-1)
    np.testing.assert_allclose(y.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-6)


def test_softmax_matches_direct_and_sums_to_one():
    rng = np.random.default_rng(7)
    for _ in range(5):
        row = rng.normal(size=9)
        y = T.softmax(Tensor(row), axis=-1)
        np.testing.assert_allclose(y.data, softmax_direct(list(row)), atol=1e-5)
        assert abs(float(y.data.sum()) - 1.0) < 1e-6


def test_layer_norm_two_points():
    y = T.layer_norm(Tensor([[1.0, 3.0]]))
    np.testing.assert_allclose(y.data, [[-1.0, 1.0]], atol=1e-4)


def test_layer_norm_matches_direct():
    rng = np.random.default_rng(11)
    row = rng.normal(size=8)
    y = T.layer_norm(Tensor(row))
    np.testing.assert_allclose(y.data, layer_norm_direct(list(row)), atol=1e-5)


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(DataError):
        T.layer_norm(Tensor([1.0, 2.0]), eps=0.0)


def test_gelu_matches_scalar_formula():
    xs = [-2.0, -0.5, 0.0, 0.5, 1.0, 3.0]
    y = T.gelu(Tensor(xs))
    np.testing.assert_allclose(y.data, [gelu_scalar(x) for x in xs], atol=1e-6)


def test_sigmoid_known_points_and_stability():
    y = T.sigmoid(Tensor([0.0, math.log(3.0), -50.0, 50.0]))
    np.testing.assert_allclose(y.data[:2], [0.5, 0.75], atol=1e-6)
    assert np.isfinite(y.data).all()


def test_log_rejects_nonpositive():
    with pytest.raises(DataError):
        T.log(Tensor([1.0, 0.0]))


def test_pow_const_zero_exponent_has_zero_grad():
    with reference_mode():
        x = Tensor([0.0, 2.0], trainable=True)
        with GradientTape() as tape:
            y = T.tsum(T.pow_const(x, 0.0))
        tape.backward(y)
    np.testing.assert_allclose(x.grad, [0.0, 0.0])


def test_matmul_matches_numpy_batched():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))
    out = T.matmul(Tensor(a), Tensor(b))
    np.testing.assert_allclose(out.data, a @ b, atol=1e-5)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_conv2d_all_ones_interior_is_nine():
    x = Tensor(np.ones((1, 1, 5, 5)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    y = T.conv2d(x, w, padding=1)
    assert y.shape == (1, 1, 5, 5)
    assert float(y.data[0, 0, 2, 2]) == pytest.approx(9.0)
    assert float(y.data[0, 0, 0, 0]) == pytest.approx(4.0)


def test_conv2d_delta_kernel_is_identity():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 1, 6, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    y = T.conv2d(Tensor(x), Tensor(w), padding=1)
    np.testing.assert_allclose(y.data, x, atol=1e-6)


@pytest.mark.parametrize("stride,padding,groups,cin,cout", [
    (1, 0, 1, 3, 4),
    (2, 1, 1, 2, 3),
    (1, 3, 4, 4, 4),   # depthwise-style
    (2, 1, 2, 4, 6),
])
def test_conv2d_matches_loop_oracle(stride, padding, groups, cin, cout):
    rng = np.random.default_rng(stride * 100 + padding * 10 + groups)
    k = 3 if padding < 3 else 7
    x = rng.normal(size=(2, cin, 8, 8))
    w = rng.normal(size=(cout, cin // groups, k, k))
    b = rng.normal(size=cout)
    with reference_mode():
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b),
                       stride=stride, padding=padding, groups=groups)
    want = conv2d_loops(x, w, b, stride=stride, padding=padding, groups=groups)
    np.testing.assert_allclose(got.data, want, atol=1e-8)


def test_conv2d_geometry_error_reports_output_size():
    with pytest.raises(GeometryError, match="does not fit"):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


def test_conv2d_group_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 3, 3, 3))),
                 groups=2)


def test_max_pool_first_index_wins_on_ties():
    x = np.zeros((1, 1, 2, 2))
    x[0, 0] = [[1.0, 1.0], [1.0, 1.0]]
    with reference_mode():
        t = Tensor(x, trainable=True)
        with GradientTape() as tape:
            y = T.tsum(T.max_pool2d(t, 2))
        tape.backward(y)
    # all four tie; gradient must land on the first (row-major) position only
    np.testing.assert_allclose(t.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_max_pool_values_match_numpy():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 2, 6, 6))
    y = T.max_pool2d(Tensor(x), 2)
    want = x.reshape(1, 2, 3, 2, 3, 2).max(axis=(3, 5))
    np.testing.assert_allclose(y.data, want, atol=1e-6)


def test_adaptive_avg_pool_is_spatial_mean():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(2, 3, 4, 4))
    y = T.adaptive_avg_pool2d(Tensor(x))
    np.testing.assert_allclose(y.data, x.mean(axis=(2, 3), keepdims=True), atol=1e-6)


def test_take_accumulates_duplicate_rows():
    with reference_mode():
        table = Tensor(np.arange(6, dtype=np.float64).reshape(3, 2), trainable=True)
        with GradientTape() as tape:
            y = T.tsum(T.take(table, [0, 0, 2]))
        tape.backward(y)
    np.testing.assert_allclose(table.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_clip_blocks_gradient_outside_range():
    with reference_mode():
        x = Tensor([-2.0, 0.5, 2.0], trainable=True)
        with GradientTape() as tape:
            y = T.tsum(T.clip(x, -1.0, 1.0))
        tape.backward(y)
    np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0])


def test_shared_node_grad_accumulates():
    with reference_mode():
        x = Tensor([3.0], trainable=True)
        with GradientTape() as tape:
            y = T.tsum(x + x)
        tape.backward(y)
    np.testing.assert_allclose(x.grad, [2.0])


def test_repeated_backward_adds_into_grad():
    with reference_mode():
        x = Tensor([1.0], trainable=True)
        with GradientTape() as tape:
            y = T.tsum(x * x)
        tape.backward(y)
        tape.backward(y)
    np.testing.assert_allclose(x.grad, [4.0])


def test_interior_grad_needs_retain():
    with reference_mode():
        x = Tensor([2.0], trainable=True)
        with GradientTape() as tape:
            h = x * x
            kept = T.scale(h, 3.0)
            kept.retain_grad()
            y = T.tsum(kept * kept)
        tape.backward(y)
    assert h.grad is None
    np.testing.assert_allclose(kept.grad, [24.0])  # d/dk k^2 at k=12
    np.testing.assert_allclose(x.grad, [288.0])


def test_plain_leaf_gets_no_grad():
    with reference_mode():
        x = Tensor([1.0], trainable=True)
        c = Tensor([5.0])
        with GradientTape() as tape:
            y = T.tsum(x * c)
        tape.backward(y)
    assert c.grad is None
    np.testing.assert_allclose(x.grad, [5.0])


def test_backward_rejects_nonscalar():
    x = Tensor([1.0, 2.0], trainable=True)
    with GradientTape() as tape:
        y = x * x
    with pytest.raises(UsageError, match="scalar"):
        tape.backward(y)


def test_backward_rejects_foreign_tensor():
    with GradientTape() as tape:
        _ = Tensor([1.0]) + Tensor([1.0])
    stray = Tensor([2.0])
    with pytest.raises(UsageError):
        tape.backward(stray)


def test_nested_tapes_forbidden():
    with GradientTape():
        with pytest.raises(UsageError, match="already active"):
            with GradientTape():
                pass


def test_broadcast_shape_error():
    with pytest.raises(ShapeError, match="broadcast"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_broadcast_backward_sums_over_expanded_axes():
    with reference_mode():
        b = Tensor(np.array([1.0, 2.0, 3.0]), trainable=True)
        x = Tensor(np.ones((4, 3)))
        with GradientTape() as tape:
            y = T.tsum(x + b)
        tape.backward(y)
    np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])


def test_finite_diff_fuzz_elementwise_chain():
    # composite of the pointwise suite; 30 random coordinate checks
    def build():
        rng = np.random.default_rng(21)
        x = Tensor(rng.normal(size=(3, 4)) * 0.7, trainable=True)

        def loss():
            h = T.gelu(x)
            h = T.sigmoid(h) + T.tanh(h)
            h = T.exp(T.scale(h, 0.3)) * h
            h = T.div(h, T.add_scalar(T.pow_const(h, 2.0), 1.5))
            return T.tmean(h)

        return loss, [("x", x)]

    _, worst = check_gradients(build, n_samples=30, tol=1e-4)
    assert worst < 1e-4


def test_finite_diff_softmax_layernorm_matmul():
    def build():
        rng = np.random.default_rng(22)
        x = Tensor(rng.normal(size=(2, 5)), trainable=True)
        w = Tensor(rng.normal(size=(5, 4)) * 0.5, trainable=True)
        g = Tensor(rng.normal(size=4) * 0.2 + 1.0, trainable=True)
        b = Tensor(rng.normal(size=4) * 0.1, trainable=True)

        def loss():
            h = T.matmul(x, w)
            h = T.layer_norm(h, g, b)
            p = T.softmax(h, axis=-1)
            return T.tsum(p * p)

        return loss, [("x", x), ("w", w), ("g", g), ("b", b)]

    _, worst = check_gradients(build, tol=1e-4)
    assert worst < 1e-4


def test_finite_diff_conv_pool_chain():
    def build():
        rng = np.random.default_rng(23)
        x = Tensor(rng.normal(size=(1, 2, 6, 6)), trainable=True)
        w = Tensor(rng.normal(size=(4, 2, 3, 3)) * 0.3, trainable=True)
        b = Tensor(rng.normal(size=4) * 0.1, trainable=True)
        dw = Tensor(rng.normal(size=(4, 1, 3, 3)) * 0.3, trainable=True)

        def loss():
            h = T.conv2d(x, w, b, stride=1, padding=1)
            h = T.relu(h)
            h = T.conv2d(h, dw, stride=1, padding=1, groups=4)
            h = T.max_pool2d(h, 2)
            h = T.adaptive_avg_pool2d(h)
            return T.tsum(h * h)

        return loss, [("x", x), ("w", w), ("b", b), ("dw", dw)]

    _, worst = check_gradients(build, n_samples=12, tol=1e-4)
    assert worst < 1e-4


def test_finite_diff_structural_ops():
    def build():
        rng = np.random.default_rng(24)
        x = Tensor(rng.normal(size=(4, 6)), trainable=True)
        t = Tensor(rng.normal(size=(5, 3)), trainable=True)

        def loss():
            a = T.reshape(x, (2, 2, 6))
            a = T.transpose(a, (1, 0, 2))
            a = T.roll(a, 1, 2)
            a = T.narrow(a, 2, 1, 4)
            b = T.take(t, [0, 4, 4, 2])
            c = T.concat([T.reshape(a, (4, 4)), T.narrow(b, 1, 0, 2)], axis=1)
            return T.tmean(c * c)

        return loss, [("x", x), ("t", t)]

    _, worst = check_gradients(build, tol=1e-4)
    assert worst < 1e-4


def test_rel_err_metric_behaviour():
    assert rel_err(1000.0, 1001.0) == pytest.approx(1.0 / 1001.0)
    assert rel_err(0.0, 1e-9) == pytest.approx(1e-9)


def test_finite_diff_helper_restores_value():
    with reference_mode():
        x = Tensor([2.0], trainable=True)

        def f():
            return T.tsum(x * x)

        d = finite_diff(f, x, (0,))
        assert d == pytest.approx(4.0, abs=1e-6)
        assert float(x.data[0]) == 2.0
