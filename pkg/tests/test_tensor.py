"""
Tests for the tensor engine and its differentiable operations.
"""

import math

import numpy as np
import pytest

from patchcert import functional as F
from patchcert.errors import DimensionError, GraphStateError
from patchcert.tensor import Parameter, Tensor, get_dtype, no_grad, use_dtype

from conftest import check_gradients


def loop_affine(x, w, b):
    out = np.zeros((x.shape[0], w.shape[0]))
    for i in range(x.shape[0]):
        for j in range(w.shape[0]):
            total = b[j]
            for k in range(x.shape[1]):
                total += x[i, k] * w[j, k]
            out[i, j] = total
    return out


def loop_conv(x, kernel, b, stride):
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for img in range(n):
        for oc in range(o):
            for r in range(ho):
                for col in range(wo):
                    total = b[oc]
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                total += (
                                    x[img, ic, r * stride + i, col * stride + j]
                                    * kernel[oc, ic, i, j]
                                )
                    out[img, oc, r, col] = total
    return out


def im2col(x, kh, kw, stride):
    n, c, h, w = x.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    rows = []
    for img in range(n):
        for r in range(ho):
            for col in range(wo):
                patch = x[img, :, r * stride : r * stride + kh, col * stride : col * stride + kw]
                rows.append(patch.reshape(-1))
    return np.array(rows), (n, ho, wo)


class TestAffine:
    def test_identity_weight(self):
        out = F.affine_forward([[1.0, 2.0]], np.eye(2), [0.0, 0.0])
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_single_output(self):
        out = F.affine_forward([[1.0, 1.0]], [[2.0, -1.0]], [3.0])
        np.testing.assert_array_equal(out.data, [[4.0]])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 5)).astype(np.float32)
        w = rng.standard_normal((3, 5)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        out = F.affine_forward(x, w, b)
        np.testing.assert_allclose(out.data, loop_affine(x, w, b), atol=1e-5)

    def test_rows_do_not_depend_on_batch(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((300, 255)).astype(np.float32)
        w = rng.standard_normal((40, 255)).astype(np.float32)
        b = rng.standard_normal(40).astype(np.float32)
        full = F.affine_forward(x, w, b).data
        assert full.dtype == np.float32
        for row in (0, 17, 299):
            np.testing.assert_array_equal(full[row], F.affine_forward(x[row : row + 1], w, b).data[0])
        np.testing.assert_array_equal(full[5:9], F.affine_forward(x[5:9], w, b).data)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as info:
            F.affine_forward(np.ones((1, 3)), np.ones((2, 2)))
        assert "(1, 3)" in str(info.value)
        assert "(2, 2)" in str(info.value)


class TestConv2d:
    def test_scalar_kernel(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = F.conv2d_forward(x, np.full((1, 1, 1, 1), 2.0), np.zeros(1))
        np.testing.assert_array_equal(out.data[0, 0], [[2.0, 4.0], [6.0, 8.0]])

    def test_window_sum(self):
        out = F.conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 2, 2)))
        np.testing.assert_array_equal(out.data[0, 0], np.full((2, 2), 4.0))

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_loop_oracle(self, stride):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 7, 6)).astype(np.float32)
        kernel = rng.standard_normal((4, 3, 3, 2)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        out = F.conv2d_forward(x, kernel, b, stride=stride)
        np.testing.assert_allclose(out.data, loop_conv(x, kernel, b, stride), atol=1e-5)

    def test_rows_do_not_depend_on_batch(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((9, 3, 8, 8)).astype(np.float32)
        kernel = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(5).astype(np.float32)
        full = F.conv2d_forward(x, kernel, b).data
        assert full.dtype == np.float32
        for row in range(9):
            np.testing.assert_array_equal(full[row], F.conv2d_forward(x[row : row + 1], kernel, b).data[0])

    @pytest.mark.parametrize("stride", [1, 2, 3])
    def test_equals_affine_on_unrolled_input(self, stride):
        rng = np.random.default_rng(stride)
        x = rng.standard_normal((2, 2, 8, 8)).astype(np.float32)
        kernel = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        cols, (n, ho, wo) = im2col(x, 4, 4, stride)
        unrolled = F.affine_forward(cols, kernel.reshape(3, -1), b).data
        expected = unrolled.reshape(n, ho, wo, 3).transpose(0, 3, 1, 2)
        out = F.conv2d_forward(x, kernel, b, stride=stride)
        np.testing.assert_allclose(out.data, expected, atol=1e-5)

    def test_output_extent(self):
        out = F.conv2d_forward(np.zeros((1, 1, 28, 28)), np.zeros((4, 1, 4, 4)), stride=2)
        assert out.shape == (1, 4, 13, 13)

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            F.conv2d_forward(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))


class TestReLU:
    def test_mixed_signs(self):
        np.testing.assert_array_equal(F.relu_forward([-1.0, 0.0, 2.0]).data, [0.0, 0.0, 2.0])

    def test_all_negative(self):
        assert np.all(F.relu_forward(-np.arange(1.0, 5.0)).data == 0)

    def test_all_positive_is_identity(self):
        x = np.arange(1.0, 5.0, dtype=np.float32)
        np.testing.assert_array_equal(F.relu_forward(x).data, x)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = F.softmax_cross_entropy([[0.0, 0.0]], 0)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_large_logits_do_not_overflow(self):
        loss = F.softmax_cross_entropy([[1000.0, 0.0]], 0)
        assert np.isfinite(loss.item())
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_direct_formula(self):
        loss = F.softmax_cross_entropy([[1.0, 2.0, 3.0]], 2)
        expected = -3 + math.log(math.e + math.e**2 + math.e**3)
        assert loss.item() == pytest.approx(expected, abs=1e-5)
        assert loss.item() == pytest.approx(0.4076, abs=1e-4)

    def test_mean_over_batch(self):
        loss = F.softmax_cross_entropy([[0.0, 0.0], [1000.0, 0.0]], [0, 0])
        assert loss.item() == pytest.approx(math.log(2) / 2, abs=1e-6)

    @pytest.mark.parametrize("target", [-1, 3])
    def test_target_out_of_range(self, target):
        with pytest.raises(IndexError):
            F.softmax_cross_entropy([[0.0, 1.0, 2.0]], target)


class TestBackward:
    def test_linear_gradient_is_outer_structure(self):
        x = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
        w = Parameter(np.ones((2, 3)))
        F.affine_forward(x, w).sum().backward()
        np.testing.assert_array_equal(w.grad, np.repeat(x, 2, axis=0))

    def test_two_layer_relu_net(self):
        rng = np.random.default_rng(3)
        arrays = [
            rng.standard_normal((4, 5)),
            rng.standard_normal((6, 5)),
            rng.standard_normal(6),
            rng.standard_normal((3, 6)),
            rng.standard_normal(3),
        ]

        def net(x, w1, b1, w2, b2):
            hidden = F.relu_forward(F.affine_forward(x, w1, b1))
            return F.affine_forward(hidden, w2, b2)

        check_gradients(net, arrays, seed=3)

    def test_parameter_off_the_loss_path_has_zero_gradient(self):
        used = Parameter(np.ones(3))
        unused = Parameter(np.ones(3))
        (used * 2.0).sum().backward()
        np.testing.assert_array_equal(unused.grad, np.zeros(3))
        np.testing.assert_array_equal(used.grad, np.full(3, 2.0))

    def test_backward_without_forward(self):
        with pytest.raises(GraphStateError):
            Tensor([1.0], requires_grad=True).backward()

    def test_graph_is_cleared_after_backward(self):
        w = Parameter(np.ones(2))
        loss = (w * w).sum()
        loss.backward()
        with pytest.raises(GraphStateError):
            loss.backward()

    def test_non_scalar_needs_seed(self):
        out = Parameter(np.ones(2)) * 3.0
        with pytest.raises(GraphStateError):
            out.backward()

    def test_gradients_accumulate_across_passes(self):
        w = Parameter(np.ones(2))
        (w * 2.0).sum().backward()
        (w * 3.0).sum().backward()
        np.testing.assert_array_equal(w.grad, np.full(2, 5.0))

    def test_shared_node_sums_both_paths(self):
        w = Parameter(np.array([2.0]))
        y = w * w
        (y + y).sum().backward()
        np.testing.assert_allclose(w.grad, [8.0])

    def test_no_grad_records_nothing(self):
        w = Parameter(np.ones(2))
        with no_grad():
            out = w * 2.0
        assert out.creator is None
        assert not out.requires_grad

    def test_use_dtype_restores_previous(self):
        assert get_dtype() == np.float32
        with use_dtype(np.float64):
            assert Tensor([1.0]).data.dtype == np.float64
        assert Tensor([1.0]).data.dtype == np.float32

    def test_item_requires_single_element(self):
        with pytest.raises(DimensionError):
            Tensor([1.0, 2.0]).item()


def _cases(rng):
    """(build, arrays) pairs covering every differentiable operation."""
    x4 = rng.uniform(0.5, 1.5, size=(2, 2, 5, 5))
    return [
        (lambda a, b: a + b, [rng.standard_normal((3, 4)), rng.standard_normal(4)]),
        (lambda a, b: a * b, [rng.standard_normal((3, 4)), rng.standard_normal((3, 1))]),
        (lambda a, b: a - b, [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]),
        (lambda a: F.abs_(a), [rng.standard_normal((3, 4))]),
        (lambda a: F.relu_forward(a), [rng.standard_normal((3, 4))]),
        (lambda a: F.reshape(a, (4, 3)), [rng.standard_normal((3, 4))]),
        (lambda a: F.take(a, np.array([2, 0, 2]), axis=0), [rng.standard_normal((3, 4))]),
        (lambda a, b: F.concat([a, b], axis=1), [rng.standard_normal((2, 3)), rng.standard_normal((2, 2))]),
        (lambda a: F.sum_(a, axis=1), [rng.standard_normal((3, 4))]),
        (lambda a: F.sum_(a, axis=0, keepdims=True), [rng.standard_normal((3, 4))]),
        (lambda a: F.mean(a), [rng.standard_normal((3, 4))]),
        (lambda a: F.amin(a, axis=1), [rng.standard_normal((3, 5))]),
        (lambda a: F.amax(a, axis=0), [rng.standard_normal((3, 5))]),
        (lambda a: F.topk_sum(a, 3), [rng.standard_normal((4, 7))]),
        (lambda a, b: F.matmul(a, b), [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))]),
        (
            lambda x, w, b: F.affine_forward(x, w, b),
            [rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal(5)],
        ),
        (
            lambda x, k, b: F.conv2d_forward(x, k, b, stride=1),
            [x4, rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)],
        ),
        (
            lambda x, k: F.conv2d_forward(x, k, stride=2),
            [x4, rng.standard_normal((2, 2, 2, 2))],
        ),
        (lambda x: F.pad2d(x, 2), [rng.standard_normal((1, 2, 3, 3))]),
        (lambda x: F.crop2d(x, 1, 0, 2, 3), [rng.standard_normal((1, 2, 4, 4))]),
        (lambda x: F.upsample_nearest(x, 2), [rng.standard_normal((1, 2, 3, 3))]),
        (
            lambda logits: F.softmax_cross_entropy(logits, np.array([0, 2, 1])),
            [rng.standard_normal((3, 4))],
        ),
    ]


@pytest.mark.parametrize("seed", range(20))
def test_every_operation_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for build, arrays in _cases(rng):
        check_gradients(build, arrays, seed=seed)


def test_forward_is_pure():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 1, 6, 6)).astype(np.float32)
    k = rng.standard_normal((3, 1, 3, 3)).astype(np.float32)
    first = F.conv2d_forward(x, k).data
    second = F.conv2d_forward(x, k).data
    assert first.tobytes() == second.tobytes()
