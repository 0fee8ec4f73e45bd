"""
Tests for tensors, numeric kernels and reverse-mode gradients
"""
import numpy as np
import pytest

from app.domain import ops
from app.domain.entities import Mode
from app.domain.exceptions import GraphStateError, InvalidArgumentError, NumericError
from app.domain.losses import CLAMP_EPSILON
from app.domain.ops import RunningStats
from app.domain.tensor import Tensor, backward, no_grad

SEEDS = range(50)


def conv_oracle(x, kernel, bias, stride, padding):
    """Direct nested-sum cross-correlation."""
    n, ci, h, w = x.shape
    co, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    total = bias[o]
                    for c in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                total += xp[b, c, i * stride + u, j * stride + v] * kernel[o, c, u, v]
                    out[b, o, i, j] = total
    return out


def away_from_zero(values, margin=0.05):
    """Keep ReLU inputs off the kink so finite differences stay exact."""
    return values + np.sign(values) * margin


class TestTensor:
    """Test the tensor type"""

    def test_data_is_read_only_copy(self):
        """Test that a tensor copies and freezes its input"""
        source = np.ones((2, 2))
        t = Tensor(source)
        source[0, 0] = 5.0
        assert t.data[0, 0] == 1.0
        with pytest.raises(ValueError):
            t.data[0, 0] = 2.0

    def test_numpy_returns_writable_copy(self):
        """Test numpy() is detached from the tensor"""
        t = Tensor([1.0, 2.0])
        copy = t.numpy()
        copy[0] = 9.0
        assert t.data[0] == 1.0


class TestConv2d:
    """Test convolution forward"""

    def test_ones_window_sum(self):
        """Test all-ones 2x2 kernel over all-ones 3x3 input"""
        out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    def test_unit_kernel_is_identity(self):
        """Test 1x1 unit kernel copies the input"""
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
    def test_matches_nested_loop_oracle(self, rng, stride, padding):
        """Test convolution against the direct nested-loop sum"""
        x = rng.normal(size=(2, 3, 5, 5))
        kernel = rng.normal(size=(4, 3, 3, 3))
        bias = rng.normal(size=4)
        out = ops.conv2d(Tensor(x), Tensor(kernel), Tensor(bias), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, conv_oracle(x, kernel, bias, stride, padding), rtol=0, atol=1e-12)

    def test_output_geometry(self, rng):
        """Test H' = floor((H + 2p - kh) / s) + 1"""
        out = ops.conv2d(Tensor(rng.normal(size=(1, 2, 6, 5))), Tensor(rng.normal(size=(3, 2, 3, 2))),
                         Tensor(np.zeros(3)), stride=2, padding=1)
        assert out.shape == (1, 3, 3, 3)

    def test_channel_mismatch_names_shapes(self, rng):
        """Test shape mismatch error names both shapes"""
        with pytest.raises(InvalidArgumentError) as exc:
            ops.conv2d(Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(rng.normal(size=(1, 3, 3, 3))),
                       Tensor(np.zeros(1)))
        assert "(1, 2, 4, 4)" in str(exc.value) and "(1, 3, 3, 3)" in str(exc.value)

    def test_kernel_larger_than_input_rejected(self, rng):
        """Test kernel must fit the padded input"""
        with pytest.raises(InvalidArgumentError):
            ops.conv2d(Tensor(rng.normal(size=(1, 1, 2, 2))), Tensor(rng.normal(size=(1, 1, 3, 3))),
                       Tensor(np.zeros(1)))


class TestElementwiseAndPooling:
    """Test small kernels against hand-computed values"""

    def test_sigmoid_at_zero(self):
        """Test sigmoid(0) = 0.5 with gradient 0.25"""
        x = Tensor([0.0], requires_grad=True, name="x")
        out = ops.sigmoid(x)
        assert out.data[0] == 0.5
        assert backward(out)["x"][0] == pytest.approx(0.25)

    def test_sigmoid_is_stable_for_large_inputs(self):
        """Test no overflow at extreme logits and outputs held inside the loss clamp"""
        out = ops.sigmoid(Tensor([-800.0, 800.0]))
        np.testing.assert_array_equal(out.data, [CLAMP_EPSILON, 1.0 - CLAMP_EPSILON])

    def test_global_pools(self):
        """Test avg and max pooling of [[1,2],[3,4]]"""
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert ops.global_avg_pool(x).data[0, 0] == 2.5
        assert ops.global_max_pool(x).data[0, 0] == 4.0

    def test_global_pools_need_four_axes(self):
        """Test pooling rejects 2-D input"""
        with pytest.raises(InvalidArgumentError):
            ops.global_avg_pool(Tensor(np.ones((2, 2))))

    def test_global_max_tie_goes_to_lowest_index(self):
        """Test tied maxima route the gradient to the first position"""
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True, name="x")
        grads = backward(ops.global_max_pool(x), np.ones((1, 1)))
        np.testing.assert_array_equal(grads["x"].ravel(), [1.0, 0.0, 0.0, 0.0])

    def test_max_pool_tie_goes_to_lowest_index(self):
        """Test tied window maxima route the gradient to the first position of each window"""
        x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True, name="x")
        grads = backward(ops.max_pool(x, 2, 2), np.ones((1, 1, 2, 2)))
        expected = np.zeros((4, 4))
        expected[::2, ::2] = 1.0
        np.testing.assert_array_equal(grads["x"][0, 0], expected)

    def test_max_pool_forward(self):
        """Test 2x2/2 max pooling"""
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(ops.max_pool(Tensor(x)).data[0, 0], [[5.0, 7.0], [13.0, 15.0]])

    def test_add_shape_mismatch(self):
        """Test add requires equal shapes"""
        with pytest.raises(InvalidArgumentError):
            ops.add(Tensor(np.ones(2)), Tensor(np.ones(3)))

    def test_non_finite_output_raises(self):
        """Test NaN/inf detection"""
        with pytest.raises(NumericError):
            ops.relu(Tensor([np.inf]))


class TestBatchNorm:
    """Test batch normalization"""

    def test_train_output_statistics(self, rng):
        """Test per-channel mean approx beta and std approx gamma"""
        x = rng.normal(size=(4, 3, 5, 5)) * 10.0 + 3.0
        gamma, beta = np.array([1.0, 2.0, 0.5]), np.array([0.0, -1.0, 3.0])
        out = ops.batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), Mode.TRAIN).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-6)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), gamma, atol=1e-6)

    def test_normalized_input_unchanged(self, rng):
        """Test identity on already normalized input"""
        x = rng.normal(size=(2, 1, 8, 8))
        x = (x - x.mean()) / x.std()
        out = ops.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), Mode.TRAIN).data
        np.testing.assert_allclose(out, x, atol=1e-4)

    def test_constant_channel_gives_beta(self):
        """Test zero variance is guarded by epsilon"""
        out = ops.batch_norm(Tensor(np.full((2, 1, 3, 3), 7.0)), Tensor(np.ones(1)), Tensor(np.array([0.3])),
                             Mode.TRAIN).data
        np.testing.assert_allclose(out, 0.3)

    def test_running_statistics_update(self, rng):
        """Test running = momentum * running + (1 - momentum) * batch"""
        x = rng.normal(size=(2, 2, 3, 3))
        running = RunningStats.fresh(2)
        ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), Mode.TRAIN, running, momentum=0.9)
        np.testing.assert_allclose(running.mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(running.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))

    def test_inference_uses_running_statistics(self, rng):
        """Test inference mode normalizes with the stored statistics"""
        x = rng.normal(size=(1, 1, 2, 2))
        running = RunningStats(mean=np.array([1.0]), var=np.array([4.0]))
        out = ops.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), Mode.INFERENCE, running).data
        np.testing.assert_allclose(out, (x - 1.0) / np.sqrt(4.0 + 1e-5))

    def test_single_value_batch_rejected_in_train_mode(self):
        """Test N*H*W >= 2 precondition"""
        with pytest.raises(InvalidArgumentError):
            ops.batch_norm(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)), Mode.TRAIN)


class TestBackward:
    """Test graph recording and release"""

    def test_backward_without_forward(self):
        """Test backward on a leaf is a state error"""
        with pytest.raises(GraphStateError):
            backward(Tensor([1.0], requires_grad=True, name="x"))

    def test_graph_released_after_backward(self):
        """Test a second backward on the same output is a state error"""
        out = ops.sigmoid(Tensor([0.5], requires_grad=True, name="x"))
        backward(out)
        with pytest.raises(GraphStateError):
            backward(out)

    def test_no_grad_records_nothing(self):
        """Test forward passes under no_grad leave no graph"""
        with no_grad():
            out = ops.sigmoid(Tensor([0.5], requires_grad=True, name="x"))
        assert not out.is_recorded
        assert ops.sigmoid(Tensor([0.5], requires_grad=True, name="x")).is_recorded

    def test_leaf_without_grad_has_no_entry(self, rng):
        """Test frozen leaves get no gradient entry"""
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True, name="x")
        w = Tensor(rng.normal(size=(2, 3)), requires_grad=False, name="w")
        grads = backward(ops.fully_connected(x, w, Tensor(np.zeros(2))), np.ones((2, 2)))
        assert set(grads) == {"x"}

    def test_shared_input_accumulates(self):
        """Test a tensor used twice gets the summed gradient"""
        x = Tensor([1.0, -2.0], requires_grad=True, name="x")
        grads = backward(ops.add(x, x), np.ones(2))
        np.testing.assert_array_equal(grads["x"], [2.0, 2.0])

    def test_upstream_shape_checked(self):
        """Test upstream gradient must match the output"""
        out = ops.sigmoid(Tensor([0.0, 1.0], requires_grad=True, name="x"))
        with pytest.raises(InvalidArgumentError):
            backward(out, np.ones(3))


class TestGradientSuite:
    """Finite-difference checks of every kernel over many seeds"""

    def test_conv2d(self, gradient_check):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            arrays = {"x": rng.normal(size=(1, 2, 5, 5)), "k": rng.normal(size=(3, 2, 3, 3)), "b": rng.normal(size=3)}
            stride, padding = (1, 1) if seed % 2 else (2, 0)
            gradient_check(lambda: ops.conv2d(*(Tensor(arrays[n], True, n) for n in ("x", "k", "b")),
                                              stride=stride, padding=padding), arrays, seed)

    def test_conv2d_parameters_small_input(self, gradient_check, rng):
        arrays = {"x": rng.normal(size=(1, 1, 4, 4)), "k": rng.normal(size=(1, 1, 3, 3)), "b": rng.normal(size=1)}
        gradient_check(lambda: ops.conv2d(*(Tensor(arrays[n], True, n) for n in ("x", "k", "b"))), arrays)

    def test_relu(self, gradient_check):
        for seed in SEEDS:
            arrays = {"x": away_from_zero(np.random.default_rng(seed).normal(size=(2, 3, 3)))}
            gradient_check(lambda: ops.relu(Tensor(arrays["x"], True, "x")), arrays, seed)

    def test_sigmoid(self, gradient_check):
        for seed in SEEDS:
            arrays = {"x": np.random.default_rng(seed).normal(size=(3, 4)) * 3}
            gradient_check(lambda: ops.sigmoid(Tensor(arrays["x"], True, "x")), arrays, seed)

    def test_add(self, gradient_check):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            arrays = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 3))}
            gradient_check(lambda: ops.add(Tensor(arrays["a"], True, "a"), Tensor(arrays["b"], True, "b")),
                           arrays, seed)

    def test_global_avg_pool(self, gradient_check):
        for seed in SEEDS:
            arrays = {"x": np.random.default_rng(seed).normal(size=(2, 3, 3, 4))}
            gradient_check(lambda: ops.global_avg_pool(Tensor(arrays["x"], True, "x")), arrays, seed)

    def test_global_max_pool(self, gradient_check):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            # distinct values, gaps far above eps
            arrays = {"x": rng.permutation(2 * 3 * 9).reshape(2, 3, 3, 3) * 0.1}
            gradient_check(lambda: ops.global_max_pool(Tensor(arrays["x"], True, "x")), arrays, seed)

    def test_max_pool(self, gradient_check):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            arrays = {"x": rng.permutation(2 * 5 * 5).reshape(1, 2, 5, 5) * 0.1}
            kernel, stride = (2, 2) if seed % 2 else (3, 1)
            gradient_check(lambda: ops.max_pool(Tensor(arrays["x"], True, "x"), kernel, stride), arrays, seed)

    def test_fully_connected(self, gradient_check):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            arrays = {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(2, 4)), "b": rng.normal(size=2)}
            gradient_check(lambda: ops.fully_connected(*(Tensor(arrays[n], True, n) for n in ("x", "w", "b"))),
                           arrays, seed)

    @pytest.mark.parametrize("mode", [Mode.TRAIN, Mode.INFERENCE])
    def test_batch_norm(self, gradient_check, mode):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            arrays = {"x": rng.normal(size=(2, 3, 2, 2)), "g": rng.normal(size=3), "b": rng.normal(size=3)}
            running = RunningStats(mean=rng.normal(size=3), var=rng.uniform(0.5, 2.0, size=3))
            # fresh stats per call: every evaluation sees the same values
            gradient_check(lambda: ops.batch_norm(*(Tensor(arrays[n], True, n) for n in ("x", "g", "b")),
                                                  mode=mode, running=RunningStats(running.mean, running.var)),
                           arrays, seed)
