"""Autodiff core: op gradients, conv/pool oracles, graph lifecycle, serialization."""

import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualstream import tensor as T
from dualstream.errors import ConfigError, DimensionError, NumericError, StateError
from dualstream.tensor import BatchNormState, Tensor


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape))


def naive_conv(x, k, b=None):
    """Direct 3x3 cross-correlation with zero padding of one; x is (C, H, W)."""
    c, h, w = x.shape
    out = np.zeros((k.shape[0], h, w))
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    for o in range(k.shape[0]):
        for i in range(h):
            for j in range(w):
                out[o, i, j] = np.sum(xp[:, i : i + 3, j : j + 3] * k[o])
        if b is not None:
            out[o] += b[o]
    return out


class TestElementwiseGradients:
    @pytest.mark.parametrize(
        "fn",
        [
            lambda x: (x * x).sum(),
            lambda x: T.exp(x * 0.3).mean(),
            lambda x: T.log(T.exp(x) + 1.0).sum(),
            lambda x: T.power(T.exp(x), 1.5).sum(),
            lambda x: (T.relu(x) * 2.0 - x).sum(),
            lambda x: T.log(T.pick(T.softmax(x, -1), [0, 2, 1])).sum(),
            lambda x: T.tsum(x, axis=0).mean(),
            lambda x: T.transpose(x).reshape(12).sum(),
        ],
    )
    def test_grad_check(self, fn):
        rng = np.random.default_rng(0)
        x = _rand(rng, 3, 4)
        assert T.grad_check(fn, x) < 1e-7

    def test_broadcast_add_reduces_gradient(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        T.backward((a + b).sum())
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))

    def test_power_zero_has_zero_gradient(self):
        x = Tensor(np.array([0.0, 2.0]), requires_grad=True)
        T.backward(T.power(x, 0.0).sum())
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_softmax_rows_sum_to_one_for_large_logits(self):
        x = Tensor(np.array([[1000.0, 999.0, -1000.0]]))
        s = T.softmax(x).data
        assert np.isclose(s.sum(), 1.0) and np.all(np.isfinite(s))


class TestLinearAndNorms:
    def test_linear_gradients(self):
        rng = np.random.default_rng(1)
        x, w, b = _rand(rng, 5, 4), _rand(rng, 3, 4), _rand(rng, 3)
        for target in (x, w, b):
            assert T.grad_check(lambda _: (T.linear(x, w, b) ** 2).sum(), target) < 1e-7

    def test_linear_vector_input(self):
        x = Tensor(np.array([1.0, 2.0]))
        w = Tensor(np.array([[1.0, 0.0], [0.0, 3.0]]))
        np.testing.assert_array_equal(T.linear(x, w).data, [1.0, 6.0])

    def test_linear_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.linear(Tensor(np.ones(3)), Tensor(np.ones((2, 4))))

    def test_layernorm_gradients(self):
        rng = np.random.default_rng(2)
        x, g, b = _rand(rng, 3, 6), _rand(rng, 6), _rand(rng, 6)
        w = rng.normal(size=(3, 6))
        for target in (x, g, b):
            assert T.grad_check(lambda _: (T.layernorm(x, g, b) * w).sum(), target) < 1e-6

    def test_layernorm_output_statistics(self):
        x = Tensor(np.random.default_rng(3).normal(5, 3, size=(4, 32)))
        y = T.layernorm(x, Tensor(np.ones(32)), Tensor(np.zeros(32))).data
        np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-4)

    def test_batchnorm_train_gradients(self):
        rng = np.random.default_rng(4)
        x, g, b = _rand(rng, 2, 3, 4, 4), _rand(rng, 2), _rand(rng, 2)
        w = rng.normal(size=x.shape)
        for target in (x, g, b):
            fn = lambda _: (T.batchnorm2d(x, g, b, BatchNormState(2), True) * w).sum()
            assert T.grad_check(fn, target) < 1e-6

    def test_batchnorm_eval_gradients(self):
        rng = np.random.default_rng(5)
        x, g, b = _rand(rng, 2, 1, 3, 3), _rand(rng, 2), _rand(rng, 2)
        state = BatchNormState(2)
        state.running_mean = np.array([0.3, -0.2])
        state.running_var = np.array([2.0, 0.5])
        assert T.grad_check(lambda _: (T.batchnorm2d(x, g, b, state, False) ** 2).sum(), x) < 1e-7

    def test_batchnorm_running_statistics(self):
        x = np.random.default_rng(6).normal(2.0, 3.0, size=(1, 4, 5, 5))
        state = BatchNormState(1)
        T.batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, True)
        m = x.size
        np.testing.assert_allclose(state.running_mean, 0.1 * x.mean())
        np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var() * m / (m - 1))

    def test_batchnorm_needs_two_samples_in_train(self):
        with pytest.raises(ConfigError):
            T.batchnorm2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), BatchNormState(1), True)


class TestConvolution:
    def test_matches_naive_loop_exactly_on_integers(self):
        # integer-valued inputs make every partial sum exact, so order cannot matter
        rng = np.random.default_rng(7)
        x = rng.integers(-8, 9, size=(3, 7, 6)).astype(float)
        k = rng.integers(-4, 5, size=(5, 3, 3, 3)).astype(float)
        b = rng.integers(-3, 4, size=5).astype(float)
        out = T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
        np.testing.assert_array_equal(out, naive_conv(x, k, b))

    def test_matches_naive_loop_on_reals(self):
        rng = np.random.default_rng(8)
        x, k = rng.normal(size=(2, 5, 5)), rng.normal(size=(4, 2, 3, 3))
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k)).data, naive_conv(x, k), rtol=1e-12, atol=1e-12)

    def test_batched_equals_per_image(self):
        rng = np.random.default_rng(9)
        x, k = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(3, 2, 3, 3))
        batched = T.conv2d(Tensor(x), Tensor(k)).data
        for n in range(3):
            np.testing.assert_allclose(batched[:, n], naive_conv(x[:, n], k), atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(10)
        x, k, b = _rand(rng, 2, 2, 5, 4), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)
        w = rng.normal(size=(3, 2, 5, 4))
        for target in (x, k, b):
            assert T.grad_check(lambda _: (T.conv2d(x, k, b) * w).sum(), target) < 1e-7

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


class TestMaxPool:
    def test_values(self):
        x = np.arange(16.0).reshape(1, 4, 4)
        np.testing.assert_array_equal(T.maxpool2x2(Tensor(x)).data, [[[5, 7], [13, 15]]])

    def test_tie_routes_gradient_to_first_cell(self):
        x = Tensor(np.full((1, 2, 2), 3.0), requires_grad=True)
        T.backward(T.maxpool2x2(x).sum())
        np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])

    def test_gradients(self):
        x = Tensor(np.random.default_rng(11).normal(size=(2, 2, 4, 6)))
        w = np.random.default_rng(12).normal(size=(2, 2, 2, 3))
        assert T.grad_check(lambda v: (T.maxpool2x2(v) * w).sum(), x) < 1e-7

    def test_odd_extent_rejected(self):
        with pytest.raises(DimensionError):
            T.maxpool2x2(Tensor(np.ones((1, 3, 4))))


class TestDropout:
    def test_eval_is_identity(self):
        x = Tensor(np.ones(10))
        assert T.dropout(x, 0.5, False) is x

    def test_inverted_scaling(self):
        y = T.dropout(Tensor(np.ones(200_000)), 0.4, True, np.random.default_rng(0)).data
        assert set(np.unique(y)) <= {0.0, 1.0 / 0.6}
        assert abs(y.mean() - 1.0) < 0.01

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_bad_probability(self, p):
        with pytest.raises(ConfigError):
            T.dropout(Tensor(np.ones(3)), p, True, np.random.default_rng(0))


class TestGraphLifecycle:
    def test_second_backward_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = (x * x).sum()
        T.backward(loss)
        with pytest.raises(StateError):
            T.backward(loss)

    def test_gradients_accumulate_across_graphs(self):
        x = Tensor(np.ones(2), requires_grad=True)
        T.backward(x.sum())
        T.backward((x * 2.0).sum())
        np.testing.assert_array_equal(x.grad, [3.0, 3.0])

    def test_shared_subexpression(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        T.backward((y + y).sum())
        np.testing.assert_array_equal(x.grad, [8.0])

    def test_non_scalar_loss(self):
        with pytest.raises(DimensionError):
            T.backward(Tensor(np.ones(2), requires_grad=True) * 2.0)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = x * 3.0
        assert y.is_leaf and not y.requires_grad

    def test_no_grad_is_thread_local(self):
        seen = []
        with T.no_grad():
            t = threading.Thread(target=lambda: seen.append(T.is_grad_enabled()))
            t.start()
            t.join()
            assert not T.is_grad_enabled()
        assert seen == [True] and T.is_grad_enabled()

    def test_non_finite_output_raises(self):
        with pytest.raises(NumericError):
            T.log(Tensor(np.array([-1.0])))

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(np.ones(1), requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        T.backward(y.sum())
        np.testing.assert_array_equal(x.grad, [1.0])


class TestSerialization:
    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=0, max_size=4), st.integers(0, 2**32 - 1))
    def test_roundtrip_is_bit_exact(self, shape, seed):
        arr = np.random.default_rng(seed).normal(size=shape) * 1e10
        back, end = T.tensor_from_bytes(T.tensor_to_bytes(arr))
        assert back.shape == arr.shape and end == len(T.tensor_to_bytes(arr))
        assert back.tobytes() == arr.tobytes()

    def test_concatenated_blocks(self):
        a, b = np.arange(6.0).reshape(2, 3), np.array(-0.0)
        buf = T.tensor_to_bytes(a) + T.tensor_to_bytes(b)
        first, pos = T.tensor_from_bytes(buf)
        second, end = T.tensor_from_bytes(buf, pos)
        np.testing.assert_array_equal(first, a)
        assert second.shape == () and np.signbit(second) and end == len(buf)

    def test_file_roundtrip(self, tmp_path):
        arr = np.random.default_rng(0).normal(size=(3, 2))
        T.save_tensor(tmp_path / "a.bin", arr)
        assert T.load_tensor(tmp_path / "a.bin").tobytes() == arr.tobytes()

    def test_header_layout(self):
        buf = T.tensor_to_bytes(np.zeros((2, 5)))
        assert buf[:4] == b"DSTN"
        assert buf[4:20] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + (2).to_bytes(4, "little") + (5).to_bytes(4, "little")

    @pytest.mark.parametrize("bad", [b"XXXX" + bytes(8), T.tensor_to_bytes(np.ones(4))[:-3]])
    def test_corrupt_block(self, bad):
        with pytest.raises(StateError):
            T.tensor_from_bytes(bad)
