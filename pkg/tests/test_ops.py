"""Neural primitive semantics: hand-computed cases and structural laws."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dffnet import ops
from dffnet.tensor import ShapeError, Tensor


def delta_kernel(channels: int, k: int) -> np.ndarray:
    w = np.zeros((channels, channels, k, k))
    for c in range(channels):
        w[c, c, k // 2, k // 2] = 1.0
    return w


class TestConv2d:
    def test_ones_hand_convolution(self):
        x = Tensor(np.ones((1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        y = ops.conv2d(x, w).data[0]
        # zero 'same' padding: corners see 4 ones, edges 6, center 9
        np.testing.assert_array_equal(y, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_centered_delta_is_identity(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
        y = ops.conv2d(Tensor(x), Tensor(delta_kernel(3, 3)))
        np.testing.assert_allclose(y.data, x, atol=1e-14)

    def test_1x1_kernel_scales(self):
        x = np.random.default_rng(1).normal(size=(1, 4, 4))
        w = np.full((1, 1, 1, 1), 2.0)
        np.testing.assert_allclose(ops.conv2d(Tensor(x), Tensor(w)).data, 2.0 * x)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="conv2d"):
            ops.conv2d(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))

    def test_linear_in_input_and_weights(self):
        rng = np.random.default_rng(2)
        x1, x2 = rng.normal(size=(2, 1, 2, 4, 4))
        w1, w2 = rng.normal(size=(2, 3, 2, 3, 3))
        a, b = rng.normal(size=2)

        def run(x, w):
            return ops.conv2d(Tensor(x), Tensor(w)).data

        np.testing.assert_allclose(run(a * x1 + b * x2, w1), a * run(x1, w1) + b * run(x2, w1), atol=1e-12)
        np.testing.assert_allclose(run(x1, a * w1 + b * w2), a * run(x1, w1) + b * run(x1, w2), atol=1e-12)


class TestConv3d:
    def test_centered_delta_is_identity(self):
        x = np.random.default_rng(3).normal(size=(1, 1, 5, 4, 4))
        w = np.zeros((1, 1, 3, 3, 3))
        w[0, 0, 1, 1, 1] = 1.0
        np.testing.assert_allclose(ops.conv3d(Tensor(x), Tensor(w)).data, x, atol=1e-14)

    def test_unit_kernel_doubles(self):
        x = np.random.default_rng(4).normal(size=(1, 3, 4, 4))
        w = np.full((1, 1, 1, 1, 1), 2.0)
        np.testing.assert_allclose(ops.conv3d(Tensor(x), Tensor(w)).data, 2.0 * x)

    def test_stem_shape_arithmetic(self):
        # depth 30 -> (30-7)//2+1 = 12 under spectral stride 2, spatial 'same'
        x = Tensor(np.zeros((1, 30, 11, 11)))
        w = Tensor(np.zeros((8, 1, 7, 3, 3)))
        y = ops.conv3d(x, w, stride=(2, 1, 1), padding=(0, 1, 1))
        assert y.shape == (8, 12, 11, 11)


class TestLinear:
    def test_identity(self):
        x = np.array([1.0, -2.0, 3.0])
        y = ops.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(y.data, x)

    def test_row_sum(self):
        y = ops.linear(Tensor([2.0, 3.0]), Tensor([[1.0, 1.0]]), Tensor([0.0]))
        np.testing.assert_array_equal(y.data, [5.0])

    def test_hand_matrix_product(self):
        y = ops.linear(Tensor([1.0, 1.0]), Tensor([[2.0, 0.0], [0.0, 3.0]]),
                       Tensor([1.0, 1.0]))
        np.testing.assert_array_equal(y.data, [3.0, 4.0])


class TestActivations:
    def test_relu_examples(self):
        np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(ops.relu(Tensor([-3.0, -0.5])).data, [0.0, 0.0])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_relu_idempotent(self, seed):
        x = np.random.default_rng(seed).normal(size=8)
        once = ops.relu(Tensor(x)).data
        twice = ops.relu(ops.relu(Tensor(x))).data
        np.testing.assert_array_equal(once, twice)

    def test_softmax_uniform(self):
        np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_softmax_log3(self):
        y = ops.softmax(Tensor([0.0, np.log(3.0)])).data
        np.testing.assert_allclose(y, [0.25, 0.75], atol=1e-14)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31), st.floats(-50, 50))
    def test_softmax_normalized_and_shift_invariant(self, seed, shift):
        x = np.random.default_rng(seed).normal(size=(2, 5))
        s = ops.softmax(Tensor(x)).data
        assert (s > 0).all()
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(ops.softmax(Tensor(x + shift)).data, s, atol=1e-12)


class TestPooling:
    def test_constant_map(self):
        x = Tensor(np.full((3, 2, 2), 7.0))
        np.testing.assert_allclose(ops.pool_spatial(x, "avg").data, [7.0] * 3)
        np.testing.assert_allclose(ops.pool_spatial(x, "max").data, [7.0] * 3)

    def test_avg_and_max_values(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        assert ops.pool_spatial(x, "avg").data[0] == pytest.approx(2.5)
        assert ops.pool_spatial(x, "max").data[0] == pytest.approx(4.0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_avg_never_exceeds_max(self, seed):
        x = np.random.default_rng(seed).normal(size=(2, 3, 4, 4))
        avg = ops.pool_spatial(Tensor(x), "avg").data
        mx = ops.pool_spatial(Tensor(x), "max").data
        assert (avg <= mx + 1e-12).all()

    def test_pool_channel_single_channel_identity(self):
        x = np.random.default_rng(5).normal(size=(1, 3, 3))
        np.testing.assert_array_equal(ops.pool_channel(Tensor(x), "avg").data, x)
        np.testing.assert_array_equal(ops.pool_channel(Tensor(x), "max").data, x)

    def test_pool_channel_values_and_shape(self):
        x = np.zeros((2, 1, 1))
        x[0, 0, 0], x[1, 0, 0] = 1.0, 3.0
        assert ops.pool_channel(Tensor(x), "avg").data[0, 0, 0] == pytest.approx(2.0)
        assert ops.pool_channel(Tensor(x), "max").data[0, 0, 0] == pytest.approx(3.0)
        out = ops.pool_channel(Tensor(np.zeros((7, 4, 5))), "avg")
        assert out.shape == (1, 4, 5)


class TestChannelShuffle:
    def channels_of(self, c):
        return np.arange(float(c)).reshape(c, 1, 1) * np.ones((c, 2, 2))

    def test_four_channels(self):
        y = ops.channel_shuffle(Tensor(self.channels_of(4)), 2)
        np.testing.assert_array_equal(y.data[:, 0, 0], [0, 2, 1, 3])

    def test_six_channels_index_formula(self):
        y = ops.channel_shuffle(Tensor(self.channels_of(6)), 2)
        np.testing.assert_array_equal(y.data[:, 0, 0], [0, 3, 1, 4, 2, 5])
        # out[i] = in[(i mod g) * C/g + i div g]
        expected = [(i % 2) * 3 + i // 2 for i in range(6)]
        np.testing.assert_array_equal(y.data[:, 0, 0], expected)

    def test_groups_one_identity(self):
        x = self.channels_of(5)
        np.testing.assert_array_equal(ops.channel_shuffle(Tensor(x), 1).data, x)

    def test_rejects_indivisible(self):
        with pytest.raises(ShapeError):
            ops.channel_shuffle(Tensor(self.channels_of(5)), 2)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6))
    def test_bijection_and_inverse(self, g, per_group):
        c = g * per_group
        perm = ops.shuffle_permutation(c, g)
        assert sorted(perm) == list(range(c))
        x = np.random.default_rng(c * 7 + g).normal(size=(c, 2, 2))
        once = ops.channel_shuffle(Tensor(x), g)
        back = ops.channel_shuffle(once, c // g)
        np.testing.assert_array_equal(back.data, x)
        # multiset of channel slices preserved exactly
        orig = {x[i].tobytes() for i in range(c)}
        shuffled = {once.data[i].tobytes() for i in range(c)}
        assert orig == shuffled


class TestChannelPlumbing:
    def test_concat_then_slice_round_trip(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(1, 2, 3, 3))
        b = rng.normal(size=(1, 3, 3, 3))
        cat = ops.concat_channels([Tensor(a), Tensor(b)])
        np.testing.assert_array_equal(ops.slice_channels(cat, 0, 2).data, a)
        np.testing.assert_array_equal(ops.slice_channels(cat, 2, 5).data, b)

    def test_slice_bounds(self):
        with pytest.raises(ShapeError):
            ops.slice_channels(Tensor(np.zeros((2, 3, 3))), 1, 4)


class TestGradients:
    @pytest.mark.parametrize("name", [
        "conv2d", "conv2d_strided", "conv3d", "depthwise_conv2d", "linear", "relu",
        "softmax", "pool_spatial_avg", "pool_spatial_max", "pool_channel_avg",
        "pool_channel_max", "channel_shuffle", "concat_slice",
    ])
    def test_op_gradcheck(self, name):
        from dffnet.checks import run_checks

        ((_, report),) = run_checks([name], 1e-4, 2)
        assert report.passed, f"{name}: {report}"

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(10))
    def test_every_op_many_random_inputs(self, seed):
        from dffnet.checks import REGISTRY, run_checks

        composites = {"dfb", "ssafb", "model", "ffn", "channel_attention",
                      "spatial_attention", "apply_filter", "mix_bases"}
        names = sorted(set(REGISTRY) - composites)
        for name, report in run_checks(names, 1e-4, 1000 + seed):
            assert report.passed, f"{name} seed {seed}: {report}"
