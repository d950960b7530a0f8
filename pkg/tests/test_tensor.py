import math

import numpy as np
import pytest

from cmfdet import tensor as T

from oracles import (
    bilinear_loops,
    block_mean_loops,
    conv2d_loops,
    gelu_scalar,
    gradcheck,
    matmul_loops,
    softmax_scalar,
)


def t64(a, requires_grad=False):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        out = T.matmul(T.Tensor(np.eye(2)), T.Tensor(b))
        assert np.array_equal(out.data, b)

    def test_annihilator(self):
        out = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor(np.zeros((2, 2))))
        assert np.array_equal(out.data, np.zeros((2, 2)))

    def test_against_loop_oracle(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        out = T.matmul(t64(a), t64(b))
        assert np.allclose(out.data, matmul_loops(a, b), atol=0)
        assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_random_against_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        out = T.matmul(t64(a), t64(b))
        assert np.allclose(out.data, matmul_loops(a, b), rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(T.Tensor([0.0, 0.0, 0.0]), axis=0)
        assert np.allclose(out.data, [1 / 3] * 3, atol=1e-7)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 5))
        a = T.softmax(t64(x), axis=1).data
        b = T.softmax(t64(x + 7.25), axis=1).data
        assert np.allclose(a, b, atol=1e-12)

    def test_scalar_oracle(self):
        out = T.softmax(t64([1.0, 2.0, 3.0]), axis=0)
        expect = softmax_scalar([1.0, 2.0, 3.0])
        assert np.allclose(out.data, expect, atol=1e-12)
        assert np.allclose(out.data, [0.09003057, 0.24472847, 0.66524096], atol=1e-7)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        x = rng.normal(scale=30.0, size=(16, 40)).astype(np.float32)
        out = T.softmax(T.Tensor(x), axis=1)
        assert np.all(out.data >= 0)
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    def test_bad_axis(self):
        with pytest.raises(T.DimensionError):
            T.softmax(T.Tensor([1.0, 2.0]), axis=3)


class TestGelu:
    def test_zero(self):
        assert T.gelu(T.Tensor([0.0])).data[0] == 0.0

    def test_asymptote(self):
        assert abs(T.gelu(t64([10.0])).data[0] - 10.0) < 1e-6

    def test_tanh_formula(self):
        out = T.gelu(t64([1.0])).data[0]
        assert abs(out - gelu_scalar(1.0)) < 1e-12
        assert abs(out - 0.841192) < 1e-6


class TestConv2d:
    def test_one_by_one_identity(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 5, 5))
        k = np.zeros((2, 2, 1, 1))
        k[0, 0, 0, 0] = 1.0
        k[1, 1, 0, 0] = 1.0
        out = T.conv2d(t64(x), t64(k))
        assert np.allclose(out.data, x, atol=0)

    def test_zero_kernel(self):
        x = np.ones((1, 4, 4))
        out = T.conv2d(t64(x), t64(np.zeros((3, 1, 2, 2))))
        assert np.array_equal(out.data, np.zeros((3, 3, 3)))

    def test_sliding_window_oracle(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        k = np.ones((1, 1, 2, 2))
        out = T.conv2d(t64(x), t64(k), stride=2)
        assert np.array_equal(out.data, [[[10.0, 18.0], [42.0, 50.0]]])

    def test_random_against_loop_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 7, 6))
        k = rng.normal(size=(4, 3, 3, 3))
        for stride, padding in [(1, 0), (2, 1), (1, 1), (3, 1)]:
            out = T.conv2d(t64(x), t64(k), stride=stride, padding=padding)
            assert np.allclose(out.data, conv2d_loops(x, k, stride, padding), rtol=1e-10)

    def test_bias(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 4, 4))
        k = rng.normal(size=(3, 2, 3, 3))
        b = np.array([1.0, -2.0, 0.5])
        out = T.conv2d(t64(x), t64(k), bias=t64(b), padding=1)
        ref = conv2d_loops(x, k, 1, 1) + b[:, None, None]
        assert np.allclose(out.data, ref, rtol=1e-10)

    def test_output_too_small(self):
        with pytest.raises(T.DimensionError):
            T.conv2d(T.Tensor(np.zeros((1, 2, 2))), T.Tensor(np.zeros((1, 1, 3, 3))))


class TestAdaptiveAvgPool:
    def test_identity(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 8, 8))
        out = T.adaptive_avg_pool(t64(x), 8)
        assert np.array_equal(out.data, x)

    def test_constant(self):
        out = T.adaptive_avg_pool(T.Tensor(np.full((2, 7, 5), 3.5)), 3)
        assert np.allclose(out.data, 3.5, atol=1e-6)

    def test_block_mean_oracle(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        out = T.adaptive_avg_pool(t64(x), 2)
        assert np.array_equal(out.data, [[[2.5, 4.5], [10.5, 12.5]]])

    def test_uneven_against_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 10, 7))
        out = T.adaptive_avg_pool(t64(x), 3)
        assert np.allclose(out.data, block_mean_loops(x, 3), rtol=1e-12)

    def test_rejects_upsampling(self):
        with pytest.raises(T.DimensionError):
            T.adaptive_avg_pool(T.Tensor(np.zeros((1, 4, 4))), 8)
        with pytest.raises(T.DimensionError):
            T.adaptive_avg_pool(T.Tensor(np.zeros((1, 4, 4))), 0)


class TestBilinearUpsample:
    def test_identity(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 6, 6))
        out = T.bilinear_upsample(t64(x), 6, 6)
        assert np.array_equal(out.data, x)

    def test_constant(self):
        out = T.bilinear_upsample(T.Tensor(np.full((1, 2, 2), -1.25)), 9, 5)
        assert np.allclose(out.data, -1.25, atol=1e-6)

    def test_formula_oracle(self):
        x = np.array([[[0.0, 1.0], [2.0, 3.0]]])
        out = T.bilinear_upsample(t64(x), 4, 4)
        assert np.allclose(out.data, bilinear_loops(x, 4, 4), rtol=1e-12)

    def test_random_against_formula(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 5, 8))
        out = T.bilinear_upsample(t64(x), 11, 16)
        assert np.allclose(out.data, bilinear_loops(x, 11, 16), rtol=1e-10)

    def test_pool_then_upsample_constant_identity(self):
        x = np.full((2, 12, 12), 0.73)
        pooled = T.adaptive_avg_pool(T.Tensor(x), 4)
        back = T.bilinear_upsample(pooled, 12, 12)
        assert np.allclose(back.data, x, atol=1e-6)


class TestBackward:
    def test_sum_gives_ones(self):
        w = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        T.backward(T.tsum(w))
        assert np.array_equal(w.grad, np.ones((2, 3)))

    def test_unused_parameter_gets_zero(self):
        reg = T.ParameterRegistry()
        used = reg.add("used", T.Tensor(np.ones(3)))
        unused = reg.add("unused", T.Tensor(np.ones(2)))
        T.backward(T.tsum(used), registry=reg)
        assert np.array_equal(unused.grad, np.zeros(2))
        assert np.array_equal(used.grad, np.ones(3))

    def test_accumulates_without_zero_grad(self):
        w = T.Tensor(np.ones(4), requires_grad=True)
        T.backward(T.tsum(w))
        T.backward(T.tsum(w * 2.0))
        assert np.allclose(w.grad, 3.0)

    def test_non_scalar_loss_rejected(self):
        w = T.Tensor(np.ones(4), requires_grad=True)
        with pytest.raises(T.ContractError):
            T.backward(w * 2.0)

    def test_random_graph_finite_differences(self):
        rng = np.random.default_rng(10)

        def build(ts):
            a, b, c = ts
            h = T.gelu(T.matmul(a, b) + c)
            s = T.softmax(h, axis=1)
            return T.tsum(T.mul(s, s)) + T.tsum(T.sigmoid(h))

        gradcheck(build, [rng.normal(size=(3, 4)), rng.normal(size=(4, 5)),
                          rng.normal(size=(5,))])

    def test_diamond_graph(self):
        def build(ts):
            (a,) = ts
            left = a * 2.0
            right = T.tanh(a)
            return T.tsum(left * right)

        gradcheck(build, [np.random.default_rng(11).normal(size=(3, 3))])


class TestOpGradients:
    """Every differentiable op against central finite differences."""

    RNG = np.random.default_rng(12)

    def test_elementwise_chain(self):
        x = self.RNG.normal(size=(4, 4))
        gradcheck(lambda ts: T.tsum(T.exp(ts[0] * 0.3) + T.log(T.exp(ts[0]) + 1.5)), [x])

    def test_relu_leaky_away_from_kink(self):
        x = self.RNG.normal(size=(5, 5))
        x[np.abs(x) < 0.05] = 0.2
        gradcheck(lambda ts: T.tsum(T.relu(ts[0]) + T.leaky_relu(ts[0], 0.1)), [x])

    def test_softmax_axis0(self):
        gradcheck(lambda ts: T.tsum(T.mul(T.softmax(ts[0], axis=0), ts[0])),
                  [self.RNG.normal(size=(4, 3))])

    def test_conv2d(self):
        x = self.RNG.normal(size=(2, 6, 5))
        k = self.RNG.normal(size=(3, 2, 3, 3))
        b = self.RNG.normal(size=(3,))
        gradcheck(lambda ts: T.tsum(T.tanh(T.conv2d(ts[0], ts[1], bias=ts[2], stride=2, padding=1))),
                  [x, k, b])

    def test_pool_and_upsample(self):
        x = self.RNG.normal(size=(2, 6, 6))
        gradcheck(lambda ts: T.tsum(T.mul(T.adaptive_avg_pool(ts[0], 3), 2.0)), [x])
        y = self.RNG.normal(size=(1, 3, 3))
        gradcheck(lambda ts: T.tsum(T.tanh(T.bilinear_upsample(ts[0], 7, 8))), [y])

    def test_slicing_and_concat(self):
        x = self.RNG.normal(size=(6, 4))
        y = self.RNG.normal(size=(2, 4))

        def build(ts):
            a, b = ts
            top = T.slice0(a, 0, 3)
            both = T.concat0([top, b])
            cols = T.concat_cols([T.slice_cols(both, 0, 2), T.slice_cols(both, 2, 4)])
            return T.tsum(T.mul(cols, cols))

        gradcheck(build, [x, y])

    def test_element_and_minmax(self):
        x = self.RNG.normal(size=(3, 3))
        y = self.RNG.normal(size=(3, 3))
        # keep away from ties so the subgradient choice matches the numeric one
        y[np.abs(x - y) < 0.05] += 0.2

        def build(ts):
            a, b = ts
            return T.element(a, (1, 2)) * 3.0 + T.tsum(T.maximum(a, b)) + T.tsum(T.minimum(a * 0.5, b))

        gradcheck(build, [x, y])

    def test_layer_norm(self):
        gradcheck(lambda ts: T.tsum(T.mul(T.layer_norm(ts[0]), ts[0])),
                  [self.RNG.normal(size=(4, 6))])

    def test_transpose_reshape(self):
        def build(ts):
            a = T.tsum(T.mul(T.transpose(ts[0]), T.transpose(ts[0])))
            b = T.tsum(T.reshape(ts[0], (2, 6)) * 0.5)
            return a + b

        gradcheck(build, [self.RNG.normal(size=(3, 4))])

    def test_div_and_broadcast_bias(self):
        x = np.abs(self.RNG.normal(size=(3, 4))) + 1.0
        b = self.RNG.normal(size=(4,))
        gradcheck(lambda ts: T.tsum(T.div(ts[0] + ts[1], ts[0])), [x, b])


class TestSgd:
    def make_param(self, value):
        reg = T.ParameterRegistry()
        t = reg.add("w", T.Tensor(np.asarray(value, dtype=np.float64)))
        return reg

    def test_zero_lr(self):
        reg = self.make_param([1.0, 2.0])
        reg.get("w").value.grad = np.array([5.0, -1.0])
        T.sgd_step(reg, lr=0.0)
        assert np.array_equal(reg.get("w").value.data, [1.0, 2.0])

    def test_plain_step(self):
        reg = self.make_param([1.0])
        reg.get("w").value.grad = np.array([2.0])
        T.sgd_step(reg, lr=0.1, momentum=0.0, weight_decay=0.0)
        assert np.allclose(reg.get("w").value.data, [0.8])

    def test_momentum_recurrence(self):
        reg = self.make_param([0.0])
        for _ in range(2):
            reg.get("w").value.grad = np.array([1.0])
            T.sgd_step(reg, lr=0.1, momentum=0.9)
        assert np.allclose(reg.get("w").value.data, [-0.29])

    def test_weight_decay(self):
        reg = self.make_param([2.0])
        reg.get("w").value.grad = np.array([0.0])
        T.sgd_step(reg, lr=0.5, weight_decay=0.1)
        assert np.allclose(reg.get("w").value.data, [2.0 - 0.5 * 0.2])

    def test_missing_grad(self):
        reg = self.make_param([1.0])
        with pytest.raises(T.ContractError):
            T.sgd_step(reg, lr=0.1)


class TestRng:
    def test_same_seed_same_sequence(self):
        a = T.Rng(1234)
        b = T.Rng(1234)
        assert [a.next_u64() for _ in range(10)] == [b.next_u64() for _ in range(10)]

    def test_vector_matches_scalar(self):
        a = T.Rng(99)
        b = T.Rng(99)
        vec = b.fill_u64(32)
        scal = [a.next_u64() for _ in range(32)]
        assert list(map(int, vec)) == scal
        # both streams continue in lockstep after the vectorized draw
        assert a.next_u64() == int(b.fill_u64(1)[0])

    def test_uniform_range(self):
        r = T.Rng(7)
        vals = r.fill_uniform(1000, -2.0, 3.0)
        assert vals.min() >= -2.0 and vals.max() < 3.0

    def test_init_scale(self):
        r = T.Rng(5)
        w = T.uniform_init(r, (64, 64), 64, 64)
        a = math.sqrt(6.0 / 128)
        assert w.min() >= -a and w.max() <= a
        assert abs(float(w.mean())) < 0.02

    def test_child_seeds_distinct(self):
        seeds = T.Rng(0).child_seeds(100)
        assert len(set(seeds)) == 100


class TestInvariants:
    def test_broadcast_restrictions(self):
        with pytest.raises(T.DimensionError):
            T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((3, 2))))
        with pytest.raises(T.DimensionError):
            T.add(T.Tensor(np.zeros((2, 3, 4))), T.Tensor(np.zeros((4,))))

    def test_public_ops_stay_finite(self):
        rng = np.random.default_rng(13)
        x = rng.normal(scale=50.0, size=(4, 4)).astype(np.float32)
        t = T.Tensor(x)
        for out in [T.softmax(t, axis=1), T.gelu(t), T.sigmoid(t), T.tanh(t),
                    T.leaky_relu(t), T.layer_norm(t)]:
            assert np.all(np.isfinite(out.data))

    def test_sigmoid_extreme_inputs(self):
        out = T.sigmoid(T.Tensor(np.array([-1e4, 1e4], dtype=np.float32)))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == 0.0 and out.data[1] == 1.0

    def test_registry_rejects_duplicate_ids(self):
        reg = T.ParameterRegistry()
        reg.add("w", T.Tensor(np.zeros(2)))
        with pytest.raises(T.ContractError):
            reg.add("w", T.Tensor(np.zeros(2)))


class TestFlopTrace:
    def test_matmul_macs(self):
        with T.flop_trace() as tr:
            T.matmul(T.Tensor(np.zeros((3, 4))), T.Tensor(np.zeros((4, 5))))
        assert sum(m for _, m in tr) == 3 * 4 * 5

    def test_scopes(self):
        with T.flop_trace() as tr:
            with T.trace_scope("a"):
                T.matmul(T.Tensor(np.zeros((2, 2))), T.Tensor(np.zeros((2, 2))))
            T.conv2d(T.Tensor(np.zeros((1, 4, 4))), T.Tensor(np.zeros((2, 1, 3, 3))))
        scopes = dict(tr)
        assert scopes["a"] == 8
        assert scopes["unscoped"] == 2 * 1 * 3 * 3 * 2 * 2
