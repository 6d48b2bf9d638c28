"""Engine ops: worked examples, finite-difference gradient checks, and
determinism properties."""

import numpy as np
import pytest

from dynsparse import tensor as T
from dynsparse.gradcheck import assert_gradients_match, max_relative_error
from dynsparse.tensor import (
    MacCounter,
    NumericsError,
    ShapeError,
    Tape,
    Tensor,
)

F64 = np.float64


def t64(data, grad=False):
    return Tensor(np.asarray(data, dtype=F64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        a = t64(np.eye(2))
        b = t64([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(a, b).data, b.data)

    def test_forced_by_definition(self):
        out = T.matmul(t64([[1.0, 0.0]]), t64([[0.0], [5.0]]))
        assert np.array_equal(out.data, [[0.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(t64(np.zeros((2, 3))), t64(np.zeros((2, 2))))

    def test_gradient_matches_central_differences(self, rng):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=F64)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True, dtype=F64)
        assert_gradients_match(lambda a, b: T.matmul(a, b).sum(), [a, b])

    def test_batched_gradients(self, rng):
        a = Tensor(rng.standard_normal((2, 2, 3, 4)), requires_grad=True, dtype=F64)
        b = Tensor(rng.standard_normal((2, 2, 4, 3)), requires_grad=True, dtype=F64)
        w = Tensor(rng.standard_normal((2, 2, 3, 3)), dtype=F64)
        assert_gradients_match(lambda a, b: (T.matmul(a, b) * w).sum(), [a, b])


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(t64([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_max_subtraction_prevents_overflow(self):
        out = T.softmax(t64([1000.0, 0.0]))
        assert abs(out.data[0] - 1.0) < 1e-12
        assert abs(out.data[1]) < 1e-12

    def test_rows_sum_to_one(self, rng):
        x = Tensor(rng.standard_normal((6, 9)) * 5, dtype=F64)
        out = T.softmax(x, axis=-1)
        assert np.all(out.data >= 0)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_nan_input_rejected(self):
        with pytest.raises(NumericsError):
            T.softmax(t64([np.nan, 1.0]))

    def test_gradient(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True, dtype=F64)
        w = Tensor(rng.standard_normal(5), dtype=F64)
        assert_gradients_match(lambda x: (T.softmax(x) * w).sum(), [x])


class TestLayernorm:
    def test_constant_row_maps_to_zeros(self):
        gamma, beta = t64(np.ones(4)), t64(np.zeros(4))
        out = T.layernorm(t64([[3.0, 3.0, 3.0, 3.0]]), gamma, beta)
        assert np.allclose(out.data, 0.0, atol=1e-6)

    def test_already_normalized_preserved(self):
        gamma, beta = t64(np.ones(2)), t64(np.zeros(2))
        out = T.layernorm(t64([1.0, -1.0]), gamma, beta)
        assert np.allclose(out.data, [1.0, -1.0], atol=1e-2)

    def test_gradient(self, rng):
        x = Tensor(rng.standard_normal((3, 7)), requires_grad=True, dtype=F64)
        g = Tensor(rng.standard_normal(7), requires_grad=True, dtype=F64)
        b = Tensor(rng.standard_normal(7), requires_grad=True, dtype=F64)
        w = Tensor(rng.standard_normal((3, 7)), dtype=F64)
        assert_gradients_match(lambda x, g, b: (T.layernorm(x, g, b) * w).sum(), [x, g, b])


class TestScalarOps:
    def test_gelu_zero_fixed_point(self):
        assert T.gelu(t64([0.0])).data[0] == 0.0

    def test_gelu_gradient(self, rng):
        x = Tensor(rng.standard_normal(11), requires_grad=True, dtype=F64)
        assert_gradients_match(lambda x: T.gelu(x).sum(), [x])

    def test_kl_identical_distributions_zero(self, rng):
        q = rng.uniform(0.1, 1.0, (3, 5))
        q /= q.sum(axis=1, keepdims=True)
        out = T.kl_div(t64(np.log(q)), t64(q))
        assert abs(out.item()) < 1e-12

    def test_cross_entropy_values(self, rng):
        logits = Tensor(rng.standard_normal((4, 5)), dtype=F64)
        labels = np.array([0, 2, 4, 1])
        shifted = logits.data - logits.data.max(axis=1, keepdims=True)
        p = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        expected = -np.log(p[np.arange(4), labels]).mean()
        assert abs(T.cross_entropy(logits, labels).item() - expected) < 1e-12

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(t64(np.zeros((2, 3))), np.array([0, 3]))

    def test_loss_gradients(self, rng):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=F64)
        b = Tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=F64)
        assert_gradients_match(lambda a, b: T.mse(a, b), [a, b])
        logits = Tensor(rng.standard_normal((4, 5)), requires_grad=True, dtype=F64)
        labels = np.array([1, 0, 3, 2])
        assert_gradients_match(lambda l: T.cross_entropy(l, labels), [logits])
        q = rng.uniform(0.1, 1.0, (3, 4))
        q /= q.sum(axis=1, keepdims=True)
        p = rng.uniform(0.1, 1.0, (3, 4))
        p /= p.sum(axis=1, keepdims=True)
        qt = Tensor(q, requires_grad=True, dtype=F64)
        lpt = Tensor(np.log(p), requires_grad=True, dtype=F64)
        assert_gradients_match(lambda lp, q: T.kl_div(lp, q), [lpt, qt])


class TestIndexing:
    def test_gather_then_scatter_identity(self, rng):
        x = Tensor(rng.standard_normal((7, 3)), dtype=F64)
        perm = rng.permutation(7)
        rows = T.gather_rows(x, perm)
        base = Tensor(np.zeros((7, 3)), dtype=F64)
        assert np.array_equal(T.scatter_rows(base, perm, rows).data, x.data)

    def test_out_of_range_index(self, rng):
        x = Tensor(rng.standard_normal((4, 2)), dtype=F64)
        with pytest.raises(IndexError):
            T.gather_rows(x, np.array([0, 4]))

    def test_gather_gradients_accumulate_duplicates(self, rng):
        x = Tensor(rng.standard_normal((5, 3)), requires_grad=True, dtype=F64)
        w = Tensor(rng.standard_normal((3, 3)), dtype=F64)
        idx = np.array([2, 2, 0])
        assert_gradients_match(lambda x: (T.gather_rows(x, idx) * w).sum(), [x])

    def test_batched_gather_scatter_gradients(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True, dtype=F64)
        v = Tensor(rng.standard_normal((2, 2, 3)), requires_grad=True, dtype=F64)
        idx = np.array([[0, 3], [1, 4]])
        w = Tensor(rng.standard_normal((2, 5, 3)), dtype=F64)
        assert_gradients_match(lambda x, v: (T.scatter_rows(x, idx, v) * w).sum(), [x, v])


class TestSpatialOps:
    def test_avg_pool_values(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
        out = T.avg_pool_2d(Tensor(x), 2)
        assert np.allclose(out.data[0, :, :, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_avg_pool_odd_grid_rejected(self):
        with pytest.raises(ShapeError):
            T.avg_pool_2d(Tensor(np.zeros((1, 3, 4, 2))), 2)

    def test_pool_and_conv_gradients(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 4, 3)), requires_grad=True, dtype=F64)
        w = Tensor(rng.standard_normal((2, 2, 2, 3)), dtype=F64)
        assert_gradients_match(lambda x: (T.avg_pool_2d(x, 2) * w).sum(), [x])
        k = Tensor(rng.standard_normal((3, 3, 3)), requires_grad=True, dtype=F64)
        b = Tensor(rng.standard_normal(3), requires_grad=True, dtype=F64)
        w2 = Tensor(rng.standard_normal((2, 4, 4, 3)), dtype=F64)
        assert_gradients_match(
            lambda x, k, b: (T.depthwise_conv2d(x, k, b) * w2).sum(), [x, k, b]
        )

    def test_depthwise_conv_matches_direct_convolution(self, rng):
        x = rng.standard_normal((1, 5, 5, 2))
        k = rng.standard_normal((3, 3, 2))
        out = T.depthwise_conv2d(Tensor(x, dtype=F64), Tensor(k, dtype=F64)).data
        padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        for i in range(5):
            for j in range(5):
                for c in range(2):
                    expect = (padded[0, i : i + 3, j : j + 3, c] * k[:, :, c]).sum()
                    assert abs(out[0, i, j, c] - expect) < 1e-12


class TestTapeSemantics:
    def test_reverse_order_and_leaf_grads(self, rng):
        x = Tensor(rng.standard_normal((3, 3)), requires_grad=True, dtype=F64)
        y = Tensor(rng.standard_normal((3, 3)), requires_grad=True, dtype=F64)
        with Tape() as tape:
            z = (x * y + x).sum()
        tape.backward(z)
        assert np.allclose(x.grad, y.data + 1.0)
        assert np.allclose(y.grad, x.data)

    def test_non_scalar_backward_rejected(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True, dtype=F64)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_no_tape_records_nothing(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True, dtype=F64)
        y = (x * 3.0).sum()
        assert y.grad is None and x.grad is None

    def test_replay_is_bit_identical(self, rng):
        data = rng.standard_normal((4, 4))
        w = rng.standard_normal((4, 4))

        def run():
            a = Tensor(data.copy(), dtype=F64)
            b = Tensor(w.copy(), dtype=F64)
            return T.softmax(T.matmul(T.gelu(a), b), axis=-1).data

        first, second = run(), run()
        assert np.array_equal(first, second)

    def test_mixed_float_widths_rejected(self):
        a = Tensor(np.zeros(3), dtype=np.float32)
        b = Tensor(np.zeros(3), dtype=np.float64)
        with pytest.raises(ShapeError):
            a + b

    def test_aliased_gradient_accumulation_is_safe(self, rng):
        # a + a routes the same upstream array to one tensor twice; the
        # borrowed-buffer bookkeeping must not corrupt sibling grads.
        a = Tensor(rng.standard_normal(4), requires_grad=True, dtype=F64)
        b = Tensor(rng.standard_normal(4), requires_grad=True, dtype=F64)
        with Tape() as tape:
            s = (a + b).sum() + (a + b).sum()
        tape.backward(s)
        assert np.allclose(a.grad, 2.0)
        assert np.allclose(b.grad, 2.0)


class TestGradcheckSweep:
    def test_twenty_random_instances_per_op(self, rng):
        """Reverse-mode vs central differences across every differentiable op."""
        for trial in range(20):
            n = int(rng.integers(2, 6))
            m = int(rng.integers(2, 6))
            x = Tensor(rng.standard_normal((n, m)), requires_grad=True, dtype=F64)
            w = Tensor(rng.standard_normal((n, m)), dtype=F64)
            for fn in (
                lambda x: (T.gelu(x) * w).sum(),
                lambda x: (T.softmax(x, axis=-1) * w).sum(),
                lambda x: (T.exp(x) * w).mean(),
                lambda x: (x * x + x).sum(),
                lambda x: (x / 2.5 - w).sum(),
            ):
                err = max_relative_error(fn, [x], 0)
                assert err < 1e-4, f"trial {trial}: rel err {err}"


class TestMacCounter:
    def test_matmul_macs(self):
        with MacCounter() as mc:
            T.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((4, 5))))
        assert mc.total == 3 * 4 * 5

    def test_conv_macs(self):
        with MacCounter() as mc:
            T.depthwise_conv2d(Tensor(np.zeros((2, 4, 4, 3))), Tensor(np.zeros((3, 3, 3))))
        assert mc.total == 2 * 4 * 4 * 3 * 9
