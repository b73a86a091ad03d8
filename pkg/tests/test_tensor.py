import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cvlnet import tensor as T
from cvlnet.errors import ContractError, DimensionError
from cvlnet.tensor import Tensor, grad_check, no_grad

finite = st.floats(-50, 50, allow_nan=False)


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_hand_product(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[5.0], [6.0]])
        np.testing.assert_array_equal(out.data, [[17], [39]])

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_gradient_of_sum(self, rng):
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        assert grad_check(lambda a, b: (a @ b).sum(), [a, b]) <= 1e-4
        # closed form: d sum(AB)/dA = 1 B^T
        a.zero_grad()
        (a @ b).sum().backward()
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-14)

    def test_batched_weight_gradient_matches_loop(self, rng):
        x = leaf(rng.normal(size=(2, 3, 4)))
        w = leaf(rng.normal(size=(4, 5)))
        (T.matmul(x, w) * rng.normal(size=(2, 3, 5))).sum()
        assert grad_check(lambda x, w: (T.matmul(x, w) * np.arange(30.0).reshape(2, 3, 5)).sum(), [x, w]) < 1e-6


class TestElementwise:
    def test_additive_identity(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(T.elementwise(Tensor(x), Tensor(np.zeros((3, 4))), "add").data, x)

    def test_row_broadcast(self):
        out = T.add(Tensor(np.zeros((3, 2))), Tensor([1.0, 2.0]))
        np.testing.assert_array_equal(out.data, [[1, 2]] * 3)

    def test_broadcast_gradient_sums(self):
        b = leaf([1.0, 2.0])
        T.add(Tensor(np.zeros((3, 2))), b).sum().backward()
        np.testing.assert_array_equal(b.grad, [3.0, 3.0])

    def test_mul_gradient(self, rng):
        a, b = leaf(rng.normal(size=(3, 3))), leaf(rng.normal(size=(3, 3)))
        assert grad_check(lambda a, b: (T.elementwise(a, b, "mul") * np.arange(9.0).reshape(3, 3)).sum(),
                          [a, b]) <= 1e-4

    def test_non_broadcastable(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.ones((3, 2))), Tensor(np.ones(3)))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.elementwise(Tensor([1.0]), Tensor([1.0]), "pow")


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_sentinel_dominance(self):
        out = T.softmax(Tensor([0.0, T.MASK_SENTINEL])).data
        assert out[0] == pytest.approx(1.0)
        assert out[1] < 1e-40

    @given(hnp.arrays(float, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=finite),
           st.floats(-100, 100))
    def test_shift_invariance_and_rows(self, x, c):
        out = T.softmax(Tensor(x)).data
        np.testing.assert_allclose(T.softmax(Tensor(x + c)).data, out, atol=1e-12)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all((out >= 0) & (out <= 1))


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = T.layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 5)))

    def test_mean_equals_beta(self, rng):
        beta = np.full(6, 0.7)
        out = T.layer_norm(Tensor(rng.normal(size=(4, 6))), Tensor(np.ones(6)), Tensor(beta))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.7, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-9)

    def test_gradient(self, rng):
        x, g, b = leaf(rng.normal(size=(3, 6))), leaf(rng.normal(size=6)), leaf(rng.normal(size=6))
        read = rng.normal(size=(3, 6))
        assert grad_check(lambda x, g, b: (T.layer_norm(x, g, b) * read).sum(), [x, g, b]) <= 1e-4


class TestGelu:
    def test_zero(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_asymptote(self):
        assert abs(T.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6

    def test_monotone_on_range(self):
        out = T.gelu(Tensor(np.linspace(-0.7, 10, 500))).data
        assert np.all(np.diff(out) > 0)

    def test_gradient(self, rng):
        x = leaf(rng.normal(0, 2, size=(4, 3)))
        assert grad_check(lambda x: (T.gelu(x) * np.arange(12.0).reshape(4, 3)).sum(), [x]) <= 1e-4


class TestEmbedding:
    def test_duplicate_rows(self, rng):
        table = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(T.embedding(Tensor(table), [0, 0]).data, table[[0, 0]])

    def test_empty_ids(self):
        assert T.embedding(Tensor(np.ones((4, 3))), np.array([], dtype=int)).shape == (0, 3)

    def test_duplicate_ids_accumulate(self, rng):
        table = leaf(rng.normal(size=(4, 3)))
        up = rng.normal(size=(3, 3))
        (T.embedding(table, [2, 0, 2]) * up).sum().backward()
        np.testing.assert_allclose(table.grad[2], up[0] + up[2], rtol=1e-15)
        np.testing.assert_array_equal(table.grad[[1, 3]], 0.0)
        assert grad_check(lambda t: (T.embedding(t, [2, 0, 2]) * up).sum(), [table]) <= 1e-4

    def test_out_of_range_names_position_and_id(self):
        with pytest.raises(IndexError, match=r"id 7 at position \(1,\)"):
            T.embedding(Tensor(np.ones((4, 3))), [0, 7])


class TestCrossEntropy:
    def test_uniform(self):
        assert T.cross_entropy(Tensor([0.0, 0.0]), 0).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_confident_limit(self):
        assert T.cross_entropy(Tensor([60.0, 0.0]), 0).item() < 1e-25

    def test_gradient_closed_form(self):
        z = leaf([0.3, -1.2])
        T.cross_entropy(z, 1).backward()
        p = np.exp(z.data) / np.exp(z.data).sum()
        np.testing.assert_allclose(z.grad, p - np.array([0.0, 1.0]), rtol=1e-14)
        assert grad_check(lambda z: T.cross_entropy(z, 1), [z]) <= 1e-4

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor([0.0, 0.0]), 2)

    @given(hnp.arrays(float, (2,), elements=finite), st.integers(0, 1))
    def test_positive(self, z, label):
        assert T.cross_entropy(Tensor(z), label).item() >= 0.0


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.zeros((2, 3)))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_disconnected_leaf_zero(self):
        x, y = leaf([1.0, 2.0]), leaf([3.0])
        x.sum().backward()
        np.testing.assert_array_equal(y.grad, [0.0])

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            leaf([1.0, 2.0]).backward()

    def test_composite(self, rng):
        x, w, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=5))
        g, be = Tensor(np.ones(5)), Tensor(np.zeros(5))
        read = rng.normal(size=(3, 5))
        f = lambda x, w, b: (T.layer_norm(T.add(x @ w, b), g, be) * read).sum()  # noqa: E731
        assert grad_check(f, [x, w, b]) <= 1e-4

    def test_accumulates_until_zeroed(self):
        x = leaf([1.0])
        (x * 2.0).sum().backward()
        (x * 3.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [5.0])
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_no_grad_builds_no_graph(self):
        x = leaf([1.0])
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
    @settings(max_examples=30)
    def test_linearity(self, alpha, beta, seed):
        r = np.random.default_rng(seed)
        x0 = r.normal(size=(3, 4))
        w = Tensor(r.normal(size=(4, 2)))

        def grad_of(fn):
            x = leaf(x0)
            fn(x).backward()
            return x.grad

        f = lambda x: T.tanh(x @ w).sum()  # noqa: E731
        g = lambda x: (T.gelu(x) * x).sum()  # noqa: E731
        combined = grad_of(lambda x: f(x) * alpha + g(x) * beta)
        np.testing.assert_allclose(combined, alpha * grad_of(f) + beta * grad_of(g), atol=1e-10)

    def test_repeat_is_bitwise(self, rng):
        x0 = rng.normal(size=(3, 4))

        def run():
            x = leaf(x0)
            out = (T.softmax(T.gelu(x)) * np.arange(12.0).reshape(3, 4)).sum()
            out.backward()
            return out.data.tobytes(), x.grad.tobytes()

        assert run() == run()


class TestGradCheck:
    def test_sum_of_squares(self, rng):
        x = leaf(rng.normal(size=(3, 3)))
        assert grad_check(lambda x: (x * x).sum(), [x]) <= 1e-6

    def test_constant_function(self):
        x = leaf([1.0, 2.0])
        assert grad_check(lambda x: Tensor(3.0) + x.sum() * 0.0, [x]) == 0.0

    def test_coordinate_sampling(self, rng):
        x = leaf(rng.normal(size=100))
        pairs = T.gradient_pairs(lambda x: (x * x).sum(), [x], max_coords=5)
        assert pairs[0][0].size == 5
