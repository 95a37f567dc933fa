import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from deskbert import tensor as T
from deskbert.tensor import DimensionError, EmptySelectionError, GradientError, Tensor, backward

from conftest import numeric_grad


def leaf(a):
    return Tensor(np.array(a, dtype=T.get_default_dtype()), requires_grad=True)


def test_default_dtype_is_float32_and_precision_switch():
    assert Tensor([1.0]).dtype == np.float32
    with T.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


class TestMatmul:
    def test_identity(self, f64):
        m = np.arange(9.0).reshape(3, 3)
        np.testing.assert_array_equal((Tensor(np.eye(3)) @ Tensor(m)).data, m)

    def test_hand_example(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_triple_loop_oracle(self, f64):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        ref = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                for k in range(5):
                    ref[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, ref, atol=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 5)))

    def test_backward(self, f64):
        rng = np.random.default_rng(1)
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        g = rng.normal(size=(3, 2))
        backward(((a @ b) * Tensor(g)).sum())
        np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)

    def test_batched_broadcast_backward(self, f64):
        rng = np.random.default_rng(2)
        a, w = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5)))
        backward((a @ w).sum())
        np.testing.assert_allclose(w.grad, a.data.sum(axis=(0, 1))[:, None].repeat(5, 1), atol=1e-12)


class TestElementwise:
    def test_add_zeros(self):
        x = Tensor([1.0, -2.0, 3.5])
        np.testing.assert_array_equal((x + Tensor(np.zeros(3))).data, x.data)

    def test_sigmoid_zero(self):
        assert Tensor(0.0).sigmoid().item() == 0.5

    def test_sigmoid_extremes_are_finite(self):
        y = Tensor([-1000.0, 1000.0]).sigmoid().data
        np.testing.assert_array_equal(y, [0.0, 1.0])

    def test_product_rule(self):
        a, b = leaf(2.0), leaf(3.0)
        backward(a * b)
        assert a.grad == 3.0 and b.grad == 2.0

    def test_non_broadcastable(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4,)))

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "pow", "exp", "log", "tanh", "sigmoid"])
    def test_gradients_match_finite_differences(self, f64, op):
        rng = np.random.default_rng(3)
        a = leaf(rng.uniform(0.5, 2.0, size=(3, 4)))
        b = leaf(rng.uniform(0.5, 2.0, size=(4,)))  # broadcast along the leading axis
        args = {"add": (a, b), "sub": (a, b), "mul": (a, b), "div": (a, b), "pow": (a, 2.5)}.get(op, (a,))

        def f():
            return T.elementwise(op, *args).sum()

        backward(f())
        with T.no_grad():
            np.testing.assert_allclose(a.grad, numeric_grad(lambda: f().item(), a.data), rtol=1e-6, atol=1e-8)
            if op in ("add", "sub", "mul", "div"):
                np.testing.assert_allclose(b.grad, numeric_grad(lambda: f().item(), b.data), rtol=1e-6, atol=1e-8)

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-5, 5)),
           hnp.arrays(np.float64, (4,), elements=st.floats(-5, 5)))
    def test_broadcast_equals_explicit_expansion(self, a, b):
        with T.precision(np.float64):
            for op in ("add", "sub", "mul"):
                implicit = T.elementwise(op, Tensor(a), Tensor(b)).data
                explicit = T.elementwise(op, Tensor(a), Tensor(np.broadcast_to(b, a.shape).copy())).data
                np.testing.assert_array_equal(implicit, explicit)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = T.softmax_cross_entropy(Tensor(np.zeros((4, 1000))), np.arange(4))
        assert abs(loss.item() - np.log(1000)) < 1e-5

    def test_margin_drives_loss_to_zero(self, f64):
        losses = []
        for margin in (1.0, 10.0, 40.0):
            logits = np.zeros((3, 5))
            logits[np.arange(3), [0, 2, 4]] = margin
            losses.append(T.softmax_cross_entropy(Tensor(logits), [0, 2, 4]).item())
        assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-15

    def test_logsumexp_oracle(self, f64):
        rng = np.random.default_rng(4)
        logits, targets = rng.normal(size=(6, 17)) * 3, rng.integers(0, 17, 6)
        mask = np.array([1, 0, 1, 1, 0, 1], dtype=bool)
        ref = []
        for i in np.flatnonzero(mask):
            row = logits[i]
            ref.append(np.log(np.sum(np.exp(row - row.max()))) + row.max() - row[targets[i]])
        got = T.softmax_cross_entropy(Tensor(logits), targets, mask).item()
        assert abs(got - np.mean(ref)) < 1e-6

    def test_large_logits_stable(self):
        loss = T.softmax_cross_entropy(Tensor([[1e4, 0.0, -1e4]]), [1])
        assert np.isfinite(loss.item()) and abs(loss.item() - 1e4) < 1

    def test_empty_selection_raises(self):
        with pytest.raises(EmptySelectionError):
            T.softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2], np.zeros(3, dtype=bool))

    def test_unselected_rows_get_exact_zero_grad(self, f64):
        rng = np.random.default_rng(5)
        logits = leaf(rng.normal(size=(8, 6)))
        mask = rng.random(8) < 0.5
        mask[0] = True
        backward(T.softmax_cross_entropy(logits, rng.integers(0, 6, 8), mask))
        assert np.all(logits.grad[~mask] == 0.0)
        assert np.all(np.abs(logits.grad[mask]).sum(axis=1) > 0)

    def test_gradient(self, f64):
        rng = np.random.default_rng(6)
        logits = leaf(rng.normal(size=(5, 7)))
        t = rng.integers(0, 7, 5)
        f = lambda: T.softmax_cross_entropy(logits, t)
        backward(f())
        with T.no_grad():
            np.testing.assert_allclose(logits.grad, numeric_grad(lambda: f().item(), logits.data), atol=1e-8)


class TestBackward:
    def test_sum(self):
        x = leaf(np.ones(4))
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, [1, 1, 1, 1])

    def test_sum_of_squares(self):
        x = leaf([1.0, 2.0])
        backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_rejected(self):
        with pytest.raises(GradientError):
            backward(leaf([1.0, 2.0]) * 2.0)

    def test_double_backward_on_same_graph_rejected(self):
        x = leaf([1.0, 2.0])
        loss = (x * x).sum()
        backward(loss)
        with pytest.raises(GradientError):
            backward(loss)

    def test_second_pass_without_zeroing_rejected(self):
        x = leaf([1.0, 2.0])
        backward((x * x).sum())
        with pytest.raises(GradientError):
            backward((x * 3.0).sum())
        x.zero_grad()
        backward((x * 3.0).sum())
        np.testing.assert_array_equal(x.grad, [3.0, 3.0])

    def test_shared_subexpression_accumulates(self):
        x = leaf(3.0)
        y = x * x
        backward(y + y)
        assert x.grad == 12.0

    def test_constants_never_get_grad(self):
        x, c = leaf([1.0, 2.0]), Tensor([5.0, 6.0])
        backward((x * c).sum())
        assert c.grad is None

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_grad_shape_matches_data(self, f64):
        rng = np.random.default_rng(7)
        x = leaf(rng.normal(size=(2, 3, 4)))
        backward((x.reshape(6, 4).transpose() ** 2).mean())
        assert x.grad.shape == x.shape

    def test_getitem_and_embedding_scatter(self, f64):
        w = leaf(np.arange(12.0).reshape(4, 3))
        backward(T.embedding(w, np.array([[1, 1], [3, 0]])).sum())
        np.testing.assert_array_equal(w.grad[:, 0], [1, 2, 0, 1])

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(16, 16)).astype(np.float32)
        r1 = (Tensor(a) @ Tensor(a)).sigmoid().sum().item()
        r2 = (Tensor(a) @ Tensor(a)).sigmoid().sum().item()
        assert r1 == r2


class TestRope:
    def test_odd_head_dim_rejected(self):
        with pytest.raises(DimensionError):
            T.rope(Tensor(np.zeros((3, 1, 5))), np.arange(3), 1e4)

    def test_pairing_and_angles(self, f64):
        hd, theta = 4, 100.0
        x = np.zeros((1, 1, hd))
        x[0, 0, 2] = 1.0  # second pair, first element
        m = 3
        out = T.rope(Tensor(x), np.array([m]), theta).data[0, 0]
        ang = m * theta ** (-2 / hd)
        np.testing.assert_allclose(out, [0, 0, np.cos(ang), np.sin(ang)], atol=1e-12)

    def test_backward_is_inverse_rotation(self, f64):
        rng = np.random.default_rng(9)
        x = leaf(rng.normal(size=(5, 2, 6)))
        g = rng.normal(size=(5, 2, 6))
        f = lambda: (T.rope(x, np.arange(5), 1e4) * Tensor(g)).sum()
        backward(f())
        with T.no_grad():
            np.testing.assert_allclose(x.grad, numeric_grad(lambda: f().item(), x.data), atol=1e-8)
