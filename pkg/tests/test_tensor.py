"""Core autodiff: op semantics, gradient checks, optimizer behavior."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pedpipe import tensor as T
from pedpipe.rng import RngContext

from gradcheck import assert_grad_close, central_difference, check_unary


def rng(seed=0):
    return RngContext(seed)


class TestForwardValues:
    def test_matmul_identity(self):
        a = T.Tensor(np.eye(2))
        b = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(a, b).data, b.data)

    def test_matmul_hand_product(self):
        a = T.Tensor([[1.0, 2.0]])
        b = T.Tensor([[3.0], [4.0]])
        assert T.matmul(a, b).data.tolist() == [[11.0]]

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(T.zeros((2, 3)), T.zeros((2, 2)))

    def test_softmax_symmetry(self):
        out = T.softmax(T.Tensor([0.0, 0.0, 0.0])).data
        assert np.allclose(out, [1 / 3] * 3, atol=1e-15)

    def test_softmax_known_values(self):
        # Frozen from a high-precision exponential evaluation of [1, 2, 3].
        out = T.softmax(T.Tensor([1.0, 2.0, 3.0])).data
        assert np.allclose(out, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)

    def test_log_sigmoid_zero(self):
        assert T.log_sigmoid(T.Tensor(0.0)).item() == pytest.approx(-math.log(2), abs=1e-12)

    def test_log_sigmoid_saturation(self):
        assert abs(T.log_sigmoid(T.Tensor(40.0)).item()) < 1e-12

    def test_log_sigmoid_negative(self):
        # softplus(5) evaluated at high precision: 5.006715348489118
        assert T.log_sigmoid(T.Tensor(-5.0)).item() == pytest.approx(-5.0067153484891, abs=1e-9)

    def test_log_sigmoid_finite_for_extreme_input(self):
        assert np.isfinite(T.log_sigmoid(T.Tensor(-1e4)).item())

    def test_softplus_values(self):
        assert T.softplus(T.Tensor(0.0)).item() == pytest.approx(math.log(2), abs=1e-12)
        assert T.softplus(T.Tensor(100.0)).item() == pytest.approx(100.0, abs=1e-9)
        assert T.softplus(T.Tensor(1.0)).item() == pytest.approx(1.3132616875182228, abs=1e-12)
        assert T.softplus(T.Tensor(-200.0)).item() > 0.0

    def test_cross_entropy_uniform_logits(self):
        logits = T.zeros((4, 256))
        loss = T.cross_entropy_logits(logits, [0, 5, 100, 255], [True] * 4)
        assert loss.item() == pytest.approx(math.log(256), abs=1e-12)

    def test_cross_entropy_one_hot_saturation(self):
        data = np.zeros((1, 16))
        data[0, 3] = 1e4
        loss = T.cross_entropy_logits(T.Tensor(data), [3], [True])
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_cross_entropy_empty_mask_is_zero_with_zero_grad(self):
        logits = T.Tensor(np.random.default_rng(0).normal(size=(3, 7)), requires_grad=True)
        loss = T.cross_entropy_logits(logits, [0, 1, 2], [False, False, False])
        assert loss.item() == 0.0
        T.backward(loss)
        assert logits.grad is None

    def test_cross_entropy_target_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy_logits(T.zeros((2, 4)), [0, 4], [True, True])

    def test_add_trailing_bias(self):
        x = T.Tensor(np.ones((2, 3)))
        b = T.Tensor([1.0, 2.0, 3.0])
        assert np.array_equal(T.add(x, b).data, [[2, 3, 4], [2, 3, 4]])

    def test_add_rejects_general_broadcast(self):
        with pytest.raises(T.ShapeError):
            T.add(T.zeros((2, 3)), T.zeros((2, 1)))

    def test_masked_fill_and_narrow_and_concat(self):
        x = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        filled = T.masked_fill(x, np.array([[False, True], [False, False]]), -9.0)
        assert filled.data[0, 1] == -9.0
        sl = T.narrow(x, 0, 1, 1)
        assert sl.data.tolist() == [[3.0, 4.0]]
        cat = T.concat([x, x], axis=0)
        assert cat.shape == (4, 2)

    def test_finite_outputs_on_finite_inputs(self):
        r = rng(3)
        x = T.Tensor(r.standard_normal((5, 8)) * 50)
        for op in (T.softmax, T.softplus, T.log_sigmoid, T.gelu):
            assert np.all(np.isfinite(op(x).data))


class TestProperties:
    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
    def test_softmax_rows_sum_to_one(self, row):
        out = T.softmax(T.Tensor([row])).data
        assert abs(out.sum() - 1.0) < 1e-9
        assert np.all(out >= 0.0) and np.all(out <= 1.0)

    @given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.floats(-50, 50))
    def test_softmax_shift_invariance(self, row, c):
        a = T.softmax(T.Tensor(row)).data
        b = T.softmax(T.Tensor([v + c for v in row])).data
        assert np.allclose(a, b, atol=1e-12)

    @settings(max_examples=30)
    @given(st.integers(0, 2**32 - 1))
    def test_deterministic_under_seed(self, seed):
        a = T.sample_standard_normal(RngContext(seed), (4, 3)).data
        b = T.sample_standard_normal(RngContext(seed), (4, 3)).data
        assert np.array_equal(a, b)


class TestGradients:
    def test_matmul_grad_matches_fd(self):
        r = rng(7)
        a_data = r.standard_normal((3, 4))
        b_data = r.standard_normal((4, 2))
        a = T.Tensor(a_data.copy(), requires_grad=True)
        b = T.Tensor(b_data.copy(), requires_grad=True)
        out = T.sum_all(T.matmul(a, b))
        T.backward(out)

        def f():
            return float((a.data @ b.data).sum())

        assert_grad_close(a.grad, central_difference(f, a.data))
        assert_grad_close(b.grad, central_difference(f, b.data))

    @pytest.mark.parametrize(
        "op",
        [T.softmax, T.softplus, T.log_sigmoid, T.gelu, T.neg],
        ids=["softmax", "softplus", "log_sigmoid", "gelu", "neg"],
    )
    def test_unary_grads(self, op):
        r = rng(11)
        for _ in range(5):
            check_unary(op, r.standard_normal((3, 4)))

    def test_layer_norm_grad(self):
        r = rng(13)
        x = T.Tensor(r.standard_normal((4, 6)), requires_grad=True)
        gain = T.Tensor(r.standard_normal(6), requires_grad=True)
        bias = T.Tensor(r.standard_normal(6), requires_grad=True)
        out = T.sum_all(T.mul(T.layer_norm(x, gain, bias), T.Tensor(r.standard_normal((4, 6)))))
        weights = out._parents[0]._parents[1]  # the fixed multiplier
        T.backward(out)

        def f():
            y = T.layer_norm(T.Tensor(x.data), T.Tensor(gain.data), T.Tensor(bias.data))
            return float((y.data * weights.data).sum())

        assert_grad_close(x.grad, central_difference(f, x.data))
        assert_grad_close(gain.grad, central_difference(f, gain.data))
        assert_grad_close(bias.grad, central_difference(f, bias.data))

    def test_embedding_grad_accumulates_duplicate_ids(self):
        table = T.Tensor(np.arange(12, dtype=np.float64).reshape(4, 3), requires_grad=True)
        out = T.sum_all(T.embedding_lookup(table, [1, 1, 2]))
        T.backward(out)
        assert table.grad[1].tolist() == [2.0, 2.0, 2.0]
        assert table.grad[2].tolist() == [1.0, 1.0, 1.0]
        assert table.grad[0].tolist() == [0.0, 0.0, 0.0]

    def test_reuse_accumulates_both_paths(self):
        # f(x) = sum(x*x) + sum(x): df/dx = 2x + 1, checked against the manual form.
        x = T.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        out = T.add(T.sum_all(T.mul(x, x)), T.sum_all(x))
        T.backward(out)
        assert np.allclose(x.grad, 2 * x.data + 1.0, atol=1e-12)

    def test_cross_entropy_grad_matches_fd(self):
        r = rng(17)
        logits = T.Tensor(r.standard_normal((5, 9)), requires_grad=True)
        targets = [0, 3, 8, 2, 2]
        mask = [True, False, True, True, False]
        T.backward(T.cross_entropy_logits(logits, targets, mask))

        def f():
            return float(T.cross_entropy_logits(T.Tensor(logits.data), targets, mask).data)

        assert_grad_close(logits.grad, central_difference(f, logits.data))

    def test_backward_requires_scalar_root(self):
        x = T.Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(T.ShapeError):
            T.backward(T.mul(x, x))


class TestAdamW:
    def test_zero_grad_zero_decay_leaves_params(self):
        p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        before = p.data.copy()
        T.adamw_step({"p": p}, T.AdamWState(), lr=0.1)
        assert np.array_equal(p.data, before)

    def test_first_step_magnitude_is_lr(self):
        p = T.Tensor(np.array([0.5]), requires_grad=True)
        p.grad = np.array([3.7])
        T.adamw_step({"p": p}, T.AdamWState(), lr=0.01, eps=1e-8)
        # First Adam step: update = -lr * g / (|g| + eps) = -lr * sign(g), up to eps.
        assert p.data[0] == pytest.approx(0.5 - 0.01, rel=1e-6)

    def test_descends_quadratic(self):
        w = T.Tensor(np.array([1.0]), requires_grad=True)
        state = T.AdamWState()
        traj = [abs(w.data[0])]
        for _ in range(10):
            w.grad = 2.0 * w.data  # d/dw of w^2
            T.adamw_step({"w": w}, state, lr=0.1)
            traj.append(abs(w.data[0]))
        assert all(b < a for a, b in zip(traj, traj[1:]))

    def test_nonfinite_grad_rejects_whole_step(self):
        p = T.Tensor(np.array([1.0]), requires_grad=True)
        q = T.Tensor(np.array([2.0]), requires_grad=True)
        p.grad = np.array([1.0])
        q.grad = np.array([np.nan])
        state = T.AdamWState()
        with pytest.raises(T.NonFiniteGradientError, match="q"):
            T.adamw_step({"p": p, "q": q}, state, lr=0.1)
        assert p.data[0] == 1.0 and q.data[0] == 2.0 and state.step == 0

    def test_weight_decay_is_decoupled(self):
        p = T.Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([0.0])
        T.adamw_step({"p": p}, T.AdamWState(), lr=0.1, weight_decay=0.5)
        assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.5 * 1.0)
