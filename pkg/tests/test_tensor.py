"""Tensor engine: forward values against oracles, gradients against finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfdistill.errors import ContractError, DomainError, ShapeError
from selfdistill import tensor as T
from selfdistill.tensor import Tensor

from oracles import matmul_loops, numeric_gradient, softmax_row


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        a = t64([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(t64(np.eye(2)), a)
        np.testing.assert_allclose(out.data, a.data)

    def test_selector_row(self):
        out = T.matmul(t64([[1.0, 0.0]]), t64([[1.0, 0.0], [0.0, 1.0]]))
        np.testing.assert_allclose(out.data, [[1.0, 0.0]])

    def test_against_triple_loop(self):
        a = [[1.0, 2.0], [3.0, 4.0]]
        b = [[5.0, 6.0], [7.0, 8.0]]
        out = T.matmul(t64(a), t64(b))
        np.testing.assert_allclose(out.data, [[19.0, 22.0], [43.0, 50.0]])
        np.testing.assert_allclose(out.data, matmul_loops(a, b))

    def test_random_dims_up_to_8_match_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m, k, n = rng.integers(1, 9, size=3)
            a = rng.normal(size=(m, k))
            b = rng.normal(size=(k, n))
            out = T.matmul(t64(a), t64(b))
            np.testing.assert_allclose(out.data, matmul_loops(a, b), rtol=1e-6)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 2))))

    def test_gradient_rule(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        loss = T.tensor_sum(T.matmul(a, b))
        loss.backward()
        g = np.ones((3, 2))
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)

    def test_batched_matmul_gradient(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        err = T.finite_diff_check(lambda v: T.tensor_sum(T.mul(T.matmul(v, w), T.matmul(v, w))), x)
        assert err < 1e-6
        err_w = T.finite_diff_check(lambda v: T.tensor_sum(T.mul(T.matmul(x, v), T.matmul(x, v))), w)
        assert err_w < 1e-6


class TestElementwise:
    def test_additive_identity(self):
        out = T.add(t64([1.0, 2.0]), t64([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1.0, 2.0])

    def test_scale_by_inverse_sqrt(self):
        out = T.scale(t64([2.0, 4.0]), 1.0 / np.sqrt(4.0))
        np.testing.assert_allclose(out.data, [1.0, 2.0])

    def test_pointwise_mul(self):
        out = T.mul(t64([1.0, 2.0, 3.0]), t64([4.0, 5.0, 6.0]))
        np.testing.assert_allclose(out.data, [4.0, 10.0, 18.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(t64(np.ones(3)), t64(np.ones(2)))

    @pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
    def test_gradients(self, op):
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(size=(4,)), requires_grad=True)
        b = Tensor(rng.normal(size=(4,)), requires_grad=True)
        err = T.finite_diff_check(lambda v: T.tensor_sum(T.mul(op(v, b), op(v, b))), a)
        assert err < 1e-6

    def test_broadcast_gradient_sums_down(self):
        x = Tensor(np.ones((3, 2)), requires_grad=True, dtype=np.float64)
        bias = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
        loss = T.tensor_sum(T.add(x, bias))
        loss.backward()
        np.testing.assert_allclose(bias.grad, [3.0, 3.0])


class TestSoftmax:
    def test_uniform_logits(self):
        out = T.softmax_rows(t64([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_direct_evaluation(self):
        out = T.softmax_rows(t64([[1.0, 0.0]]), temperature=0.5)
        np.testing.assert_allclose(out.data, [[0.8808, 0.1192]], atol=1e-4)
        e2 = np.exp(2.0)
        np.testing.assert_allclose(out.data[0, 0], e2 / (e2 + 1.0), rtol=1e-12)

    def test_overflow_safety(self):
        out = T.softmax_rows(t64([[1000.0, 999.0]]))
        np.testing.assert_allclose(out.data, [softmax_row([1000.0, 999.0])], rtol=1e-6)
        np.testing.assert_allclose(out.data, [[0.7311, 0.2689]], atol=1e-4)

    def test_temperature_domain(self):
        with pytest.raises(DomainError):
            T.softmax_rows(t64([[0.0, 1.0]]), temperature=0.0)
        with pytest.raises(DomainError):
            T.softmax_rows(t64([[0.0, 1.0]]), temperature=-1.0)

    def test_all_minus_inf_row(self):
        with pytest.raises(DomainError):
            T.softmax_rows(t64([[-np.inf, -np.inf]]))

    @given(
        st.lists(st.floats(-30, 30), min_size=2, max_size=6),
        st.floats(0.05, 5.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one_and_shift_invariant(self, row, tau):
        x = np.asarray([row], dtype=np.float64)
        out = T.softmax_rows(t64(x), temperature=tau)
        assert abs(out.data.sum() - 1.0) < 1e-6
        shifted = T.softmax_rows(t64(x + 17.5), temperature=tau)
        np.testing.assert_allclose(out.data, shifted.data, atol=1e-9)

    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=6))
    @settings(max_examples=40, deadline=None)
    def test_sharpening_monotone(self, row):
        x = np.asarray([row], dtype=np.float64)
        hot = T.softmax_rows(t64(x), temperature=0.1).data.max()
        cold = T.softmax_rows(t64(x), temperature=1.0).data.max()
        assert hot >= cold - 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 5)))
        err = T.finite_diff_check(
            lambda v: T.tensor_sum(T.mul(T.softmax_rows(v, temperature=0.7), w)), x
        )
        assert err < 1e-6


class TestLogSoftmax:
    def test_values(self):
        out = T.log_softmax_rows(t64([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[-0.6931, -0.6931]], atol=1e-4)

    def test_exp_rows_normalize(self):
        rng = np.random.default_rng(5)
        out = T.log_softmax_rows(t64(rng.normal(size=(4, 7))), temperature=0.3)
        np.testing.assert_allclose(np.exp(out.data).sum(axis=-1), np.ones(4), atol=1e-6)

    def test_gradient(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 4)))
        err = T.finite_diff_check(
            lambda v: T.tensor_sum(T.mul(T.log_softmax_rows(v, temperature=0.5), w)), x
        )
        assert err < 1e-6


class TestLayerNorm:
    def test_zero_variance_collapses_to_bias(self):
        out = T.layer_norm(t64([1.0, 1.0, 1.0]), t64(np.ones(3)), t64(np.zeros(3)))
        np.testing.assert_allclose(out.data, np.zeros(3), atol=1e-3)

    def test_mean_one_std_one(self):
        out = T.layer_norm(t64([0.0, 2.0]), t64(np.ones(2)), t64(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-5)

    def test_gain_annihilation(self):
        out = T.layer_norm(t64([3.0, -7.0]), t64(np.zeros(2)), t64([5.0, 5.0]))
        np.testing.assert_allclose(out.data, [5.0, 5.0])

    def test_bad_eps(self):
        with pytest.raises(DomainError):
            T.layer_norm(t64([1.0, 2.0]), t64(np.ones(2)), t64(np.zeros(2)), eps=0.0)

    def test_gradients_all_three_inputs(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        gain = Tensor(rng.normal(size=(4,)), requires_grad=True)
        bias = Tensor(rng.normal(size=(4,)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3, 4)))

        def loss_of(v):
            return T.tensor_sum(T.mul(T.layer_norm(v, gain, bias), w))

        assert T.finite_diff_check(loss_of, x) < 1e-6
        assert (
            T.finite_diff_check(lambda v: T.tensor_sum(T.mul(T.layer_norm(x, v, bias), w)), gain)
            < 1e-6
        )
        assert (
            T.finite_diff_check(lambda v: T.tensor_sum(T.mul(T.layer_norm(x, gain, v), w)), bias)
            < 1e-6
        )


class TestGelu:
    def test_fixed_points(self):
        assert T.gelu(t64(0.0)).item() == 0.0
        assert abs(T.gelu(t64(10.0)).item() - 10.0) < 1e-4

    def test_tanh_approximation_value(self):
        out = T.gelu(t64(1.0)).item()
        assert abs(out - 0.8412) < 1e-4
        inner = np.sqrt(2 / np.pi) * (1 + 0.044715)
        assert abs(out - 0.5 * (1 + np.tanh(inner))) < 1e-12

    def test_monotone_on_grid(self):
        # increasing from the curve's minimum (about -0.75) upward
        grid = np.linspace(-0.5, 6.0, 200)
        vals = T.gelu(t64(grid)).data
        assert np.all(np.diff(vals) > -1e-9)

    def test_gradient(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(6,)), requires_grad=True)
        assert T.finite_diff_check(lambda v: T.tensor_sum(T.mul(T.gelu(v), T.gelu(v))), x) < 1e-6


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.random.default_rng(9).normal(size=(3, 2)), requires_grad=True)
        T.backward(T.tensor_sum(w))
        np.testing.assert_allclose(w.grad, np.ones((3, 2)))

    def test_quadratic_rule(self):
        w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.backward(T.tensor_sum(T.mul(w, w)))
        np.testing.assert_allclose(w.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(T.mul(w, w))

    def test_detached_loss_rejected(self):
        with pytest.raises(ContractError):
            T.backward(Tensor(np.asarray(1.0), requires_grad=True))

    def test_double_backward_rejected(self):
        w = Tensor(np.ones(2), requires_grad=True)
        loss = T.tensor_sum(T.mul(w, w))
        T.backward(loss)
        with pytest.raises(ContractError):
            T.backward(loss)

    def test_shared_subgraph_rejected_after_consumption(self):
        w = Tensor(np.ones(2), requires_grad=True)
        y = T.mul(w, w)
        T.backward(T.tensor_sum(y))
        with pytest.raises(ContractError):
            T.backward(T.tensor_mean(y))

    def test_grad_accumulates_until_reset(self):
        w = Tensor(np.ones(2), requires_grad=True)
        T.backward(T.tensor_sum(T.mul(w, w)))
        T.backward(T.tensor_sum(T.mul(w, w)))
        np.testing.assert_allclose(w.grad, [4.0, 4.0])
        w.zero_grad()
        assert w.grad is None

    def test_no_grad_suppresses_recording(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            out = T.tensor_sum(T.mul(w, w))
        assert out._pullback is None
        with pytest.raises(ContractError):
            T.backward(out)

    def test_constant_never_accumulates(self):
        w = Tensor(np.ones(2), requires_grad=True)
        c = Tensor(np.full(2, 3.0))
        T.backward(T.tensor_sum(T.mul(w, c)))
        assert c.grad is None
        np.testing.assert_allclose(w.grad, [3.0, 3.0])

    def test_softmax_cross_entropy_chain_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        x = np.asarray(rng.normal(size=(4,)))
        target = np.zeros(3)
        target[1] = 1.0
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)

        def ce(weights):
            logits = T.matmul(Tensor(x[None, :]), weights)
            logp = T.log_softmax_rows(logits)
            return T.scale(T.tensor_sum(T.mul(logp, Tensor(target[None, :]))), -1.0)

        assert T.finite_diff_check(ce, w) < 1e-6

        def ce_np(warr):
            logits = x @ warr
            logits = logits - logits.max()
            logp = logits - np.log(np.exp(logits).sum())
            return -(target * logp).sum()

        loss = ce(w)
        T.backward(loss)
        np.testing.assert_allclose(w.grad, numeric_gradient(ce_np, w.data), atol=1e-7)


class TestStructuralOps:
    def test_concat_and_split_gradient(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.full((2, 3), 2.0), requires_grad=True)
        out = T.concat([a, b], axis=-1)
        assert out.shape == (2, 5)
        T.backward(T.tensor_sum(T.mul(out, out)))
        np.testing.assert_allclose(a.grad, 2 * np.ones((2, 2)))
        np.testing.assert_allclose(b.grad, 4 * np.ones((2, 3)))

    def test_take_token_scatter(self):
        x = Tensor(np.arange(24, dtype=np.float64).reshape(2, 3, 4), requires_grad=True)
        out = T.take_token(x, 1)
        np.testing.assert_allclose(out.data, x.data[:, 1, :])
        T.backward(T.tensor_sum(out))
        expected = np.zeros((2, 3, 4))
        expected[:, 1, :] = 1.0
        np.testing.assert_allclose(x.grad, expected)

    def test_slice_axis0(self):
        x = Tensor(np.arange(12, dtype=np.float64).reshape(4, 3), requires_grad=True)
        out = T.slice_axis0(x, 1, 3)
        np.testing.assert_allclose(out.data, x.data[1:3])
        T.backward(T.tensor_sum(out))
        expected = np.zeros((4, 3))
        expected[1:3] = 1.0
        np.testing.assert_allclose(x.grad, expected)

    def test_transpose_gradient(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3)))
        err = T.finite_diff_check(lambda v: T.tensor_sum(T.mul(T.transpose(v), w)), x)
        assert err < 1e-6


class TestFiniteDiffCheck:
    def test_linear_function_exact(self):
        x = Tensor(np.random.default_rng(12).normal(size=(5,)))
        assert T.finite_diff_check(T.tensor_sum, x) <= 1e-10

    def test_quadratic(self):
        x = Tensor(np.random.default_rng(13).normal(size=(5,)))
        assert T.finite_diff_check(lambda v: T.tensor_sum(T.mul(v, v)), x) < 1e-6

    def test_softmax_ce_chain(self):
        rng = np.random.default_rng(14)
        target = np.zeros((1, 4))
        target[0, 2] = 1.0
        x = Tensor(rng.normal(size=(1, 4)))

        def f(v):
            return T.scale(T.tensor_sum(T.mul(T.log_softmax_rows(v), Tensor(target))), -1.0)

        assert T.finite_diff_check(f, x) < 1e-6

    def test_bad_step(self):
        with pytest.raises(DomainError):
            T.finite_diff_check(T.tensor_sum, Tensor(np.ones(2)), h=0.0)
