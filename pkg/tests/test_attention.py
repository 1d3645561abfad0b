"""Attention against an independent scalar-loop oracle, plus its invariants."""

import numpy as np
import pytest

from selfdistill import tensor as T
from selfdistill.attention import (
    AttentionParams,
    multi_head_attention,
    scaled_dot_product_attention,
)
from selfdistill.errors import ShapeError
from selfdistill.tensor import Tensor

from oracles import attention_loops, multi_head_loops


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def identity_params(d, heads=1):
    eye = np.eye(d)
    return AttentionParams(
        w_q=[t64(eye) for _ in range(heads)],
        w_k=[t64(eye) for _ in range(heads)],
        w_v=[t64(eye) for _ in range(heads)],
        w_o=t64(np.eye(heads * d, d)) if heads > 1 else t64(eye),
        b_o=None,
    )


class TestScaledDotProduct:
    def test_singleton_softmax(self):
        out, weights = scaled_dot_product_attention(t64([[1.0]]), t64([[1.0]]), t64([[3.0]]))
        np.testing.assert_allclose(weights.data, [[1.0]])
        np.testing.assert_allclose(out.data, [[3.0]])

    def test_two_key_example(self):
        q = t64([[1.0, 0.0]])
        k = t64([[1.0, 0.0], [0.0, 1.0]])
        v = t64(np.eye(2))
        out, weights = scaled_dot_product_attention(q, k, v)
        np.testing.assert_allclose(weights.data, [[0.6698, 0.3302]], atol=1e-4)
        np.testing.assert_allclose(out.data, [[0.6698, 0.3302]], atol=1e-4)

    def test_weight_shape_m_by_n(self):
        rng = np.random.default_rng(0)
        out, weights = scaled_dot_product_attention(
            t64(rng.normal(size=(3, 4))),
            t64(rng.normal(size=(5, 4))),
            t64(rng.normal(size=(5, 2))),
        )
        assert weights.shape == (3, 5)
        assert out.shape == (3, 2)

    def test_exhaustive_grid_matches_oracle(self):
        rng = np.random.default_rng(1)
        for m in range(1, 5):
            for n in range(1, 5):
                for d_k in range(1, 5):
                    for d_v in range(1, 5):
                        q = rng.normal(size=(m, d_k))
                        k = rng.normal(size=(n, d_k))
                        v = rng.normal(size=(n, d_v))
                        out, weights = scaled_dot_product_attention(t64(q), t64(k), t64(v))
                        ref_out, ref_w = attention_loops(q, k, v)
                        np.testing.assert_allclose(out.data, ref_out, atol=1e-6)
                        np.testing.assert_allclose(weights.data, ref_w, atol=1e-6)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            scaled_dot_product_attention(
                t64(np.ones((2, 3))), t64(np.ones((2, 4))), t64(np.ones((2, 2)))
            )
        with pytest.raises(ShapeError):
            scaled_dot_product_attention(
                t64(np.ones((2, 3))), t64(np.ones((4, 3))), t64(np.ones((5, 2)))
            )

    def test_rows_stochastic(self):
        rng = np.random.default_rng(2)
        _, weights = scaled_dot_product_attention(
            t64(rng.normal(size=(6, 3))),
            t64(rng.normal(size=(4, 3))),
            t64(rng.normal(size=(4, 2))),
        )
        assert (weights.data >= 0).all()
        np.testing.assert_allclose(weights.data.sum(axis=-1), np.ones(6), atol=1e-6)

    def test_key_value_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        q, k, v = rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=(4, 2))
        perm = rng.permutation(4)
        out, weights = scaled_dot_product_attention(t64(q), t64(k), t64(v))
        out_p, weights_p = scaled_dot_product_attention(t64(q), t64(k[perm]), t64(v[perm]))
        np.testing.assert_allclose(out_p.data, out.data, atol=1e-12)
        np.testing.assert_allclose(weights_p.data, weights.data[:, perm], atol=1e-12)

    def test_row_shift_invariance_of_weights(self):
        # adding a constant to every alignment score of a row leaves softmax fixed;
        # shifting q along the all-ones key direction realizes that on the scores
        rng = np.random.default_rng(4)
        q = rng.normal(size=(2, 3))
        k = np.ones((4, 3))
        v = rng.normal(size=(4, 2))
        _, w1 = scaled_dot_product_attention(t64(q), t64(k), t64(v))
        _, w2 = scaled_dot_product_attention(t64(q + 2.5), t64(k), t64(v))
        np.testing.assert_allclose(w1.data, w2.data, atol=1e-9)

    def test_gradients(self):
        rng = np.random.default_rng(5)
        q = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        k = Tensor(rng.normal(size=(4, 3)))
        v = Tensor(rng.normal(size=(4, 2)))
        w = Tensor(rng.normal(size=(2, 2)))

        def loss_q(t):
            out, _ = scaled_dot_product_attention(t, k, v)
            return T.tensor_sum(T.mul(out, w))

        assert T.finite_diff_check(loss_q, q) < 1e-6

        def loss_k(t):
            out, _ = scaled_dot_product_attention(q, t, v)
            return T.tensor_sum(T.mul(out, w))

        assert T.finite_diff_check(loss_k, Tensor(k.data)) < 1e-6

        def loss_v(t):
            out, _ = scaled_dot_product_attention(q, k, t)
            return T.tensor_sum(T.mul(out, w))

        assert T.finite_diff_check(loss_v, Tensor(v.data)) < 1e-6


class TestMultiHead:
    def test_single_identity_head_reduces_to_sdpa(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 4))
        params = identity_params(4)
        out = multi_head_attention(t64(x), t64(x), params)
        ref, _ = scaled_dot_product_attention(t64(x), t64(x), t64(x))
        np.testing.assert_allclose(out.data, ref.data, atol=1e-12)

    def test_two_heads_concat_then_project(self):
        rng = np.random.default_rng(7)
        d_model, d_k, heads = 4, 2, 2
        x_q = rng.normal(size=(3, d_model))
        x_kv = rng.normal(size=(5, d_model))
        w_q = [rng.normal(size=(d_model, d_k)) for _ in range(heads)]
        w_k = [rng.normal(size=(d_model, d_k)) for _ in range(heads)]
        w_v = [rng.normal(size=(d_model, d_k)) for _ in range(heads)]
        w_o = rng.normal(size=(heads * d_k, d_model))
        b_o = rng.normal(size=d_model)
        params = AttentionParams(
            [t64(w) for w in w_q],
            [t64(w) for w in w_k],
            [t64(w) for w in w_v],
            t64(w_o),
            t64(b_o),
        )
        out = multi_head_attention(t64(x_q), t64(x_kv), params)
        ref = multi_head_loops(x_q, x_kv, w_q, w_k, w_v, w_o, b_o)
        np.testing.assert_allclose(out.data, ref, atol=1e-9)

    def test_exhaustive_grid_matches_oracle(self):
        rng = np.random.default_rng(8)
        for m in range(1, 5):
            for n in range(1, 5):
                for d_k in (1, 3):
                    for d_v in (1, 4):
                        for h in range(1, 5):
                            d_model = 3
                            x_q = rng.normal(size=(m, d_model))
                            x_kv = rng.normal(size=(n, d_model))
                            w_q = [rng.normal(size=(d_model, d_k)) for _ in range(h)]
                            w_k = [rng.normal(size=(d_model, d_k)) for _ in range(h)]
                            w_v = [rng.normal(size=(d_model, d_v)) for _ in range(h)]
                            w_o = rng.normal(size=(h * d_v, d_model))
                            params = AttentionParams(
                                [t64(w) for w in w_q],
                                [t64(w) for w in w_k],
                                [t64(w) for w in w_v],
                                t64(w_o),
                            )
                            out = multi_head_attention(t64(x_q), t64(x_kv), params)
                            ref = multi_head_loops(x_q, x_kv, w_q, w_k, w_v, w_o, None)
                            np.testing.assert_allclose(out.data, ref, atol=1e-8)

    def test_output_shape_contract(self):
        rng = np.random.default_rng(9)
        params = AttentionParams.create(rng, d_model=8, heads=2)
        out = multi_head_attention(
            Tensor(rng.normal(size=(5, 8))), Tensor(rng.normal(size=(7, 8))), params
        )
        assert out.shape == (5, 8)

    def test_width_mismatch(self):
        rng = np.random.default_rng(10)
        params = AttentionParams.create(rng, d_model=8, heads=2)
        with pytest.raises(ShapeError):
            multi_head_attention(Tensor(np.ones((3, 6))), Tensor(np.ones((3, 8))), params)

    def test_param_invariants(self):
        eye = np.eye(4)
        with pytest.raises(ShapeError):
            AttentionParams([t64(eye)], [t64(eye)], [t64(eye)], t64(np.ones((5, 4))))

    def test_gradients_through_projections(self):
        rng = np.random.default_rng(11)
        params = AttentionParams.create(rng, d_model=4, heads=2, dtype=np.float64)
        x = rng.normal(size=(3, 4))
        w = Tensor(rng.normal(size=(3, 4)))

        def loss_wq(t):
            swapped = AttentionParams(
                [t, params.w_q[1]], params.w_k, params.w_v, params.w_o, params.b_o
            )
            return T.tensor_sum(T.mul(multi_head_attention(Tensor(x), Tensor(x), swapped), w))

        assert T.finite_diff_check(loss_wq, Tensor(params.w_q[0].data)) < 1e-6

        def loss_x(t):
            return T.tensor_sum(T.mul(multi_head_attention(t, t, params), w))

        assert T.finite_diff_check(loss_x, Tensor(x)) < 1e-6
