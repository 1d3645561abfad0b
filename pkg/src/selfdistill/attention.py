"""Scaled dot-product attention and its multi-head composition.

Both operations are pure functions over tensors and differentiate through
the shared autodiff engine. Inputs may be single sequences (m x d) or
batches with leading axes; the math runs over the last two dims.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, concat, matmul, scale, softmax_rows, transpose


class AttentionParams:
    """Per-head projection weights plus the shared output projection.

    Head ``i`` owns its own query/key/value projections (d_model x d_k,
    d_model x d_k, d_model x d_v); head outputs are concatenated and mapped
    back to d_model by ``w_o`` (h*d_v x d_model) with bias ``b_o``. Query,
    key, and value projections carry no bias.
    """

    def __init__(
        self,
        w_q: Sequence[Tensor],
        w_k: Sequence[Tensor],
        w_v: Sequence[Tensor],
        w_o: Tensor,
        b_o: Tensor | None = None,
    ):
        h = len(w_q)
        if h < 1 or len(w_k) != h or len(w_v) != h:
            raise ShapeError(f"need matching nonempty head lists, got {len(w_q)}/{len(w_k)}/{len(w_v)}")
        d_model, d_k = w_q[0].shape
        d_v = w_v[0].shape[1]
        for i in range(h):
            if w_q[i].shape != (d_model, d_k) or w_k[i].shape != (d_model, d_k):
                raise ShapeError(f"head {i}: query/key projections must be ({d_model},{d_k})")
            if w_v[i].shape != (d_model, d_v):
                raise ShapeError(f"head {i}: value projection must be ({d_model},{d_v})")
        if w_o.shape[0] != h * d_v:
            raise ShapeError(f"w_o must have {h * d_v} rows (h*d_v), got {w_o.shape}")
        if b_o is not None and b_o.shape != (w_o.shape[1],):
            raise ShapeError(f"b_o must have shape ({w_o.shape[1]},), got {b_o.shape}")
        self.w_q = list(w_q)
        self.w_k = list(w_k)
        self.w_v = list(w_v)
        self.w_o = w_o
        self.b_o = b_o
        self.heads = h
        self.d_model = d_model
        self.d_k = d_k
        self.d_v = d_v

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        d_model: int,
        heads: int,
        d_k: int | None = None,
        d_v: int | None = None,
        init_scale: float = 0.02,
        dtype=np.float32,
    ) -> "AttentionParams":
        if d_k is None:
            if d_model % heads:
                raise ShapeError(f"d_model {d_model} not divisible by {heads} heads")
            d_k = d_model // heads
        if d_v is None:
            d_v = d_k

        def w(rows, cols):
            return Tensor(rng.normal(0.0, init_scale, (rows, cols)).astype(dtype), requires_grad=True)

        return cls(
            w_q=[w(d_model, d_k) for _ in range(heads)],
            w_k=[w(d_model, d_k) for _ in range(heads)],
            w_v=[w(d_model, d_v) for _ in range(heads)],
            w_o=w(heads * d_v, d_model),
            b_o=Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True),
        )

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for i in range(self.heads):
            out.append((f"{prefix}wq.{i}", self.w_q[i]))
            out.append((f"{prefix}wk.{i}", self.w_k[i]))
            out.append((f"{prefix}wv.{i}", self.w_v[i]))
        out.append((f"{prefix}wo", self.w_o))
        if self.b_o is not None:
            out.append((f"{prefix}bo", self.b_o))
        return out


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k)) v, returning (output, attention weights).

    q is (..., m, d_k), k is (..., n, d_k), v is (..., n, d_v); weights come
    out (..., m, n) and row-stochastic, the output (..., m, d_v).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key widths differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value counts differ: {k.shape} vs {v.shape}")
    d_k = q.shape[-1]
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d_k))
    weights = softmax_rows(scores)
    return matmul(weights, v), weights


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    params: AttentionParams,
    return_weights: bool = False,
):
    """Concat of per-head attentions, projected back to d_model.

    Query positions come from ``x_q`` (..., m, d_model) and keys/values
    from ``x_kv`` (..., n, d_model). With ``return_weights`` the per-head
    weight tensors are returned alongside the output.
    """
    if x_q.shape[-1] != params.d_model:
        raise ShapeError(f"query width {x_q.shape} does not match d_model {params.d_model}")
    if x_kv.shape[-1] != params.d_model:
        raise ShapeError(f"key/value width {x_kv.shape} does not match d_model {params.d_model}")
    outputs = []
    weights = []
    for i in range(params.heads):
        head, w = scaled_dot_product_attention(
            matmul(x_q, params.w_q[i]),
            matmul(x_kv, params.w_k[i]),
            matmul(x_kv, params.w_v[i]),
        )
        outputs.append(head)
        weights.append(w)
    merged = matmul(concat(outputs, axis=-1), params.w_o)
    if params.b_o is not None:
        merged = merged + params.b_o
    if return_weights:
        return merged, weights
    return merged
