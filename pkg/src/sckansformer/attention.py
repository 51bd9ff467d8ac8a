"""Scaled dot-product attention and multi-head self-attention.

Scores are scaled by the square root of the per-head width (D/h), and the
concatenated heads go through an output projection W_O. Token order carries
no meaning here: MSA is permutation-equivariant, positions enter the model
only through the positional table added upstream.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    div,
    matmul,
    reshape,
    softmax,
    transpose,
)


def _swap_last(t: Tensor) -> Tensor:
    perm = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return transpose(t, perm)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(QK^T / sqrt(d)) V over the last two axes; leading axes batch."""
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention operands disagree: {q.shape}, {k.shape}, {v.shape}")
    d = q.shape[-1]
    scores = div(matmul(q, _swap_last(k)), Tensor(math.sqrt(d), dtype=q.dtype))
    return matmul(softmax(scores, axis=-1), v)


class MsaParams:
    """Projection weights for multi-head self-attention, all D x D, no bias."""

    def __init__(self, d_model: int, heads: int, rng: Optional[np.random.Generator] = None, dtype=None):
        if d_model % heads != 0:
            raise ConfigError(f"hidden width {d_model} not divisible by heads={heads}")
        rng = rng or np.random.default_rng(0)
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        std = 1.0 / math.sqrt(d_model)

        def w():
            return Tensor(rng.normal(0.0, std, size=(d_model, d_model)), requires_grad=True, dtype=dtype)

        self.wq, self.wk, self.wv, self.wo = w(), w(), w(), w()

    def parameters(self) -> list:
        return [self.wq, self.wk, self.wv, self.wo]


def msa_forward(x: Tensor, p: MsaParams) -> Tensor:
    """Project, split into heads, attend per head, concatenate, project out.

    Accepts [N, D] or batched [B, N, D].
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[-1] != p.d_model:
        raise ShapeError(f"msa expects [B, N, {p.d_model}], got {x.shape}")
    b, n, d = x.shape

    def heads(t: Tensor) -> Tensor:
        # [B,N,D] -> [B,h,N,d_h]
        return transpose(reshape(t, (b, n, p.heads, p.d_head)), (0, 2, 1, 3))

    q = heads(matmul(x, p.wq))
    k = heads(matmul(x, p.wk))
    v = heads(matmul(x, p.wv))
    attended = attention(q, k, v)  # [B,h,N,d_h]
    merged = reshape(transpose(attended, (0, 2, 1, 3)), (b, n, d))
    out = matmul(merged, p.wo)
    return reshape(out, (n, d)) if squeeze else out
