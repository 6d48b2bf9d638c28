"""Multi-head self-attention, with and without decision-mask masking.

The masked variant zeroes the columns of dropped tokens before the softmax
normalization and adds an explicit self-loop per row, so a dropped token
cannot influence any other token while batch shapes stay fixed. On the kept
rows/columns it is exactly equal to dense attention computed on the kept
subset alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .layers import LinearWeights, init_linear, linear
from .tensor import Tensor


@dataclass
class AttentionWeights:
    wq: LinearWeights  # (C, C)
    wk: LinearWeights
    wv: LinearWeights
    proj: LinearWeights
    heads: int


def init_attention(embed_dim: int, heads: int, rng: np.random.Generator, dtype) -> AttentionWeights:
    if embed_dim % heads:
        raise T.ShapeError(f"embed dim {embed_dim} not divisible by {heads} heads")
    return AttentionWeights(
        wq=init_linear(embed_dim, embed_dim, rng, dtype),
        wk=init_linear(embed_dim, embed_dim, rng, dtype),
        wv=init_linear(embed_dim, embed_dim, rng, dtype),
        proj=init_linear(embed_dim, embed_dim, rng, dtype),
        heads=heads,
    )


def _with_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise T.ShapeError(f"attention expects (N, C) or (B, N, C), got {x.shape}")


def _heads(t: Tensor, heads: int) -> Tensor:
    b, n, c = t.shape
    return T.transpose(T.reshape(t, (b, n, heads, c // heads)), (0, 2, 1, 3))


def _qkv_heads(x: Tensor, w: AttentionWeights) -> tuple[Tensor, Tensor, Tensor, int]:
    c = x.shape[-1]
    head_dim = c // w.heads
    q = _heads(linear(x, w.wq), w.heads)
    k = _heads(linear(x, w.wk), w.heads)
    v = _heads(linear(x, w.wv), w.heads)
    return q, k, v, head_dim


def _merge_heads(ctx: Tensor, w: AttentionWeights) -> Tensor:
    b, h, n, hd = ctx.shape
    out = T.transpose(ctx, (0, 2, 1, 3))
    out = T.reshape(out, (b, n, h * hd))
    return linear(out, w.proj)


def attention_scores(x: Tensor, w: AttentionWeights) -> Tensor:
    """Pre-softmax scores Q K^T / sqrt(head_dim), shape (B, H, N, N)."""
    x, _ = _with_batch(x)
    q, k, _, head_dim = _qkv_heads(x, w)
    scale = 1.0 / np.sqrt(head_dim)
    return T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale


def dense_attention(x: Tensor, w: AttentionWeights) -> Tensor:
    """Standard multi-head self-attention with per-head scaling."""
    xb, squeeze = _with_batch(x)
    q, k, v, head_dim = _qkv_heads(xb, w)
    scale = 1.0 / np.sqrt(head_dim)
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale
    attn = T.softmax(scores, axis=-1)
    out = _merge_heads(T.matmul(attn, v), w)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def masked_attention_matrix(scores: Tensor, mask: Tensor) -> Tensor:
    """Row-normalized attention restricted by the keep mask.

    ``scores`` is (B, H, N, N); ``mask`` is (B, N) with values in [0, 1]
    (hard 0/1 at the straight-through forward). Column j is scaled by
    mask[j] for every row i != j; the diagonal always keeps weight, so each
    row sums to 1 even when every other token is dropped.
    """
    b, h, n, _ = scores.shape
    eye = np.eye(n, dtype=scores.dtype)
    # G[i, j] = mask[j] off the diagonal, 1 on it (built so gradients flow
    # into soft mask values during training).
    cols = T.reshape(mask, (b, 1, 1, n))
    gate = cols * Tensor((1.0 - eye).astype(scores.dtype)) + Tensor(eye)
    # Row-max subtraction for stability; constant w.r.t. the graph because
    # the normalization cancels it exactly.
    shift = Tensor(scores.data.max(axis=-1, keepdims=True))
    weights = T.exp(scores - shift) * gate
    denom = T.sum_(weights, axis=-1, keepdims=True)
    return weights / denom


def masked_attention(x: Tensor, mask: Tensor, w: AttentionWeights) -> Tensor:
    """Self-attention in which dropped tokens are invisible to kept tokens.

    ``mask`` holds per-token keep values; position 0 (the class token) must
    be kept. During training the values arrive from the straight-through
    sampler, so the forward data is exactly 0/1 while gradients flow through
    the soft surrogate.
    """
    xb, squeeze = _with_batch(x)
    mb = T.reshape(mask, (1,) + mask.shape) if mask.ndim == 1 else mask
    if mb.shape != xb.shape[:2]:
        raise T.ShapeError(
            f"mask shape {mask.shape} does not match tokens {x.shape}"
        )
    if not np.all(mb.data[:, 0] == 1.0):
        raise ValueError("class token (index 0) must be kept: mask[..., 0] != 1")
    q, k, v, head_dim = _qkv_heads(xb, w)
    scale = 1.0 / np.sqrt(head_dim)
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale
    attn = masked_attention_matrix(scores, mb)
    out = _merge_heads(T.matmul(attn, v), w)
    return T.reshape(out, out.shape[1:]) if squeeze else out
