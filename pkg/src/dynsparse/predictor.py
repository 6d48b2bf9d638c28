"""Keep/drop scoring for tokens: local+global feature heads, Gumbel-Softmax
sampling with a straight-through estimator, mask updates, and deterministic
top-k selection for inference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .layers import (
    LayerNormWeights,
    LinearWeights,
    init_layernorm,
    init_linear,
    layer_norm,
    linear,
)
from .tensor import Tensor


@dataclass
class DecisionMask:
    """Keep/drop state produced by one sparsification stage.

    ``values`` holds the per-token keep mask: exact binary at inference,
    straight-through binary (with soft gradients) during training. ``pi``
    holds the stage's probabilities, rows [drop, keep]. When ``class_index``
    is set, that token is pinned to keep=1 by construction.
    """

    values: Tensor  # (B, N)
    pi: Tensor  # (B, N, 2)
    stage_index: int
    class_index: Optional[int] = None

    def keep_counts(self) -> np.ndarray:
        return self.values.data.sum(axis=-1)


@dataclass
class PredictorWeights:
    """Two feature heads (local, global) and a small decision MLP."""

    local_norm: LayerNormWeights
    local_fc: LinearWeights  # (C, C/2)
    global_norm: LayerNormWeights
    global_fc: LinearWeights  # (C, C/2)
    head_fc1: LinearWeights  # (C, C/2)
    head_fc2: LinearWeights  # (C/2, C/4)
    head_fc3: LinearWeights  # (C/4, 2)


def init_predictor(embed_dim: int, rng: np.random.Generator, dtype) -> PredictorWeights:
    c = embed_dim
    if c % 4:
        raise T.ShapeError(f"predictor needs embed dim divisible by 4, got {c}")
    return PredictorWeights(
        local_norm=init_layernorm(c, dtype),
        local_fc=init_linear(c, c // 2, rng, dtype),
        global_norm=init_layernorm(c, dtype),
        global_fc=init_linear(c, c // 2, rng, dtype),
        head_fc1=init_linear(c, c // 2, rng, dtype),
        head_fc2=init_linear(c // 2, c // 4, rng, dtype),
        # Zero-initialized final layer: initial keep probability is exactly
        # 0.5 everywhere, which avoids an early collapse to drop-everything.
        head_fc3=init_linear(c // 4, 2, rng, dtype, zero=True),
    )


def aggregate(u: Tensor, mask: Tensor) -> Tensor:
    """Masked mean over rows: sum(mask_i * u_i) / sum(mask_i).

    ``u`` is (N, C') or (B, N, C'); ``mask`` matches the leading shape.
    Differentiable in both arguments; the mask sum must be positive.
    """
    squeeze = u.ndim == 2
    ub = T.reshape(u, (1,) + u.shape) if squeeze else u
    mb = T.reshape(mask, (1,) + mask.shape) if mask.ndim == 1 else mask
    b, n, c = ub.shape
    if mb.shape != (b, n):
        raise T.ShapeError(f"mask shape {mask.shape} does not match rows of {u.shape}")
    if np.any(mb.data.sum(axis=-1) <= 0):
        raise ValueError("aggregate needs at least one kept row per sample")
    weighted = T.matmul(T.reshape(mb, (b, 1, n)), ub)  # (B, 1, C')
    total = T.reshape(T.sum_(mb, axis=-1, keepdims=True), (b, 1, 1))
    out = T.reshape(weighted / total, (b, c))
    return T.reshape(out, (c,)) if squeeze else out


def predict_probabilities(x: Tensor, mask: Tensor, w: PredictorWeights) -> Tensor:
    """Per-token keep/drop probabilities, shape (..., N, 2).

    The local head scores each token from its own features; the global head
    pools the currently-kept tokens into one context vector that is
    broadcast-concatenated onto every token before the decision MLP.
    """
    squeeze = x.ndim == 2
    xb = T.reshape(x, (1,) + x.shape) if squeeze else x
    mb = T.reshape(mask, (1,) + mask.shape) if mask.ndim == 1 else mask
    b, n, c = xb.shape
    z_local = T.gelu(linear(layer_norm(xb, w.local_norm), w.local_fc))
    u = T.gelu(linear(layer_norm(xb, w.global_norm), w.global_fc))
    z_global = aggregate(u, mb)  # (B, C/2)
    z_global = T.broadcast_to(T.reshape(z_global, (b, 1, c // 2)), (b, n, c // 2))
    z = T.concat([z_local, z_global], axis=-1)  # (B, N, C)
    h = T.gelu(linear(z, w.head_fc1))
    h = T.gelu(linear(h, w.head_fc2))
    pi = T.softmax(linear(h, w.head_fc3), axis=-1)
    return T.reshape(pi, (n, 2)) if squeeze else pi


def sample_gumbel_noise(shape, rng: np.random.Generator, dtype) -> np.ndarray:
    u = rng.random(shape)
    return (-np.log(-np.log(u + 1e-20) + 1e-20)).astype(dtype)


def gumbel_soft(pi: Tensor, temperature: float, noise: np.ndarray) -> Tensor:
    """Tempered soft keep column for pinned Gumbel noise (the surrogate the
    straight-through estimator backpropagates through)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if pi.shape[-1] != 2:
        raise T.ShapeError(f"expected (..., 2) probabilities, got {pi.shape}")
    tiny = float(np.finfo(pi.data.dtype).tiny)
    # Clamp keeps log finite; degenerate rows like [0, 1] still sample their
    # certain outcome because the clamped logit gap is astronomically large.
    safe = Tensor(np.maximum(pi.data, tiny)) + (pi - pi.detach())
    logits = (T.log(safe) + Tensor(np.asarray(noise, dtype=pi.data.dtype))) * (
        1.0 / temperature
    )
    soft = T.softmax(logits, axis=-1)
    return T.reshape(T.narrow(soft, soft.ndim - 1, 1, 1), pi.shape[:-1])


def gumbel_sample(
    pi: Tensor,
    temperature: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
) -> Tensor:
    """Hard keep decision per token with a straight-through gradient.

    Forward value is the argmax one-hot's keep column (exactly 0 or 1); the
    backward pass sees the tempered soft sample. Sampling the argmax of
    log pi + Gumbel noise keeps the exact property E[D] = pi[..., 1].
    ``noise`` pins the Gumbel draws for reproducibility tests.
    """
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_sample needs an rng when noise is not pinned")
        noise = sample_gumbel_noise(pi.shape, rng, pi.data.dtype)
    soft_keep = gumbel_soft(pi, temperature, noise)
    hard_keep = (soft_keep.data > 0.5).astype(pi.data.dtype)
    return Tensor(hard_keep) + (soft_keep - soft_keep.detach())


def update_mask(current: Tensor, decision: Tensor, class_index: Optional[int] = None) -> Tensor:
    """Hadamard update: a token dropped once stays dropped.

    Both arguments are keep masks of equal shape. When ``class_index`` is
    given, that position is rebuilt as constant 1 regardless of the inputs.
    """
    if current.shape != decision.shape:
        raise T.ShapeError(
            f"mask shapes disagree: {current.shape} vs {decision.shape}"
        )
    merged = current * decision
    if class_index is None:
        return merged
    if class_index != 0:
        raise ValueError("class token is expected at index 0")
    axis = merged.ndim - 1
    ones = Tensor(np.ones(merged.shape[:-1] + (1,), dtype=merged.data.dtype))
    rest = T.narrow(merged, axis, 1, merged.shape[-1] - 1)
    return T.concat([ones, rest], axis=axis)


def topk_select(pi: np.ndarray, m: int) -> np.ndarray:
    """Indices of the m largest keep probabilities, best first.

    Ties break toward the lower index. ``pi`` is (N, 2) or a length-N keep
    vector; the result is invariant to any positive monotone transform of
    the keep column.
    """
    keep = np.asarray(pi)
    if keep.ndim == 2:
        keep = keep[:, 1]
    n = keep.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"top-k count {m} out of range [1, {n}]")
    order = np.argsort(-keep, kind="stable")
    return order[:m]
