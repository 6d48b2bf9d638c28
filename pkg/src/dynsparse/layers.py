"""Weight containers and functional layers shared by both pipelines."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class LinearWeights:
    w: Tensor  # (fan_in, fan_out)
    b: Tensor  # (fan_out,)


@dataclass
class LayerNormWeights:
    gamma: Tensor
    beta: Tensor


def init_linear(fan_in: int, fan_out: int, rng: np.random.Generator, dtype, *, zero: bool = False) -> LinearWeights:
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return LinearWeights(
        w=Tensor(w.astype(dtype), requires_grad=True),
        b=Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True),
    )


def init_layernorm(dim: int, dtype) -> LayerNormWeights:
    return LayerNormWeights(
        gamma=Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
    )


def linear(x: Tensor, w: LinearWeights) -> Tensor:
    return T.matmul(x, w.w) + w.b


def layer_norm(x: Tensor, w: LayerNormWeights) -> Tensor:
    return T.layernorm(x, w.gamma, w.beta)


def iter_named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses / lists / dicts yielding (dotted name, Tensor) pairs
    in a deterministic order. Used by the optimizer and checkpoint io."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            child = getattr(obj, f.name)
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from iter_named_tensors(child, name)
    elif isinstance(obj, (list, tuple)):
        for i, child in enumerate(obj):
            name = f"{prefix}.{i}" if prefix else str(i)
            yield from iter_named_tensors(child, name)
    elif isinstance(obj, dict):
        for key in obj:
            name = f"{prefix}.{key}" if prefix else str(key)
            yield from iter_named_tensors(obj[key], name)
    # plain ints/floats/strings/None carry no parameters


def parameters(obj) -> list[Tensor]:
    return [t for _, t in iter_named_tensors(obj) if t.requires_grad]


def named_arrays(obj) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in iter_named_tensors(obj)}


def load_arrays(obj, arrays: dict[str, np.ndarray]) -> None:
    """Copy values from ``arrays`` into the tensors of ``obj`` in place."""
    for name, t in iter_named_tensors(obj):
        if name not in arrays:
            raise KeyError(f"checkpoint is missing tensor {name!r}")
        src = arrays[name]
        if src.shape != t.data.shape:
            raise ValueError(
                f"checkpoint tensor {name!r} has shape {src.shape}, expected "
                f"{t.data.shape}"
            )
        t.data = src.astype(t.data.dtype, copy=True)


def copy_weights(obj):
    """Deep copy of a weight container (fresh Tensors, same values)."""
    if isinstance(obj, Tensor):
        return Tensor(obj.data.copy(), requires_grad=obj.requires_grad)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        kwargs = {f.name: copy_weights(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        return type(obj)(**kwargs)
    if isinstance(obj, list):
        return [copy_weights(c) for c in obj]
    if isinstance(obj, tuple):
        return tuple(copy_weights(c) for c in obj)
    if isinstance(obj, dict):
        return {k: copy_weights(v) for k, v in obj.items()}
    return obj
