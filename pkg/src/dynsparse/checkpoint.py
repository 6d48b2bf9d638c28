"""Checkpoint container: a text header naming every tensor followed by the
raw little-endian float payloads in header order. Round trips are
byte-exact, and truncation is detected with a structured error."""

from __future__ import annotations

import io
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"dynsparse-tensors 1\n"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(RuntimeError):
    """Raised for malformed or truncated checkpoint files."""


def save(path: Union[str, Path], arrays: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(f"{len(arrays)}\n".encode())
    for name, arr in arrays.items():
        if " " in name or "\n" in name:
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for tensor {name!r}")
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        buf.write(f"{name} {dtype} {shape}\n".encode())
    buf.write(b"end\n")
    for name, arr in arrays.items():
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[str(arr.dtype)]).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load(path: Union[str, Path]) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    offset = len(MAGIC)

    def read_line() -> str:
        nonlocal offset
        end = raw.find(b"\n", offset)
        if end < 0:
            raise CheckpointError(f"{path}: truncated header")
        line = raw[offset:end].decode()
        offset = end + 1
        return line

    try:
        count = int(read_line())
    except ValueError as exc:
        raise CheckpointError(f"{path}: bad tensor count") from exc
    specs = []
    for _ in range(count):
        parts = read_line().split(" ")
        if len(parts) != 3:
            raise CheckpointError(f"{path}: malformed header line {parts!r}")
        name, dtype, shape_s = parts
        if dtype not in _DTYPES:
            raise CheckpointError(f"{path}: unsupported dtype {dtype!r} for {name!r}")
        shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
        specs.append((name, dtype, shape))
    if read_line() != "end":
        raise CheckpointError(f"{path}: header terminator missing")

    arrays: dict[str, np.ndarray] = {}
    for name, dtype, shape in specs:
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(_DTYPES[dtype]).itemsize
        payload = raw[offset : offset + nbytes]
        if len(payload) != nbytes:
            raise CheckpointError(
                f"{path}: truncated payload for {name!r}: expected {nbytes} bytes, "
                f"got {len(payload)}"
            )
        arrays[name] = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(shape).astype(dtype)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return arrays
