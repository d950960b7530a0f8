"""Binary checkpoint format for parameter registries.

Layout (all integers little-endian u32):

    magic   4 bytes  b"CMFT"
    version u32      currently 1
    count   u32      number of parameters
    per parameter:
        id_len u32, id bytes (utf-8)
        rank   u32, extents (u32 each)
        payload: rank-major float32 little-endian scalars

Values are stored at training precision (float32); the round trip is
bit-exact for float32 parameters.
"""

from __future__ import annotations

import struct

import numpy as np

from .tensor import ContractError, ParameterRegistry

MAGIC = b"CMFT"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated or version-incompatible checkpoint."""


def save_checkpoint(path: str, registry: ParameterRegistry) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(registry))]
    for param in registry:
        ident = param.id.encode("utf-8")
        arr = param.value.data.astype("<f4", copy=False)
        chunks.append(struct.pack("<I", len(ident)))
        chunks.append(ident)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path: str) -> dict:
    """Read a checkpoint into an ordered {id: float32 ndarray} mapping."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic bytes")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        out = blob[pos:pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params: dict = {}
    for _ in range(count):
        (id_len,) = struct.unpack("<I", take(4))
        ident = take(id_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).copy()
        if ident in params:
            raise CheckpointError(f"duplicate parameter id {ident!r}")
        params[ident] = arr
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last parameter")
    return params


def load_into_registry(path: str, registry: ParameterRegistry) -> None:
    """Restore parameter values; ids and shapes must match the registry exactly."""
    params = load_checkpoint(path)
    want = set(registry.ids())
    have = set(params)
    if want != have:
        missing = sorted(want - have)
        extra = sorted(have - want)
        raise CheckpointError(f"parameter id mismatch: missing={missing} extra={extra}")
    for param in registry:
        arr = params[param.id]
        if arr.shape != param.value.data.shape:
            raise CheckpointError(
                f"shape mismatch for {param.id!r}: checkpoint {arr.shape}, model {param.value.data.shape}")
        param.value.data = arr.astype(param.value.data.dtype)
        if param.value.grad is not None:
            param.value.grad = None
        param.momentum_buffer = None


def registry_state_equal(a: ParameterRegistry, b: ParameterRegistry) -> bool:
    if a.ids() != b.ids():
        return False
    return all(np.array_equal(pa.value.data, pb.value.data) for pa, pb in zip(a, b))
