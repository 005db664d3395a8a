"""Versioned binary checkpoint files for named parameter arrays.

Layout (all integers little-endian unsigned 64-bit):

    magic "CDFKD001"
    repeated until EOF:
        name_len, name (UTF-8), rank, extents[rank], float32 data (little-endian)

Round trips are bit-exact, so file digests double as frozen-weights proofs.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .tensor import Parameter

MAGIC = b"CDFKD001"

__all__ = ["MAGIC", "save_checkpoint", "load_checkpoint", "checkpoint_digest"]


def save_checkpoint(path: str | Path, params) -> None:
    """Write parameters in their given order.

    ``params`` may be a sequence of Parameter or a name -> ndarray mapping.
    """
    if isinstance(params, dict):
        items = list(params.items())
    else:
        items = [(p.name, p.value) for p in params]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, value in items:
            arr = np.ascontiguousarray(value, dtype="<f4")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into an ordered name -> float32 array mapping."""
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:8]!r}")
    out: dict[str, np.ndarray] = {}
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint at byte {pos}")
        piece = blob[pos : pos + n]
        pos += n
        return piece

    while pos < len(blob):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        if name in out:
            raise ValueError(f"{path}: duplicate parameter '{name}'")
        out[name] = data.astype(np.float32)
    return out


def checkpoint_digest(path: str | Path) -> str:
    """SHA-256 of the checkpoint file bytes."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_into(params: list[Parameter], path: str | Path) -> None:
    """Load checkpoint values into existing parameters, validating the manifest."""
    state = load_checkpoint(path)
    names = [p.name for p in params]
    if names != list(state.keys()):
        raise ValueError(
            f"{path}: parameter manifest mismatch (expected {names}, found {list(state.keys())})"
        )
    for p in params:
        arr = state[p.name]
        if arr.shape != p.value.shape:
            raise ValueError(f"{path}: shape {arr.shape} != {p.value.shape} for '{p.name}'")
        p.value[...] = arr
        p.momentum[...] = 0.0
