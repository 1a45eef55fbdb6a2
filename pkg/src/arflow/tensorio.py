"""Bit-exact tensor file format ("PFT1") shared by every module.

Layout, all little-endian:

    bytes 0..3   magic b"PFT1"
    bytes 4..7   rank as u32
    next 4*rank  extents as u32 each
    rest         float32 payload, row-major (C order)

A rank-0 file carries exactly one value. The format is lossless for any
finite float32 tensor, so a save/load round trip is the bitwise identity.
"""

from __future__ import annotations

import os

import numpy as np

MAGIC = b"PFT1"


class TensorIOError(IOError):
    """Raised on malformed files or I/O failures, with the path attached."""


def save_tensor(t: np.ndarray, path: str | os.PathLike) -> None:
    """Write `t` to `path` in PFT1 format (values are cast to float32).

    Non-finite values are rejected: everything stored on disk must be
    reloadable into a valid tensor.
    """
    arr = np.asarray(t, dtype=np.float32)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if arr.size and not np.isfinite(arr).all():
        raise TensorIOError(f"refusing to save non-finite values to {path}")
    header = MAGIC + np.uint32(arr.ndim).tobytes()
    extents = np.asarray(arr.shape, dtype="<u4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(extents)
            fh.write(arr.astype("<f4", copy=False).tobytes())
    except OSError as exc:
        raise TensorIOError(f"cannot write tensor to {path}: {exc}") from exc


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    """Read a PFT1 file back into a float32 array."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise TensorIOError(f"cannot read tensor from {path}: {exc}") from exc
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise TensorIOError(f"{path}: not a PFT1 file")
    rank = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    body = 8 + 4 * rank
    if len(raw) < body:
        raise TensorIOError(f"{path}: truncated header (rank {rank})")
    shape = tuple(
        int(x) for x in np.frombuffer(raw, dtype="<u4", count=rank, offset=8)
    )
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    data = np.frombuffer(raw, dtype="<f4", count=-1, offset=body)
    if data.size != n:
        raise TensorIOError(
            f"{path}: payload holds {data.size} values, shape {shape} needs {n}"
        )
    out = data.astype(np.float32).reshape(shape)
    return out


def save_grid(grid: np.ndarray, path: str | os.PathLike) -> None:
    """Store an integer grid through PFT1 (ids are exact in float32)."""
    arr = np.asarray(grid)
    if arr.size and np.abs(arr).max() >= 2**24:
        raise TensorIOError(f"integer grid too large for exact f32 storage: {path}")
    save_tensor(arr.astype(np.float32), path)


def load_grid(path: str | os.PathLike) -> np.ndarray:
    """Load an integer grid stored with save_grid."""
    return np.rint(load_tensor(path)).astype(np.int64)
