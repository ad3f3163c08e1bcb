"""Binary tensor files.

Layout (all little-endian)::

    b"EEDT" | u32 version (=1) | u32 ndim | ndim x u64 dims | prod(dims) x f32

Grids without prompt tokens are stored as ``[H, W, C]``; grids with prompt
tokens as ``[H*W + P, C]`` (the reader then needs H and W). Masks are stored as
``[H, W]`` of 0.0/1.0.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import BadMagic, FormatError, InvalidArgument, Truncated, VersionMismatch
from .grid import EditMask, TokenGrid, rasterize_mask

MAGIC = b"EEDT"
VERSION = 1
_HEAD = struct.Struct("<4sII")


def encode(x) -> bytes:
    arr = _as_array(x)
    head = _HEAD.pack(MAGIC, VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype("<f4", copy=False).tobytes(order="C")


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < _HEAD.size:
        raise Truncated(f"header needs {_HEAD.size} bytes, file has {len(buf)}")
    magic, version, ndim = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatch(f"tensor file version {version}, expected {VERSION}")
    off = _HEAD.size
    if len(buf) < off + 8 * ndim:
        raise Truncated("dims block truncated")
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    count = int(np.prod(dims, dtype=np.uint64)) if ndim else 1
    have = len(buf) - off
    if have < 4 * count:
        raise Truncated(f"payload has {have // 4} floats, header claims {count}")
    if have > 4 * count:
        raise FormatError(f"{have - 4 * count} trailing bytes after payload")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(dims)


def write_tensor(x, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(x))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def read_grid(path, height: int | None = None, width: int | None = None) -> TokenGrid:
    arr = read_tensor(path)
    if arr.ndim == 3:
        h, w, c = arr.shape
        if (height, width) not in ((None, None), (h, w)):
            raise InvalidArgument(f"{os.fspath(path)}: grid is {h}x{w}, expected {height}x{width}")
        return TokenGrid(h, w, c, 0, arr.reshape(h * w, c))
    if arr.ndim == 2:
        if height is None or width is None:
            raise InvalidArgument(f"{os.fspath(path)}: 2-D grid file needs height and width")
        n, c = arr.shape
        p = n - height * width
        if p < 0:
            raise InvalidArgument(f"{os.fspath(path)}: {n} tokens < {height}x{width}")
        return TokenGrid(height, width, c, p, arr)
    raise InvalidArgument(f"{os.fspath(path)}: grid files are 2-D or 3-D, got {arr.ndim}-D")


def read_mask(path, patch: int = 1) -> EditMask:
    arr = read_tensor(path)
    if arr.ndim != 2:
        raise InvalidArgument(f"{os.fspath(path)}: mask files are 2-D, got {arr.ndim}-D")
    if not np.isin(arr, (0.0, 1.0)).all():
        raise InvalidArgument(f"{os.fspath(path)}: mask values must be 0.0 or 1.0")
    return rasterize_mask(arr > 0.5, patch)


def _as_array(x) -> np.ndarray:
    if isinstance(x, TokenGrid):
        if x.prompt_len == 0:
            return x.data.reshape(x.height, x.width, x.channels)
        return x.data
    if isinstance(x, EditMask):
        return x.bits.astype(np.float32)
    arr = np.asarray(x)
    if arr.dtype != np.float32:
        if not np.can_cast(arr.dtype, np.float32, casting="same_kind") and arr.dtype != bool:
            raise InvalidArgument(f"cannot store dtype {arr.dtype} as f32")
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr)
