"""Tensor helpers, the seeded generator, and the FTEN binary tensor format.

Tensors are plain ``numpy.ndarray`` objects. Rasters are laid out
``[channels, height, width]`` and kernels ``[out_ch, in_ch, kh, kw]``, all
row-major. Batched variants prepend a leading batch axis.
"""
from __future__ import annotations

import io
import math
import os
import struct
from typing import BinaryIO, Sequence

import numpy as np

from .errors import FormatError, ShapeError

DTYPE = np.float64

FTEN_MAGIC = b"FTEN"
FTEN_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ShapeError(f"shape must be non-empty with extents >= 1, got {list(shape)}")
    return shape


def zeros(shape: Sequence[int], dtype=DTYPE) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=dtype)


def pad2d(t: np.ndarray, pad: int) -> np.ndarray:
    """Zero-pad the two trailing (spatial) axes of a rank-3 tensor by ``pad``."""
    if t.ndim != 3:
        raise ShapeError(f"pad2d expects a [C,H,W] tensor, got rank {t.ndim}")
    if pad < 0:
        raise ShapeError(f"padding must be non-negative, got {pad}")
    if pad == 0:
        return t.copy()
    return np.pad(t, ((0, 0), (pad, pad), (pad, pad)))


def crop2d(t: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return t.copy()
    return t[..., pad:-pad, pad:-pad].copy()


class Rng:
    """Deterministic generator: PCG64 raw 64-bit output, uniforms from the top
    53 bits, normals by the Box-Muller transform.

    Only the PCG64 bit stream is taken from numpy; its output is fixed by the
    algorithm, so sequences do not depend on numpy's distribution code.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._bits = np.random.PCG64(self.seed)

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n)

    def uniform(self, shape) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return u.reshape(shape)

    def normal(self, shape, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * math.pi * u2)
        z[1::2] = r * np.sin(2.0 * math.pi * u2)
        return (mean + stddev * z[:n]).reshape(shape)

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        """Integers in ``[low, high)``."""
        return low + np.floor(self.uniform(size) * (high - low)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.raw(n), kind="stable")

    def child(self, index: int) -> "Rng":
        """Independent generator for parallel or per-item work."""
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, int(index)])
        return Rng(int(seq.generate_state(1, np.uint64)[0]))


def rng_normal(rng: Rng, shape: Sequence[int], mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
    if stddev < 0:
        raise ValueError(f"stddev must be >= 0, got {stddev}")
    shape = _check_shape(shape)
    if stddev == 0:
        return np.full(shape, float(mean), dtype=DTYPE)
    return rng.normal(shape, mean, stddev)


# -- FTEN ---------------------------------------------------------------------

def write_ften(f: BinaryIO, t: np.ndarray) -> None:
    t = np.asarray(t)
    if t.dtype not in _CODE_FOR_DTYPE:
        t = t.astype(np.float64)
    code = _CODE_FOR_DTYPE[t.dtype]
    _check_shape(t.shape)
    f.write(FTEN_MAGIC)
    f.write(struct.pack("<BBB", FTEN_VERSION, code, t.ndim))
    f.write(struct.pack(f"<{t.ndim}I", *t.shape))
    f.write(np.ascontiguousarray(t, dtype=_DTYPE_CODES[code]).tobytes())


def read_ften(f: BinaryIO) -> np.ndarray:
    head = f.read(7)
    if len(head) < 7:
        raise FormatError("truncated FTEN header")
    if head[:4] != FTEN_MAGIC:
        raise FormatError(f"bad FTEN magic {head[:4]!r}")
    version, code, rank = head[4], head[5], head[6]
    if version != FTEN_VERSION:
        raise FormatError(f"unsupported FTEN version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown FTEN dtype code {code}")
    if rank == 0:
        raise FormatError("FTEN rank must be >= 1")
    ext = f.read(4 * rank)
    if len(ext) < 4 * rank:
        raise FormatError("truncated FTEN extents")
    shape = struct.unpack(f"<{rank}I", ext)
    if any(s == 0 for s in shape):
        raise FormatError(f"FTEN extents must be >= 1, got {list(shape)}")
    dt = _DTYPE_CODES[code]
    nbytes = int(np.prod(shape)) * dt.itemsize
    payload = f.read(nbytes)
    if len(payload) < nbytes:
        raise FormatError(f"truncated FTEN payload: expected {nbytes} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def ften_bytes(t: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_ften(buf, t)
    return buf.getvalue()


def ften_from_bytes(b: bytes) -> np.ndarray:
    return read_ften(io.BytesIO(b))


def save_ften(path: str | os.PathLike, t: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_ften(f, t)


def load_ften(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        try:
            return read_ften(f)
        except FormatError as e:
            raise FormatError(f"{path}: {e}") from None
