"""Binary feature matrices (AFF1) and weight checkpoints (AFWT).

AFF1 layout, little-endian::

    b"AFF1" | u32 rows | u32 cols | rows*cols f32, row-major

AFWT layout, little-endian::

    b"AFWT" | u16 version | record*
    record = u16 name_len | name (utf-8) | u8 rank | u32 dim * rank | f64 values

Records run to end of file.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import BadMagic, BinaryFormatError, DimOverflow, TruncatedFile

FEATURE_MAGIC = b"AFF1"
CHECKPOINT_MAGIC = b"AFWT"
CHECKPOINT_VERSION = 1
MAX_FEATURE_VALUES = 1 << 31
_U32_MAX = (1 << 32) - 1


def write_feature_file(path: str | os.PathLike, matrix) -> None:
    arr = np.asarray(matrix)
    if arr.ndim != 2:
        raise BinaryFormatError(f"feature matrix must be 2-d, got shape {arr.shape}")
    rows, cols = arr.shape
    if rows > _U32_MAX or cols > _U32_MAX or rows * cols > MAX_FEATURE_VALUES:
        raise DimOverflow(f"{rows}x{cols} does not fit the AFF1 header")
    with np.errstate(over="ignore"):
        data = arr.astype("<f4")
    if not np.all(np.isfinite(data)):
        raise BinaryFormatError("feature values must be finite and within float32 range")
    Path(path).write_bytes(FEATURE_MAGIC + struct.pack("<II", rows, cols) + data.tobytes())


def load_feature_file(path: str | os.PathLike) -> np.ndarray:
    """Read an AFF1 matrix as float64 (exact: every f32 is a valid f64)."""
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise BadMagic(f"{path}: not an AFF1 feature file")
    if len(raw) < 12:
        raise TruncatedFile(f"{path}: header cut short")
    rows, cols = struct.unpack_from("<II", raw, 4)
    if rows * cols > MAX_FEATURE_VALUES:
        raise DimOverflow(f"{path}: declared {rows}x{cols} exceeds {MAX_FEATURE_VALUES} values")
    expected = 12 + 4 * rows * cols
    if len(raw) < expected:
        raise TruncatedFile(f"{path}: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise BinaryFormatError(f"{path}: {len(raw) - expected} trailing bytes")
    data = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=12)
    return data.astype(np.float64).reshape(rows, cols)


def write_checkpoint(path: str | os.PathLike, state: Mapping[str, np.ndarray]) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    for name, value in state.items():
        arr = np.asarray(value, dtype=np.float64)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF or arr.ndim > 0xFF or any(d > _U32_MAX for d in arr.shape):
            raise DimOverflow(f"parameter {name!r} does not fit the AFWT record header")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: not an AFWT checkpoint")
    if len(raw) < 6:
        raise TruncatedFile(f"{path}: header cut short")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise BinaryFormatError(f"{path}: unsupported checkpoint version {version}")

    def take(fmt: str, pos: int):
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise TruncatedFile(f"{path}: record cut short at byte {pos}")
        return struct.unpack_from(fmt, raw, pos), pos + size

    state: dict[str, np.ndarray] = {}
    pos = 6
    while pos < len(raw):
        (name_len,), pos = take("<H", pos)
        if pos + name_len > len(raw):
            raise TruncatedFile(f"{path}: parameter name cut short")
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,), pos = take("<B", pos)
        dims, pos = take(f"<{rank}I", pos)
        count = int(np.prod(dims, dtype=np.int64))
        end = pos + 8 * count
        if end > len(raw):
            raise TruncatedFile(f"{path}: values of {name!r} cut short")
        state[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(dims)
        pos = end
    return state
