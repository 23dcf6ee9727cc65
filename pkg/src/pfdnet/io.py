"""On-disk formats.

F32M map file::

    b"F32M" | u32 version=1 | u32 h | u32 w | h*w float32, row-major

Checkpoint (all integers little-endian)::

    b"PFDC" | u32 version=1 | u32 entry count
    per entry: u16 name length | name (utf-8) | u8 rank | rank x u32 dims | float32 payload
    u64 CRC-64/XZ of every preceding byte

Text metadata (resolved config, RNG state) is stored as rank-1 entries
named ``meta/<key>`` whose payload holds one UTF-8 byte per float.

Images are binary PPM (P6, 8-bit); annotations are CSV with header ``x,y``.
"""

from __future__ import annotations

import csv
import io as _io
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, LengthError
from .tensor_core import DTYPE

MAP_MAGIC = b"F32M"
CKPT_MAGIC = b"PFDC"
VERSION = 1
META_PREFIX = "meta/"

_CRC64_POLY = 0xC96C5795D7870F42


def _crc64_table() -> list[int]:
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC64_TABLE = _crc64_table()


def crc64(data: bytes) -> int:
    """CRC-64/XZ (ECMA-182 polynomial, reflected, init and xorout all ones)."""
    crc = 0xFFFFFFFFFFFFFFFF
    table = _CRC64_TABLE
    for byte in data:
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# F32M maps


def encode_map(grid: np.ndarray) -> bytes:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise DataError(f"F32M holds 2-D grids, got shape {grid.shape}")
    h, w = grid.shape
    return MAP_MAGIC + struct.pack("<III", VERSION, h, w) + grid.astype("<f4").tobytes()


def decode_map(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 16:
        raise LengthError(f"{source}: truncated F32M header")
    if blob[:4] != MAP_MAGIC:
        raise FormatError(f"{source}: bad magic {blob[:4]!r}")
    version, h, w = struct.unpack("<III", blob[4:16])
    if version != VERSION:
        raise FormatError(f"{source}: unsupported F32M version {version}")
    if len(blob) != 16 + 4 * h * w:
        raise LengthError(f"{source}: expected {16 + 4 * h * w} bytes, found {len(blob)}")
    grid = np.frombuffer(blob, dtype="<f4", offset=16).reshape(h, w).astype(DTYPE)
    if np.isnan(grid).any():
        raise DataError(f"{source}: map contains NaN")
    return grid


def write_map(path, grid: np.ndarray) -> None:
    _atomic_write(path, encode_map(grid))


def read_map(path) -> np.ndarray:
    return decode_map(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# annotations


def write_annotations(path, points) -> None:
    buf = _io.StringIO()
    buf.write("x,y\n")
    for x, y in points:
        buf.write(f"{float(x)!r},{float(y)!r}\n")
    _atomic_write(path, buf.getvalue().encode())


def read_annotations(path, shape=None) -> list[tuple[float, float]]:
    """Read head points; with ``shape=(h, w)`` out-of-image points are rejected."""
    points = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["x", "y"]:
            raise FormatError(f"{path}: expected header 'x,y'")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                x, y = float(row[0]), float(row[1])
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}:{line_no}: bad row {row!r}") from exc
            if shape is not None and not (0 <= x < shape[1] and 0 <= y < shape[0]):
                raise DataError(f"{path}:{line_no}: point ({x}, {y}) outside image {shape}")
            points.append((x, y))
    return points


# ---------------------------------------------------------------------------
# PPM images


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, h, w) image with values in [0, 1] as 8-bit P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"expected a (3, h, w) image, got {image.shape}")
    _, h, w = image.shape
    pix = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    _atomic_write(path, f"P6\n{w} {h}\n255\n".encode() + pix.tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise LengthError(f"{path}: truncated PPM header")
        fields.append(blob[start:pos])
    if fields[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported")
    pos += 1
    data = blob[pos:]
    if len(data) != 3 * w * h:
        raise LengthError(f"{path}: expected {3 * w * h} pixel bytes, found {len(data)}")
    pix = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return (pix.transpose(2, 0, 1).astype(DTYPE) / np.float32(255.0)).astype(DTYPE)


# ---------------------------------------------------------------------------
# checkpoints


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode(), dtype=np.uint8).astype(DTYPE)


def decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr).astype(np.uint8).tolist()).decode()


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    entries = dict(tensors)
    for key, text in (meta or {}).items():
        entries[META_PREFIX + key] = encode_text(text)
    parts = [CKPT_MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        raw = name.encode()
        if len(raw) > 0xFFFF or arr.ndim > 255:
            raise DataError(f"entry {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", crc64(body))


def decode_checkpoint(blob: bytes, source: str = "<bytes>"):
    """Return (tensors, meta)."""
    if len(blob) < 20:
        raise LengthError(f"{source}: truncated checkpoint")
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{source}: bad magic {blob[:4]!r}")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    version, count = struct.unpack("<II", body[4:12])
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode()
            if len(name.encode()) != nlen:
                raise LengthError(f"{source}: truncated entry name")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if pos + 4 * size > len(body):
                raise LengthError(f"{source}: entry {name!r} truncated")
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims).astype(DTYPE)
            pos += 4 * size
            if name.startswith(META_PREFIX):
                meta[name[len(META_PREFIX):]] = decode_text(arr)
            else:
                tensors[name] = arr
    except struct.error as exc:
        raise LengthError(f"{source}: truncated checkpoint") from exc
    if pos != len(body):
        raise LengthError(f"{source}: {len(body) - pos} trailing bytes before checksum")
    if crc64(body) != stored:
        raise FormatError(f"{source}: checksum mismatch")
    return tensors, meta


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    _atomic_write(path, encode_checkpoint(tensors, meta))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes(), str(path))
