"""Binary file formats: hyperspectral cubes, label rasters and checkpoints.

All integers and floats are little-endian.

* cube:       b"HSI1", u32 H, u32 W, u32 d, then H*W*d float32 (band fastest)
* labels:     b"LBL1", u32 H, u32 W, then H*W int32
* checkpoint: b"BIDA", u32 version, u32 count, then ``count`` records of
              u16 name length, UTF-8 name, u8 rank, u32 extents, float64 data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

CUBE_MAGIC = b"HSI1"
LABEL_MAGIC = b"LBL1"
CKPT_MAGIC = b"BIDA"
CKPT_VERSION = 1
MAX_ELEMENTS = 1 << 31


def _read(path) -> bytes:
    path = Path(path)
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise FormatError("file not found", path) from None


def _header(buf: bytes, magic: bytes, n_dims: int, path) -> tuple:
    if len(buf) < 4:
        raise FormatError("file too short for magic", path, len(buf))
    if buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}", path, 0)
    end = 4 + 4 * n_dims
    if len(buf) < end:
        raise FormatError("truncated header", path, len(buf))
    dims = struct.unpack(f"<{n_dims}I", buf[4:end])
    total = 1
    for n in dims:
        total *= n
    if total > MAX_ELEMENTS:
        raise FormatError(f"dimensions {dims} overflow the element limit", path, 4)
    return dims, end, total


def write_cube(path, cube: np.ndarray):
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ValueError(f"cube must be H x W x d, got shape {cube.shape}")
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC + struct.pack("<3I", *cube.shape))
        fh.write(np.ascontiguousarray(cube, dtype="<f4").tobytes())


def read_cube(path) -> np.ndarray:
    buf = _read(path)
    dims, off, total = _header(buf, CUBE_MAGIC, 3, path)
    if len(buf) != off + 4 * total:
        raise FormatError(f"expected {4 * total} data bytes, found {len(buf) - off}", path, min(len(buf), off + 4 * total))
    return np.frombuffer(buf, dtype="<f4", count=total, offset=off).astype(np.float32).reshape(dims)


def write_labels(path, labels: np.ndarray):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"labels must be H x W, got shape {labels.shape}")
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC + struct.pack("<2I", *labels.shape))
        fh.write(np.ascontiguousarray(labels, dtype="<i4").tobytes())


def read_labels(path) -> np.ndarray:
    buf = _read(path)
    dims, off, total = _header(buf, LABEL_MAGIC, 2, path)
    if len(buf) != off + 4 * total:
        raise FormatError(f"expected {4 * total} data bytes, found {len(buf) - off}", path, min(len(buf), off + 4 * total))
    return np.frombuffer(buf, dtype="<i4", count=total, offset=off).astype(np.int32).reshape(dims)


def write_checkpoint(path, arrays: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<2I", CKPT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = _read(path)
    if len(buf) < 12:
        raise FormatError("file too short for checkpoint header", path, len(buf))
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}", path, 0)
    version, count = struct.unpack("<2I", buf[4:12])
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path, 4)
    off, out = 12, {}

    def need(n):
        if off + n > len(buf):
            raise FormatError("truncated checkpoint record", path, off)

    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(nlen + 1)
        try:
            name = buf[off : off + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("record name is not UTF-8", path, off) from None
        off += nlen
        rank = buf[off]
        off += 1
        need(4 * rank)
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        total = int(np.prod(shape, dtype=np.int64)) if rank else 1
        if total > MAX_ELEMENTS:
            raise FormatError(f"record {name!r} extents {shape} overflow", path, off - 4 * rank)
        need(8 * total)
        out[name] = np.frombuffer(buf, dtype="<f8", count=total, offset=off).astype(np.float64).reshape(shape)
        off += 8 * total
    if off != len(buf):
        raise FormatError("trailing bytes after last record", path, off)
    return out


def encode_text(text: str) -> np.ndarray:
    """Pack UTF-8 text into a float64 array so it fits a checkpoint record."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_text(arr: np.ndarray) -> str:
    return np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8")
