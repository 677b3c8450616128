"""Binary weight files.

Layout (little-endian)::

    b"DMSW" | u16 version | u32 count
    count x ( u16 name_len | name (UTF-8) | u8 dtype | u8 rank | rank x u32 dims | payload )
    u32 CRC32 of every preceding byte

dtype tags: 0 = float32, 1 = float64.
"""
import logging
import struct
import zlib
from pathlib import Path
from typing import Iterator, List, Tuple, Union

import numpy as np
import pandas as pd

from .errors import WeightFormatError
from .params import ParamSet

logger = logging.getLogger(__name__)

MAGIC = b"DMSW"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

PathLike = Union[str, Path]


def encode_weights(params: ParamSet) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(params))]
    for name, t in params.items():
        dtype = np.dtype(t.dtype)
        if dtype not in TAG_OF:
            raise WeightFormatError(f"'{name}': unsupported dtype {dtype}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF or t.ndim > 0xFF:
            raise WeightFormatError(f"'{name}': name or rank too large")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", TAG_OF[dtype], t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype=DTYPE_TAGS[TAG_OF[dtype]]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFormatError(f"truncated weight file at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _records(data: bytes) -> Iterator[Tuple[str, np.dtype, Tuple[int, ...], bytes]]:
    if len(data) < len(MAGIC) + 10:
        raise WeightFormatError("weight file too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise WeightFormatError("CRC mismatch: weight file is corrupted")
    reader = _Reader(body)
    if reader.take(4) != MAGIC:
        raise WeightFormatError("bad magic: not a DMSW weight file")
    version, count = reader.unpack("<HI")
    if version != VERSION:
        raise WeightFormatError(f"unsupported weight format version {version}")
    seen = set()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise WeightFormatError(f"tensor name is not UTF-8: {e}") from e
        if name in seen:
            raise WeightFormatError(f"duplicate tensor name '{name}'")
        seen.add(name)
        tag, rank = reader.unpack("<BB")
        if tag not in DTYPE_TAGS:
            raise WeightFormatError(f"'{name}': unknown dtype tag {tag}")
        dims = reader.unpack(f"<{rank}I")
        dtype = DTYPE_TAGS[tag]
        payload = reader.take(int(np.prod(dims, dtype=np.int64)) * dtype.itemsize)
        yield name, dtype, tuple(dims), payload
    if reader.pos != len(body):
        raise WeightFormatError(f"{len(body) - reader.pos} trailing bytes after the last tensor")


def decode_weights(data: bytes) -> ParamSet:
    return ParamSet(
        (name, np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="), copy=True))
        for name, dtype, dims, payload in _records(data)
    )


def save_weights(path: PathLike, params: ParamSet) -> int:
    """Write ``params`` to ``path``; returns the byte count."""
    data = encode_weights(params)
    Path(path).write_bytes(data)
    logger.info(f"wrote {len(params)} tensors ({len(data):,} bytes) to {path}")
    return len(data)


def load_weights(path: PathLike) -> ParamSet:
    data = Path(path).read_bytes()
    params = decode_weights(data)
    logger.info(f"read {len(params)} tensors ({len(data):,} bytes) from {path}")
    return params


def inspect_weights(path: PathLike) -> pd.DataFrame:
    """One row per record: name, dtype, shape, element count."""
    rows: List[Tuple] = []
    for name, dtype, dims, _ in _records(Path(path).read_bytes()):
        rows.append((name, "float32" if dtype.itemsize == 4 else "float64",
                     "x".join(str(d) for d in dims), int(np.prod(dims, dtype=np.int64))))
    return pd.DataFrame(rows, columns=["name", "dtype", "shape", "numel"])
