"""Binary tensor records: ``b"VLFT"``, u32 rank, u32 dims, little-endian f64 payload."""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .errors import DataError
from .tensor import Tensor

MAGIC = b"VLFT"


def write_tensor(fp: BinaryIO, t: Tensor | np.ndarray) -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    fp.write(MAGIC)
    fp.write(struct.pack("<I", data.ndim))
    if data.ndim:
        fp.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fp.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def read_tensor(fp: BinaryIO) -> Tensor:
    magic = fp.read(4)
    if magic != MAGIC:
        raise DataError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(fp, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(fp, 4 * rank)) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(fp, 8 * count)
    return Tensor(np.frombuffer(payload, dtype="<f8").reshape(dims))


def _read_exact(fp: BinaryIO, n: int) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise DataError(f"truncated tensor record: wanted {n} bytes, got {len(buf)}")
    return buf


def tensors_to_bytes(tensors: Iterable[Tensor | np.ndarray]) -> bytes:
    buf = io.BytesIO()
    for t in tensors:
        write_tensor(buf, t)
    return buf.getvalue()


def tensors_from_bytes(blob: bytes) -> list[Tensor]:
    buf = io.BytesIO(blob)
    out = []
    while buf.tell() < len(blob):
        out.append(read_tensor(buf))
    return out


def save_tensors(path: str | Path, tensors: Iterable[Tensor | np.ndarray]) -> bytes:
    blob = tensors_to_bytes(tensors)
    Path(path).write_bytes(blob)
    return blob


def load_tensors(path: str | Path) -> list[Tensor]:
    return tensors_from_bytes(Path(path).read_bytes())
