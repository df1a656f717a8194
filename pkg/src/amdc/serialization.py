"""Binary file formats.

Tensor files are little-endian: magic ``TNSR``, u32 rank, one u64 per
extent, then the 64-bit IEEE values row-major. Cubes and measurements add a
JSON sidecar next to the tensor file; checkpoints embed named tensor
sections behind an ``AMDC`` header (see :mod:`amdc.training`).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

TENSOR_MAGIC = b"TNSR"
CHECKPOINT_MAGIC = b"AMDC"
_MAX_RANK = 32


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    # asarray, not ascontiguousarray: the latter promotes rank 0 to rank 1,
    # and tobytes(order="C") handles non-contiguous layouts anyway.
    arr = np.asarray(arr, dtype=np.float64)
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"cannot serialize zero-extent shape {arr.shape}")
    head = struct.pack("<4sI", TENSOR_MAGIC, arr.ndim)
    dims = b"".join(struct.pack("<Q", d) for d in arr.shape)
    return head + dims + arr.astype("<f8").tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor record; returns (array, offset past the record)."""
    if len(buf) < offset + 8:
        raise FormatError("truncated tensor record (missing header)")
    magic, rank = struct.unpack_from("<4sI", buf, offset)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    if rank > _MAX_RANK:
        raise FormatError(f"implausible tensor rank {rank}")
    offset += 8
    if len(buf) < offset + 8 * rank:
        raise FormatError("truncated tensor record (missing extents)")
    dims = struct.unpack_from(f"<{rank}Q" if rank else "<0Q", buf, offset)
    offset += 8 * rank
    if any(d < 1 for d in dims):
        raise FormatError(f"invalid serialized shape {dims}")
    count = int(np.prod(dims)) if rank else 1
    nbytes = 8 * count
    if len(buf) < offset + nbytes:
        raise FormatError("truncated tensor record (missing payload)")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return arr.reshape(dims).astype(np.float64).copy(), offset + nbytes


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return arr


def save_sidecar(path, meta: dict) -> None:
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_sidecar(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FormatError(f"missing sidecar {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt sidecar {path}: {e}") from e


def sidecar_path(tensor_path) -> Path:
    return Path(str(tensor_path) + ".json")


def pack_named_tensors(sections: dict[str, np.ndarray]) -> bytes:
    """Encode an ordered name->array mapping as length-prefixed records."""
    out = [struct.pack("<Q", len(sections))]
    for name, arr in sections.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(tensor_to_bytes(arr))
    return b"".join(out)


def unpack_named_tensors(buf: bytes, offset: int = 0) -> tuple[dict[str, np.ndarray], int]:
    if len(buf) < offset + 8:
        raise FormatError("truncated section table")
    (count,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    sections: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) < offset + 4:
            raise FormatError("truncated section name")
        (nlen,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if len(buf) < offset + nlen:
            raise FormatError("truncated section name")
        name = buf[offset:offset + nlen].decode("utf-8")
        offset += nlen
        arr, offset = tensor_from_bytes(buf, offset)
        sections[name] = arr
    return sections, offset
