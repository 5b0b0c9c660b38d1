"""Dense float64 tensors and the TNSR1 serialization formats.

A Tensor is a shape plus a flat row-major buffer of 64-bit floats. Float64
is the reference precision for everything in this package; checkpoints may
additionally be written with float32 payloads (see ``write_container``).

On-disk single-tensor block ("TNSR1"):

    b"TNSR1\\n"
    <rank as ASCII decimal> b"\\n"
    <dims, space separated ASCII decimals> b"\\n"   (empty line for rank 0)
    <raw little-endian float64 values, row-major>

Container of named tensors ("TNSR1C"), used for checkpoints:

    b"TNSR1C\\n"
    <entry count> b"\\n"
    then per entry: <key> b"\\n" followed by one TNSR1 block.

Keys are flat ASCII names (e.g. ``layer03.attn.qkv.weight``). Parsers track
byte offsets and name them in error messages.
"""

from __future__ import annotations

import numpy as np

from ..errors import CheckpointError, ShapeError

MAGIC = b"TNSR1\n"
CONTAINER_MAGIC = b"TNSR1C\n"


class Tensor:
    """Immutable-by-convention dense array: tuple shape + float64 C-order data."""

    __slots__ = ("data",)

    def __init__(self, data, shape=None):
        arr = np.asarray(data, dtype=np.float64)
        if shape is not None:
            arr = arr.reshape(shape)
        arr = np.ascontiguousarray(arr)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ShapeError("tensor values must be finite")
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Internal fast path: trusts the array (C-order float64, finite)."""
        t = object.__new__(cls)
        t.data = arr
        return t

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls._wrap(np.zeros(shape, dtype=np.float64))

    @classmethod
    def full(cls, shape, value: float) -> "Tensor":
        return cls._wrap(np.full(shape, float(value), dtype=np.float64))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def bitwise_equal(self, other: "Tensor") -> bool:
        return self.shape == other.shape and bool(
            np.all(self.data.view(np.uint64) == other.data.view(np.uint64))
        )

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def tensor_to_bytes(t: Tensor) -> bytes:
    dims = " ".join(str(d) for d in t.shape)
    header = MAGIC + f"{len(t.shape)}\n{dims}\n".encode("ascii")
    payload = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    return header + payload


def _read_line(buf: bytes, offset: int, what: str) -> tuple[bytes, int]:
    end = buf.find(b"\n", offset)
    if end < 0:
        raise CheckpointError(f"unterminated {what} at byte offset {offset}")
    return buf[offset:end], end + 1


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one TNSR1 block starting at ``offset``; returns (tensor, end offset)."""
    start = offset
    if buf[offset : offset + len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad TNSR1 magic at byte offset {start}")
    offset += len(MAGIC)
    rank_line, offset = _read_line(buf, offset, "rank line")
    try:
        rank = int(rank_line)
    except ValueError:
        raise CheckpointError(f"bad rank at byte offset {start}") from None
    if rank < 0:
        raise CheckpointError(f"negative rank at byte offset {start}")
    dims_line, offset = _read_line(buf, offset, "dims line")
    parts = dims_line.split()
    if len(parts) != rank:
        raise CheckpointError(
            f"rank {rank} but {len(parts)} dims at byte offset {start}"
        )
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise CheckpointError(f"bad dims at byte offset {start}") from None
    if any(d <= 0 for d in dims):
        raise CheckpointError(f"non-positive dim at byte offset {start}")
    count = 1
    for d in dims:
        count *= d
    nbytes = count * 8
    if offset + nbytes > len(buf):
        raise CheckpointError(
            f"truncated payload at byte offset {offset} (need {nbytes} bytes)"
        )
    arr = np.frombuffer(buf[offset : offset + nbytes], dtype="<f8").astype(np.float64)
    return Tensor._wrap(np.ascontiguousarray(arr.reshape(dims))), offset + nbytes


def write_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def read_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = tensor_from_bytes(buf, 0)
    if end != len(buf):
        raise CheckpointError(f"trailing bytes after tensor at byte offset {end}")
    return t


def container_to_bytes(entries: dict[str, Tensor]) -> bytes:
    out = [CONTAINER_MAGIC, f"{len(entries)}\n".encode("ascii")]
    for key, t in entries.items():
        if "\n" in key or not key:
            raise CheckpointError(f"invalid container key {key!r}")
        out.append(key.encode("ascii") + b"\n")
        out.append(tensor_to_bytes(t))
    return b"".join(out)


def container_from_bytes(buf: bytes) -> dict[str, Tensor]:
    if buf[: len(CONTAINER_MAGIC)] != CONTAINER_MAGIC:
        raise CheckpointError("bad TNSR1C magic at byte offset 0")
    offset = len(CONTAINER_MAGIC)
    count_line, offset = _read_line(buf, offset, "entry count")
    try:
        count = int(count_line)
    except ValueError:
        raise CheckpointError(f"bad entry count at byte offset {len(CONTAINER_MAGIC)}") from None
    entries: dict[str, Tensor] = {}
    for _ in range(count):
        key_line, offset = _read_line(buf, offset, "entry key")
        key = key_line.decode("ascii")
        if key in entries:
            raise CheckpointError(f"duplicate key {key!r} at byte offset {offset}")
        entries[key], offset = tensor_from_bytes(buf, offset)
    if offset != len(buf):
        raise CheckpointError(f"trailing bytes after container at byte offset {offset}")
    return entries


def write_container(path, entries: dict[str, Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(container_to_bytes(entries))


def read_container(path) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        buf = fh.read()
    return container_from_bytes(buf)
