"""Binary tensor container shared by datasets, caches, and model checkpoints.

Layout (all integers little-endian):

    magic           4 bytes, b"ACTD"
    version         u32 (currently 1)
    manifest_len    u64, followed by that many bytes of UTF-8 "key=value"
                    lines, sorted by key
    n_tensors       u64
    per tensor:     name_len u32, name bytes (UTF-8, unique),
                    dtype u8 (0 = float64), rank u8,
                    extents rank * u64, payload (row-major, little-endian)
    checksum        u64, BLAKE2b-64 of every preceding byte

Any flipped byte anywhere before the trailer fails the checksum.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ACTD"
VERSION = 1
DTYPE_F64 = 0


class IntegrityError(Exception):
    """Base class for container violations; CLI maps these to exit code 3."""


class BadMagicError(IntegrityError):
    pass


class BadVersionError(IntegrityError):
    pass


class TruncatedError(IntegrityError):
    pass


class ChecksumError(IntegrityError):
    pass


def _digest64(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def hash_bytes(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=16).hexdigest()


def hash_file(path: str | Path) -> str:
    return hash_bytes(Path(path).read_bytes())


def _as_le_f64(x) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d to 1-d; keep scalar rank intact
    arr = np.asarray(x, dtype="<f8")
    return arr if arr.ndim == 0 or arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)


def hash_arrays(tensors: dict[str, np.ndarray]) -> str:
    """Order-independent content hash over named float64 arrays."""
    h = hashlib.blake2b(digest_size=16)
    for name in sorted(tensors):
        arr = _as_le_f64(tensors[name])
        h.update(name.encode("utf-8"))
        h.update(struct.pack("<B", arr.ndim))
        h.update(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        h.update(arr.tobytes())
    return h.hexdigest()


def save_container(path: str | Path, manifest: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ValueError("save_container: duplicate tensor names")
    parts: list[bytes] = [MAGIC, struct.pack("<I", VERSION)]
    man = "".join(f"{k}={manifest[k]}\n" for k in sorted(manifest)).encode("utf-8")
    parts.append(struct.pack("<Q", len(man)))
    parts.append(man)
    parts.append(struct.pack("<Q", len(names)))
    for name in names:
        arr = _as_le_f64(tensors[name])
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", DTYPE_F64, arr.ndim))
        if arr.ndim:
            parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + _digest64(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"container truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_container(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedError("container shorter than its checksum trailer")
    body, trailer = raw[:-8], raw[-8:]
    if _digest64(body) != trailer:
        raise ChecksumError(f"checksum mismatch in {path}")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise BadMagicError(f"bad magic in {path}")
    version = r.u32()
    if version != VERSION:
        raise BadVersionError(f"unsupported container version {version}")
    man_len = r.u64()
    manifest: dict[str, str] = {}
    for line in r.take(man_len).decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            manifest[k] = v
    n = r.u64()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n):
        name = r.take(r.u32()).decode("utf-8")
        if name in tensors:
            raise IntegrityError(f"duplicate tensor name {name!r}")
        dtype = r.u8()
        if dtype != DTYPE_F64:
            raise IntegrityError(f"unknown dtype code {dtype} for {name!r}")
        rank = r.u8()
        shape = tuple(r.u64() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = r.take(count * 8)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    if r.pos != len(body):
        raise IntegrityError(f"{len(body) - r.pos} unread trailing bytes in {path}")
    return manifest, tensors
