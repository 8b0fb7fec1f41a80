"""Bit-exact stream container.

Layout (little-endian)::

    magic "MMFC" | version u8 | approach u8 | role u8 | lambda index u8
    | Q u16 | D u16 | model hash u64 | [condition digest u64] | payload length u32
    | payload

The condition digest is present only on conditional streams, i.e. the lidar
stream of approach 2 and the camera stream of approach 3.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import fnv1a64

MAGIC = b"MMFC"
VERSION = 1

ROLE_FUSED = 0
ROLE_CAMERA = 1
ROLE_LIDAR = 2
ROLE_NAMES = {ROLE_FUSED: "fused", ROLE_CAMERA: "camera", ROLE_LIDAR: "lidar"}
ROLE_IDS = {v: k for k, v in ROLE_NAMES.items()}

_FIXED = struct.Struct("<4sBBBBHHQ")
_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")


class BitstreamError(ValueError):
    """Malformed or mismatched stream.  ``offset`` locates the fault when known."""

    def __init__(self, msg: str, offset: int | None = None):
        self.offset = offset
        super().__init__(msg if offset is None else f"{msg} (byte offset {offset})")


def is_conditional(approach: int, role: int) -> bool:
    return (approach == 2 and role == ROLE_LIDAR) or (approach == 3 and role == ROLE_CAMERA)


def condition_digest(cond: np.ndarray) -> int:
    """FNV-1a 64 over the little-endian float32 bytes of the condition map."""
    return fnv1a64(np.ascontiguousarray(cond, dtype="<f4").tobytes())


@dataclass(frozen=True)
class Bitstream:
    approach: int
    role: int
    lambda_index: int
    q: int
    d: int
    model_hash: int
    payload: bytes
    cond_digest: int | None = None
    version: int = VERSION

    def __post_init__(self):
        if self.approach not in (1, 2, 3):
            raise BitstreamError(f"approach id must be 1, 2 or 3, got {self.approach}")
        if self.role not in ROLE_NAMES:
            raise BitstreamError(f"unknown stream role {self.role}")
        cond = is_conditional(self.approach, self.role)
        if cond and self.cond_digest is None:
            raise BitstreamError("conditional stream needs a condition digest")
        if not cond and self.cond_digest is not None:
            raise BitstreamError("condition digest given for a non-conditional stream")

    @property
    def header_size(self) -> int:
        return _FIXED.size + (_U64.size if self.cond_digest is not None else 0) + _U32.size

    @property
    def size_bytes(self) -> int:
        return self.header_size + len(self.payload)

    @property
    def size_bits(self) -> int:
        return 8 * self.size_bytes

    def to_bytes(self) -> bytes:
        parts = [
            _FIXED.pack(MAGIC, self.version, self.approach, self.role, self.lambda_index,
                        self.q, self.d, self.model_hash),
        ]
        if self.cond_digest is not None:
            parts.append(_U64.pack(self.cond_digest))
        parts.append(_U32.pack(len(self.payload)))
        parts.append(self.payload)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _FIXED.size:
            raise BitstreamError("stream shorter than its header", len(data))
        magic, version, approach, role, lam, q, d, mhash = _FIXED.unpack_from(data, 0)
        if magic != MAGIC:
            raise BitstreamError("bad magic", 0)
        if version != VERSION:
            raise BitstreamError(f"unsupported stream version {version}", 4)
        pos = _FIXED.size
        digest = None
        if is_conditional(approach, role):
            if len(data) < pos + _U64.size:
                raise BitstreamError("stream shorter than its header", len(data))
            (digest,) = _U64.unpack_from(data, pos)
            pos += _U64.size
        if len(data) < pos + _U32.size:
            raise BitstreamError("stream shorter than its header", len(data))
        (length,) = _U32.unpack_from(data, pos)
        pos += _U32.size
        payload = data[pos:]
        if len(payload) != length:
            raise BitstreamError(
                f"payload length {len(payload)} differs from header value {length}", pos + min(len(payload), length)
            )
        return cls(approach=approach, role=role, lambda_index=lam, q=q, d=d, model_hash=mhash,
                   payload=bytes(payload), cond_digest=digest, version=version)
