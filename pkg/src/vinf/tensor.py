"""Dense frame-major latent tensors.

A latent is a C-contiguous ``float32`` array of shape ``(F, H, W, C)``; frame
is the slowest-varying axis so frame slices are contiguous copies.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FrameRangeError, ShapeError

DTYPE = np.float32
MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

DUMP_MAGIC = b"VINF"
DUMP_VERSION = 1
_DUMP_HEADER = struct.Struct("<4sIIIII")


@dataclass(frozen=True)
class FrameRange:
    start: int
    len: int

    def __post_init__(self):
        if self.start < 0 or self.len < 1:
            raise FrameRangeError(f"invalid frame range start={self.start} len={self.len}")

    @property
    def stop(self) -> int:
        return self.start + self.len

    def __contains__(self, frame: int) -> bool:
        return self.start <= frame < self.stop


def check_latent(t: np.ndarray) -> np.ndarray:
    if not isinstance(t, np.ndarray) or t.ndim != 4:
        raise ShapeError(f"latent must be a rank-4 array, got {getattr(t, 'shape', type(t))}")
    if t.dtype != DTYPE:
        raise ShapeError(f"latent dtype must be float32, got {t.dtype}")
    if min(t.shape) < 1:
        raise ShapeError(f"all latent dims must be >= 1, got {t.shape}")
    return t


def empty_frames(like: np.ndarray) -> np.ndarray:
    """Zero-frame tensor sharing ``like``'s (H, W, C)."""
    return np.zeros((0,) + like.shape[1:], dtype=DTYPE)


class SeededRng:
    """SplitMix64 stream.

    Each 64-bit output maps to ``2 * (top24 / 2**24) - 1``, a float in [-1, 1)
    that float32 represents exactly.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return _mix64(self.state)

    def next_float(self) -> float:
        return 2.0 * ((self.next_u64() >> 40) / float(1 << 24)) - 1.0

    def floats(self, n: int) -> np.ndarray:
        """Next ``n`` values as float32, advancing the state."""
        out = splitmix_floats(self.state, n)
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return out


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix_floats(seed: int, n: int) -> np.ndarray:
    """First ``n`` mapped SplitMix64 outputs for ``seed`` (vectorized)."""
    steps = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & MASK64) + steps * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    top = (z >> np.uint64(40)).astype(np.float64)
    return (2.0 * (top / float(1 << 24)) - 1.0).astype(DTYPE)


def fnv1a64(data: bytes | str) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def derive_seed(base: int, *labels: object) -> int:
    """Stable child seed for a labelled sub-stream of ``base``."""
    return fnv1a64(":".join([str(base & MASK64)] + [str(x) for x in labels]))


def tensor_from_seed(dims: Sequence[int], seed: int) -> np.ndarray:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4 or min(dims) < 1:
        raise ShapeError(f"dims must be four positive ints, got {dims}")
    return splitmix_floats(seed, int(np.prod(dims))).reshape(dims)


def slice_frames(t: np.ndarray, r: FrameRange) -> np.ndarray:
    check_latent(t)
    if r.stop > t.shape[0]:
        raise FrameRangeError(f"range [{r.start}, {r.stop}) exceeds {t.shape[0]} frames")
    return t[r.start:r.stop].copy()


def concat_frames(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ShapeError("concat_frames needs at least one part")
    tail = parts[0].shape[1:]
    for p in parts:
        check_latent(p)
        if p.shape[1:] != tail:
            raise ShapeError(f"part shape {p.shape} does not match (*, {tail})")
    return np.concatenate(parts, axis=0)


def max_abs_diff(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))


def tensor_to_bytes(t: np.ndarray) -> bytes:
    check_latent(t)
    header = _DUMP_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, *t.shape)
    return header + np.ascontiguousarray(t, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _DUMP_HEADER.size:
        raise ShapeError("tensor dump truncated")
    magic, version, f, h, w, c = _DUMP_HEADER.unpack_from(buf)
    if magic != DUMP_MAGIC:
        raise ShapeError(f"bad dump magic {magic!r}")
    if version != DUMP_VERSION:
        raise ShapeError(f"unsupported dump version {version}")
    n = f * h * w * c
    body = buf[_DUMP_HEADER.size:]
    if len(body) != 4 * n:
        raise ShapeError(f"dump body has {len(body)} bytes, expected {4 * n}")
    return np.frombuffer(body, dtype="<f4").astype(DTYPE).reshape(f, h, w, c)


def save_tensor(path: str | Path, t: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path: str | Path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
