"""Appearance codes, location features and the two node-test distances.

Appearance codes are packed big-endian bit strings (``np.uint8`` rows, bit 0
is the most significant bit of byte 0).  That makes the hex form in dataset
files a plain ``bytes.hex()``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .geometry import iou, iou_matrix

DEFAULT_BITS = 512


class DistanceKind(enum.IntEnum):
    LOCATION = 0
    APPEARANCE = 1


@dataclass(frozen=True, eq=False)
class AppearanceCode:
    """Fixed-length binary code; ``nbits`` is always a multiple of 8."""

    packed: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.packed, dtype=np.uint8).reshape(-1)
        if arr.size == 0:
            raise InvalidInputError("appearance code must have at least 8 bits")
        arr.setflags(write=False)
        object.__setattr__(self, "packed", arr)

    @property
    def nbits(self) -> int:
        return 8 * self.packed.size

    @classmethod
    def from_hex(cls, text: str) -> "AppearanceCode":
        try:
            raw = bytes.fromhex(text)
        except ValueError as exc:
            raise InvalidInputError(f"bad hex appearance code: {exc}") from None
        return cls(np.frombuffer(raw, dtype=np.uint8))

    @classmethod
    def from_bits(cls, bits) -> "AppearanceCode":
        bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
        if bits.size % 8:
            raise InvalidInputError(f"bit length must be a multiple of 8, got {bits.size}")
        return cls(np.packbits(bits))

    def to_hex(self) -> str:
        return self.packed.tobytes().hex()

    def bits(self) -> np.ndarray:
        return np.unpackbits(self.packed)

    def complement(self) -> "AppearanceCode":
        return AppearanceCode(np.bitwise_not(self.packed))

    def __eq__(self, other):
        if not isinstance(other, AppearanceCode):
            return NotImplemented
        return np.array_equal(self.packed, other.packed)

    def __hash__(self):
        return hash(self.packed.tobytes())

    def __repr__(self):
        return f"AppearanceCode({self.nbits} bits, {self.to_hex()[:16]}...)"


def _packed(code) -> np.ndarray:
    if isinstance(code, AppearanceCode):
        return code.packed
    return np.asarray(code, dtype=np.uint8)


def hamming_distance(a, b) -> float:
    """Normalized Hamming distance: differing bits / bit length."""
    pa, pb = _packed(a).reshape(-1), _packed(b).reshape(-1)
    if pa.size != pb.size:
        raise InvalidInputError(f"code lengths differ: {8 * pa.size} vs {8 * pb.size} bits")
    return int(np.bitwise_count(pa ^ pb).sum()) / (8 * pa.size)


def hamming_to_many(code, codes: np.ndarray) -> np.ndarray:
    """Normalized Hamming distance from one packed code to each row of ``codes``."""
    p = _packed(code).reshape(-1)
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.ndim != 2 or codes.shape[1] != p.size:
        raise InvalidInputError(
            f"code lengths differ: {8 * p.size} vs {8 * codes.shape[-1]} bits")
    counts = np.bitwise_count(codes ^ p[None, :]).sum(axis=1, dtype=np.int64)
    return counts / (8 * p.size)


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise normalized Hamming distances between packed code rows."""
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape[1] != b.shape[1]:
        raise InvalidInputError("code lengths differ")
    nbits = 8 * a.shape[1]
    # 64-bit words cut the popcount work by 8 when the length allows it
    if a.shape[1] % 8 == 0:
        a = np.ascontiguousarray(a).view(np.uint64)
        b = np.ascontiguousarray(b).view(np.uint64)
    counts = np.bitwise_count(a[:, None, :] ^ b[None, :, :]).sum(axis=2, dtype=np.int64)
    return counts / nbits


def location_distance(a, b) -> float:
    """Inverse overlap ``1 - IoU``."""
    return 1.0 - iou(a, b)


def location_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 1.0 - iou_matrix(a, b)


@dataclass(frozen=True, eq=False)
class EmbedderModel:
    """Seeded random-hyperplane sign hashing from real vectors to binary codes.

    Stands in for a learned binary embedding: nearby vectors map to nearby
    codes, and the mapping is a pure function of ``(dim, nbits, seed)``.
    """

    dim: int
    nbits: int = DEFAULT_BITS
    seed: int = 0
    offset_scale: float = 0.0
    hyperplanes: np.ndarray = field(init=False, repr=False)
    offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidInputError("embedder input dimension must be >= 1")
        if self.nbits < 8 or self.nbits % 8:
            raise InvalidInputError("embedder bit length must be a positive multiple of 8")
        rng = np.random.default_rng(self.seed)
        planes = rng.standard_normal((self.nbits, self.dim))
        offsets = self.offset_scale * rng.standard_normal(self.nbits)
        object.__setattr__(self, "hyperplanes", planes)
        object.__setattr__(self, "offsets", offsets)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "nbits": self.nbits, "seed": self.seed,
                "offset_scale": self.offset_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "EmbedderModel":
        return cls(int(d["dim"]), int(d["nbits"]), int(d["seed"]), float(d.get("offset_scale", 0.0)))


def embed(vector, embedder: EmbedderModel) -> AppearanceCode:
    v = np.asarray(vector, dtype=np.float64).reshape(-1)
    if v.size != embedder.dim:
        raise InvalidInputError(f"vector has {v.size} dims, embedder expects {embedder.dim}")
    # sign(0) -> bit 0
    bits = (embedder.hyperplanes @ v + embedder.offsets) > 0
    return AppearanceCode(np.packbits(bits))


def embed_many(vectors: np.ndarray, embedder: EmbedderModel) -> np.ndarray:
    """Embed ``(n, dim)`` vectors into packed ``(n, nbits // 8)`` codes."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != embedder.dim:
        raise InvalidInputError(f"expected (n, {embedder.dim}) vectors, got {v.shape}")
    bits = (v @ embedder.hyperplanes.T + embedder.offsets[None, :]) > 0
    return np.packbits(bits, axis=1)
