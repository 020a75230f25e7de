"""Bit-exact packing of ternary tensors.

Three layouts, all column-major (every unit of column 0, then column 1, ...)
with each column byte-aligned on its own:

``sherry125``
    3:4 blocks only. Each block becomes a sign bit (polarity of its first
    non-zero entry) and a 4-bit index ``zero_pos * 4 + rel2 * 2 + rel3``,
    where ``rel_k`` is 1 when the k-th non-zero entry disagrees with the
    first. Index nibbles go to one plane (even block in the low nibble),
    sign bits to another (LSB first). 5 bits per 4 weights.
``dense2bit``
    2 bits per weight, ``-1 -> 0b11, 0 -> 0b00, +1 -> 0b01``, four weights
    per byte LSB first.
``tl2ref``
    Three weights per base-3 unit ``sum((t_k + 1) * 3**k)`` in 0..26, stored
    in 5 bits LSB first. Columns whose length is not a multiple of three are
    padded with zero weights, which unpacking drops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import ConstraintError, FormatError
from .quant import BLOCK, Granularity, TernaryTensor, is_sparse34

PackScheme = Literal["sherry125", "dense2bit", "tl2ref"]
SCHEMES: tuple[PackScheme, ...] = ("sherry125", "dense2bit", "tl2ref")

TL2_GROUP = 3
TL2_UNIT_BITS = 5
TL2_MAX_UNIT = 26
SCALE_BITS = 32


def encode_block(codes) -> tuple[int, int]:
    """Encode one 3:4 block as ``(sign_bit, index)``."""
    b = [int(c) for c in codes]
    if len(b) != BLOCK or any(c not in (-1, 0, 1) for c in b) or b.count(0) != 1:
        raise ConstraintError(f"not a valid 3:4 block: {b}")
    zero_pos = b.index(0)
    p1, p2, p3 = (i for i in range(BLOCK) if i != zero_pos)
    sign_bit = 0 if b[p1] == 1 else 1
    rel2 = int(b[p2] != b[p1])
    rel3 = int(b[p3] != b[p1])
    return sign_bit, zero_pos * 4 + rel2 * 2 + rel3


def decode_block(sign_bit: int, index: int) -> list[int]:
    if sign_bit not in (0, 1):
        raise FormatError(f"sign bit must be 0 or 1, got {sign_bit}")
    if not 0 <= index <= 15:
        raise FormatError(f"block index {index} out of range 0..15")
    zero_pos, rel2, rel3 = index >> 2, (index >> 1) & 1, index & 1
    lead = 1 - 2 * sign_bit
    out = [0] * BLOCK
    p1, p2, p3 = (i for i in range(BLOCK) if i != zero_pos)
    out[p1] = lead
    out[p2] = -lead if rel2 else lead
    out[p3] = -lead if rel3 else lead
    return out


def block_positions(index: int) -> tuple[int, int, int, int, int, int]:
    """``(zero_pos, p1, p2, p3, rel2, rel3)`` for a block index."""
    zero_pos = index >> 2
    p1, p2, p3 = (i for i in range(BLOCK) if i != zero_pos)
    return zero_pos, p1, p2, p3, (index >> 1) & 1, index & 1


# Positive-lead block for each index, shape (16, 4).
DECODE_TABLE = np.array([decode_block(0, i) for i in range(16)], dtype=np.int8)


def _block_key(blocks: np.ndarray) -> np.ndarray:
    # base-3 key of a 4-block, 0..80
    return ((blocks.astype(np.int16) + 1) * np.array([1, 3, 9, 27], dtype=np.int16)).sum(axis=-1)


def _build_encode_lut() -> tuple[np.ndarray, np.ndarray]:
    sign = np.full(81, -1, dtype=np.int8)
    index = np.full(81, -1, dtype=np.int8)
    for s in (0, 1):
        for i in range(16):
            blk = np.array(decode_block(s, i))
            key = int(_block_key(blk))
            sign[key], index[key] = s, i
    return sign, index


_ENC_SIGN, _ENC_INDEX = _build_encode_lut()


@dataclass
class PackedTensor:
    rows: int
    cols: int
    scheme: PackScheme
    scales: np.ndarray
    granularity: Granularity
    index_plane: bytes = b""
    sign_plane: bytes = b""
    payload: bytes = b""
    meta: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise FormatError(f"unknown pack scheme {self.scheme!r}")
        self.scales = np.asarray(self.scales, dtype=np.float32)
        self.granularity.check(self.rows, self.cols)
        if self.scales.shape != self.granularity.grid_shape(self.rows, self.cols):
            raise FormatError(f"scale grid {self.scales.shape} does not match granularity {self.granularity}")
        expect = plane_sizes(self.scheme, self.rows, self.cols)
        got = {"index_plane": len(self.index_plane), "sign_plane": len(self.sign_plane), "payload": len(self.payload)}
        if got != expect:
            raise FormatError(f"plane sizes {got} do not match layout {expect}")

    @property
    def payload_bytes(self) -> int:
        return len(self.index_plane) + len(self.sign_plane) + len(self.payload)

    def equals(self, other: "PackedTensor") -> bool:
        return (
            (self.rows, self.cols, self.scheme, self.granularity)
            == (other.rows, other.cols, other.scheme, other.granularity)
            and np.array_equal(self.scales, other.scales)
            and self.index_plane == other.index_plane
            and self.sign_plane == other.sign_plane
            and self.payload == other.payload
        )


def plane_sizes(scheme: PackScheme, rows: int, cols: int) -> dict[str, int]:
    """Exact byte length of every plane for a ``(rows, cols)`` tensor."""
    sizes = {"index_plane": 0, "sign_plane": 0, "payload": 0}
    if scheme == "sherry125":
        if rows % BLOCK:
            raise ConstraintError(f"sherry125 needs d_in divisible by {BLOCK}, got {rows}")
        nb = rows // BLOCK
        sizes["index_plane"] = cols * math.ceil(nb / 2)
        sizes["sign_plane"] = cols * math.ceil(nb / 8)
    elif scheme == "dense2bit":
        sizes["payload"] = cols * math.ceil(rows / 4)
    elif scheme == "tl2ref":
        sizes["payload"] = cols * tl2_column_bytes(rows)
    else:
        raise FormatError(f"unknown pack scheme {scheme!r}")
    return sizes


def tl2_units(rows: int) -> int:
    return math.ceil(rows / TL2_GROUP)


def tl2_column_bytes(rows: int) -> int:
    return math.ceil(tl2_units(rows) * TL2_UNIT_BITS / 8)


def pack(t: TernaryTensor, scheme: PackScheme = "sherry125") -> PackedTensor:
    rows, cols = t.shape
    colmajor = np.ascontiguousarray(t.codes.T)  # (cols, rows)
    if scheme == "sherry125":
        if not is_sparse34(t.codes):
            raise ConstraintError("sherry125 packing needs a valid 3:4 tensor")
        index, sign = _encode_blocks(colmajor.reshape(cols, rows // BLOCK, BLOCK))
        return PackedTensor(
            rows, cols, scheme, t.scales.copy(), t.granularity,
            index_plane=_pack_nibbles(index).tobytes(),
            sign_plane=np.packbits(sign.astype(np.uint8), axis=1, bitorder="little").tobytes(),
        )
    if scheme == "dense2bit":
        pad = (-rows) % 4
        two = np.pad(colmajor, ((0, 0), (0, pad))).astype(np.uint8) & 0b11
        two = two.reshape(cols, -1, 4)
        byte = two[..., 0] | (two[..., 1] << 2) | (two[..., 2] << 4) | (two[..., 3] << 6)
        return PackedTensor(rows, cols, scheme, t.scales.copy(), t.granularity, payload=byte.astype(np.uint8).tobytes())
    if scheme == "tl2ref":
        units = tl2_encode_units(colmajor)
        return PackedTensor(rows, cols, scheme, t.scales.copy(), t.granularity, payload=_pack_units(units).tobytes())
    raise ConstraintError(f"unknown pack scheme {scheme!r}")


def _encode_blocks(blocks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    keys = _block_key(blocks)
    index = _ENC_INDEX[keys]
    if np.any(index < 0):
        raise ConstraintError("block with a number of non-zeros other than 3")
    return index.astype(np.uint8), _ENC_SIGN[keys].astype(np.uint8)


def _pack_nibbles(index: np.ndarray) -> np.ndarray:
    cols, nb = index.shape
    if nb % 2:
        index = np.pad(index, ((0, 0), (0, 1)))
    return (index[:, 0::2] | (index[:, 1::2] << 4)).astype(np.uint8)


def tl2_encode_units(colmajor: np.ndarray) -> np.ndarray:
    """Base-3 units of a ``(cols, rows)`` code array, zero-padded to whole triples."""
    cols, rows = colmajor.shape
    pad = (-rows) % TL2_GROUP
    trip = np.pad(colmajor, ((0, 0), (0, pad))).astype(np.int16).reshape(cols, -1, TL2_GROUP)
    return ((trip + 1) * np.array([1, 3, 9], dtype=np.int16)).sum(axis=-1).astype(np.uint8)


def _pack_units(units: np.ndarray) -> np.ndarray:
    cols, n = units.shape
    shifts = np.arange(TL2_UNIT_BITS, dtype=np.uint8)
    bits = ((units[..., None] >> shifts) & 1).reshape(cols, n * TL2_UNIT_BITS)
    return np.packbits(bits, axis=1, bitorder="little")


def tl2_unpack_units(payload: bytes, rows: int, cols: int) -> np.ndarray:
    """Read the 5-bit units back as a ``(cols, units)`` uint8 array."""
    n = tl2_units(rows)
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(cols, tl2_column_bytes(rows))
    bits = np.unpackbits(raw, axis=1, bitorder="little")[:, : n * TL2_UNIT_BITS]
    weights = (1 << np.arange(TL2_UNIT_BITS)).astype(np.uint8)
    units = (bits.reshape(cols, n, TL2_UNIT_BITS) * weights).sum(axis=-1).astype(np.uint8)
    if np.any(units > TL2_MAX_UNIT):
        raise FormatError("tl2ref code unit above 26")
    return units


def sherry_planes(p: PackedTensor) -> tuple[np.ndarray, np.ndarray]:
    """Block indices and sign bits as ``(cols, blocks)`` uint8 arrays."""
    nb = p.rows // BLOCK
    idx = np.frombuffer(p.index_plane, dtype=np.uint8).reshape(p.cols, -1)
    index = np.stack([idx & 0x0F, idx >> 4], axis=2).reshape(p.cols, -1)[:, :nb]
    raw = np.frombuffer(p.sign_plane, dtype=np.uint8).reshape(p.cols, -1)
    sign = np.unpackbits(raw, axis=1, bitorder="little")[:, :nb]
    return index, sign


def unpack(p: PackedTensor) -> TernaryTensor:
    rows, cols = p.rows, p.cols
    if p.scheme == "sherry125":
        index, sign = sherry_planes(p)
        blocks = DECODE_TABLE[index] * (1 - 2 * sign.astype(np.int8))[..., None]
        codes = blocks.reshape(cols, rows).T
        qscheme = "sparse34"
    elif p.scheme == "dense2bit":
        raw = np.frombuffer(p.payload, dtype=np.uint8).reshape(cols, -1)
        two = np.stack([(raw >> s) & 0b11 for s in (0, 2, 4, 6)], axis=2).reshape(cols, -1)[:, :rows]
        if np.any(two == 0b10):
            raise FormatError("dense2bit payload holds the unused code 0b10")
        codes = np.where(two == 0b11, -1, two).astype(np.int8).T
        qscheme = None
    else:
        units = tl2_unpack_units(p.payload, rows, cols).astype(np.int16)
        digits = np.stack([(units // 3**k) % 3 for k in range(TL2_GROUP)], axis=2) - 1
        codes = digits.reshape(cols, -1)[:, :rows].astype(np.int8).T
        qscheme = None
    return TernaryTensor(np.ascontiguousarray(codes), p.scales.copy(), p.granularity, qscheme)


@dataclass(frozen=True)
class DensityReport:
    scheme: PackScheme
    weight_count: int
    payload_bits: int
    payload_bytes: int
    scale_bits: int

    @property
    def bits_per_weight(self) -> float:
        return (self.payload_bits + self.scale_bits) / self.weight_count

    @property
    def payload_bits_per_weight(self) -> float:
        return self.payload_bits / self.weight_count


def logical_payload_bits(scheme: PackScheme, rows: int, cols: int) -> int:
    """Information bits before per-column byte alignment."""
    if scheme == "sherry125":
        return cols * (rows // BLOCK) * (1 + 4)
    if scheme == "dense2bit":
        return cols * rows * 2
    return cols * tl2_units(rows) * TL2_UNIT_BITS


def density(p: PackedTensor) -> DensityReport:
    """Bit accounting for a packed tensor.

    ``payload_bits`` counts encoded bits (5 per block, 2 per weight, 5 per
    triple including pad triples); ``payload_bytes`` is the byte-aligned
    storage actually occupied.
    """
    return DensityReport(
        scheme=p.scheme,
        weight_count=p.rows * p.cols,
        payload_bits=logical_payload_bits(p.scheme, p.rows, p.cols),
        payload_bytes=p.payload_bytes,
        scale_bits=SCALE_BITS * p.scales.size,
    )
