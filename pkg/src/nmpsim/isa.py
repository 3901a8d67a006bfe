"""Near-memory instruction set: 64-bit encoding, trace files, latency contracts.

Word layout (bit 63 is the MSB)::

    63..62  opcode   (0=L, 1=C, 2=R, 3=B)
    61..58  dimm     (global DIMM id; channel id for B)
    57..0   payload

    L: daddr[57:17] vector_size[16:4]                      reserved[3:0]
    C: op[57:56] wide[55] dst_index[54:46] src_slot[45:38] edge_w[37:6] reserved[5:0]
    R: dst_index[57:49] vector_size[48:36]                 reserved[35:0]
    B: enable[57]                                          reserved[56:0]

``edge_w`` holds a BF16 pattern in its low 16 bits, or a full FP32 pattern
when ``wide`` is set.  Non-zero reserved bits and the undefined aggregator
op code 3 are rejected on decode.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import bf16

OP_L, OP_C, OP_R, OP_B = 0, 1, 2, 3
AGG_WEIGHTED_SUM, AGG_SUM, AGG_MEAN = 0, 1, 2

DADDR_BITS = 41
VSIZE_BITS = 13
DST_BITS = 9
SLOT_BITS = 8
MAX_DADDR = 2**40
MAX_VECTOR = 2**12
MAX_DST = 2**8


class EncodingError(ValueError):
    pass


class DecodingError(ValueError):
    pass


@dataclass(frozen=True)
class LType:
    dimm: int
    daddr: int
    vector_size: int


@dataclass(frozen=True)
class CType:
    dimm: int
    op: int
    edge_w_bits: int
    dst_index: int
    src_slot: int = 0
    wide: bool = False

    @property
    def edge_w(self) -> float:
        if self.wide:
            return float(np.uint32(self.edge_w_bits).view(np.float32))
        return bf16.scalar_value(self.edge_w_bits)

    @classmethod
    def with_weight(cls, dimm, op, weight, dst_index, src_slot=0, wide=False):
        if wide:
            bits = int(np.float32(weight).view(np.uint32))
        else:
            bits = bf16.scalar_bits(weight)
        return cls(dimm, op, bits, dst_index, src_slot, wide)


@dataclass(frozen=True)
class RType:
    dimm: int
    dst_index: int
    vector_size: int


@dataclass(frozen=True)
class BType:
    channel: int
    enable: bool = True


Instruction = Union[LType, CType, RType, BType]


def _check(name, value, limit, inclusive=False):
    ok = 0 <= value <= limit if inclusive else 0 <= value < limit
    if not ok:
        raise EncodingError(f"{name}={value} out of range")


def encode(instr: Instruction) -> int:
    if isinstance(instr, BType):
        _check("channel", instr.channel, 16)
        return (OP_B << 62) | (instr.channel << 58) | (int(bool(instr.enable)) << 57)
    if not isinstance(instr, (LType, CType, RType)):
        raise EncodingError(f"not an instruction: {instr!r}")
    _check("dimm", instr.dimm, 16)
    head = instr.dimm << 58
    if isinstance(instr, LType):
        _check("daddr", instr.daddr, MAX_DADDR, inclusive=True)
        _check("vector_size", instr.vector_size, MAX_VECTOR, inclusive=True)
        if instr.vector_size % 2:
            raise EncodingError("vector_size must be a multiple of 2 bytes")
        return (OP_L << 62) | head | (instr.daddr << 17) | (instr.vector_size << 4)
    if isinstance(instr, CType):
        if instr.op not in (AGG_WEIGHTED_SUM, AGG_SUM, AGG_MEAN):
            raise EncodingError(f"unknown aggregator op {instr.op}")
        _check("dst_index", instr.dst_index, MAX_DST, inclusive=True)
        _check("src_slot", instr.src_slot, 2**SLOT_BITS)
        _check("edge_w", instr.edge_w_bits, 2**32 if instr.wide else 2**16)
        return ((OP_C << 62) | head | (instr.op << 56) | (int(instr.wide) << 55)
                | (instr.dst_index << 46) | (instr.src_slot << 38) | (instr.edge_w_bits << 6))
    _check("dst_index", instr.dst_index, MAX_DST, inclusive=True)
    _check("vector_size", instr.vector_size, MAX_VECTOR, inclusive=True)
    if instr.vector_size % 2:
        raise EncodingError("vector_size must be a multiple of 2 bytes")
    return (OP_R << 62) | head | (instr.dst_index << 49) | (instr.vector_size << 36)


def _field(word, lo, width):
    return (word >> lo) & ((1 << width) - 1)


def decode(word: int) -> Instruction:
    if not 0 <= word < 2**64:
        raise DecodingError("word must be an unsigned 64-bit value")
    opcode = word >> 62
    dimm = _field(word, 58, 4)
    if opcode == OP_L:
        if _field(word, 0, 4):
            raise DecodingError("reserved bits set in L-type")
        daddr = _field(word, 17, DADDR_BITS)
        vsize = _field(word, 4, VSIZE_BITS)
        if daddr > MAX_DADDR or vsize > MAX_VECTOR or vsize % 2:
            raise DecodingError("L-type field out of range")
        return LType(dimm, daddr, vsize)
    if opcode == OP_C:
        if _field(word, 0, 6):
            raise DecodingError("reserved bits set in C-type")
        op = _field(word, 56, 2)
        if op == 3:
            raise DecodingError("reserved aggregator op code 3")
        wide = bool(_field(word, 55, 1))
        dst = _field(word, 46, DST_BITS)
        w = _field(word, 6, 32)
        if dst > MAX_DST or (not wide and w >> 16):
            raise DecodingError("C-type field out of range")
        return CType(dimm, op, w, dst, _field(word, 38, SLOT_BITS), wide)
    if opcode == OP_R:
        if _field(word, 0, 36):
            raise DecodingError("reserved bits set in R-type")
        dst = _field(word, 49, DST_BITS)
        vsize = _field(word, 36, VSIZE_BITS)
        if dst > MAX_DST or vsize > MAX_VECTOR or vsize % 2:
            raise DecodingError("R-type field out of range")
        return RType(dimm, dst, vsize)
    if _field(word, 0, 57):
        raise DecodingError("reserved bits set in B-type")
    return BType(dimm, bool(_field(word, 57, 1)))


# ---------------------------------------------------------------- trace files

_TRACE_HEADER = struct.Struct("<4sQ")


def save_trace(words, path) -> None:
    arr = np.asarray(words, dtype="<u8")
    with open(path, "wb") as f:
        f.write(_TRACE_HEADER.pack(b"GNIT", arr.size))
        f.write(arr.tobytes())


def trace_bytes(words) -> bytes:
    arr = np.asarray(words, dtype="<u8")
    return _TRACE_HEADER.pack(b"GNIT", arr.size) + arr.tobytes()


def load_trace(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    magic, count = _TRACE_HEADER.unpack_from(data)
    if magic != b"GNIT":
        raise DecodingError(f"bad trace magic {magic!r}")
    return np.frombuffer(data, dtype="<u8", count=count, offset=_TRACE_HEADER.size).astype(np.uint64)


# ---------------------------------------------------------------- latency contracts

def l_type_latency(vector_size: int, row_hit: bool, timing, burst_bytes: int = 64) -> int:
    """Memory cycles to load a (sub-)vector held in one row."""
    if vector_size <= 0:
        raise ValueError("vector_size must be positive")
    bursts = math.ceil(vector_size / burst_bytes)
    t = timing.tCL + bursts * timing.tBL
    if not row_hit:
        t += timing.tRC + timing.tRCD
    return t


def fixed_latencies(d_elements: int, vector_bytes: int, timing, num_pes: int = 16, macs_per_pe: int = 8,
                    eu_mhz: int = 500, mem_mhz: int = 1200, burst_bytes: int = 64) -> dict:
    """tNME_CD and tNME_RD in memory cycles (plus the raw EU cycle count)."""
    eu_cycles = math.ceil(d_elements / (macs_per_pe * num_pes))
    cd = math.ceil(eu_cycles * mem_mhz / eu_mhz)
    rd = math.ceil(vector_bytes / burst_bytes) * timing.tBL
    return {"eu_cycles": eu_cycles, "tNME_CD": cd, "tNME_RD": rd}
