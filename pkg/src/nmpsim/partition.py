"""Vertex placement across channels/DIMMs and the DRAM address map."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .graph import CsrGraph

DIMM_CAPACITY_BYTES = 32 * 2**30
ROW_BYTES = 8192
NUM_BANKS = 16
NUM_BANK_GROUPS = 4
ROWS_PER_BANK = 2**17
BURST_BYTES = 64


class CapacityError(RuntimeError):
    pass


class MappingError(LookupError):
    pass


@dataclass
class PartitionConfig:
    num_channels: int = 4
    dimms_per_channel: int = 4
    ranks_per_dimm: int = 2
    lam: float = 0.0
    mode: str = "even"
    interleave: bool = True
    dimm_capacity: int = DIMM_CAPACITY_BYTES

    def __post_init__(self):
        if self.mode not in ("even", "hybrid"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if not 0.0 <= self.lam <= 0.5:
            raise ValueError("lambda must lie in [0, 0.5]")
        if self.mode == "even" and self.lam != 0.0:
            raise ValueError("even partitioning requires lambda = 0")
        if min(self.num_channels, self.dimms_per_channel, self.ranks_per_dimm) < 1:
            raise ValueError("channel/DIMM/rank counts must be >= 1")
        if self.num_channels * self.dimms_per_channel > 16:
            raise ValueError("at most 16 DIMMs are addressable by the instruction DIMM field")

    @property
    def num_dimms(self) -> int:
        return self.num_channels * self.dimms_per_channel


@dataclass(eq=False)
class Placement:
    """Home of every vertex plus the per-channel duplicated (high-degree) sets.

    DIMMs are numbered globally: ``channel * dimms_per_channel + dimm``.
    """
    num_channels: int
    dimms_per_channel: int
    home_channel: np.ndarray
    home_dimm: np.ndarray
    duplicated: np.ndarray                # bool per vertex
    interleave: bool = True
    high_degree_set: list = field(default_factory=list)   # per channel, sorted vertex ids

    @property
    def num_dimms(self) -> int:
        return self.num_channels * self.dimms_per_channel

    @property
    def home_global(self) -> np.ndarray:
        return self.home_channel * self.dimms_per_channel + self.home_dimm

    def interval_owner(self, num_intervals: int) -> np.ndarray:
        """DIMM (within a channel) that handles duplicated sources for each interval."""
        if self.interleave:
            return interleave_intervals(num_intervals, self.dimms_per_channel)
        D = self.dimms_per_channel
        i = np.arange(num_intervals, dtype=np.int64)
        return np.minimum(i * D // max(num_intervals, 1), D - 1)

    def processing_dimm(self, src: np.ndarray, dst_interval: np.ndarray, num_intervals: int) -> np.ndarray:
        """Global DIMM that processes edge work for each (source, destination interval)."""
        owner = self.interval_owner(num_intervals)
        local = np.where(self.duplicated[src], owner[dst_interval], self.home_dimm[src])
        return self.home_channel[src] * self.dimms_per_channel + local

    def holders(self, v: int) -> list:
        """Global DIMMs that store vertex ``v``."""
        c = int(self.home_channel[v])
        if self.duplicated[v]:
            return [c * self.dimms_per_channel + d for d in range(self.dimms_per_channel)]
        return [int(self.home_global[v])]

    def same_as(self, other: "Placement") -> bool:
        return (self.num_channels == other.num_channels
                and self.dimms_per_channel == other.dimms_per_channel
                and np.array_equal(self.home_channel, other.home_channel)
                and np.array_equal(self.home_dimm, other.home_dimm)
                and np.array_equal(self.duplicated, other.duplicated))


def even_partition(graph: CsrGraph, config: PartitionConfig) -> Placement:
    n = graph.num_vertices
    v = np.arange(n, dtype=np.int64)
    C, D = config.num_channels, config.dimms_per_channel
    return Placement(C, D, v % C, (v // C) % D, np.zeros(n, dtype=bool), config.interleave,
                     [np.zeros(0, dtype=np.int64) for _ in range(C)])


def _ceil_fraction(lam: float, count: int) -> int:
    return math.ceil(Fraction(str(lam)) * count)


def hybrid_partition(graph: CsrGraph, config: PartitionConfig, vector_bytes: int = 0,
                     num_tensors: int = 1) -> Placement:
    """Even placement of low-degree vertices, channel-wide duplication of the top-λ.

    ``vector_bytes * num_tensors`` is the per-vertex storage used for the
    capacity check of the duplicated region.
    """
    if config.mode != "hybrid":
        raise ValueError("hybrid_partition needs mode='hybrid'")
    n = graph.num_vertices
    C, D = config.num_channels, config.dimms_per_channel
    deg = graph.degree
    v = np.arange(n, dtype=np.int64)
    home_channel = v % C
    home_dimm = np.zeros(n, dtype=np.int64)
    dup = np.zeros(n, dtype=bool)
    high = []
    for c in range(C):
        members = v[home_channel == c]
        k = _ceil_fraction(config.lam, members.size)
        # degree descending, ties to the lower vertex index
        order = np.lexsort((members, -deg[members]))
        top = np.sort(members[order[:k]])
        dup[top] = True
        high.append(top)
        low = members[~dup[members]]
        home_dimm[low] = np.arange(low.size) % D
        # duplicated vertices keep their even-partition home for write-back ownership
        home_dimm[top] = (top // C) % D
        if vector_bytes:
            per_dimm_low = math.ceil(low.size / D)
            need = (per_dimm_low + top.size) * vector_bytes * num_tensors
            if need > config.dimm_capacity:
                raise CapacityError(f"channel {c}: {need} bytes per DIMM exceed capacity "
                                    f"{config.dimm_capacity}")
    return Placement(C, D, home_channel, home_dimm, dup, config.interleave, high)


def partition(graph: CsrGraph, config: PartitionConfig, vector_bytes: int = 0, num_tensors: int = 1) -> Placement:
    if config.mode == "even":
        return even_partition(graph, config)
    return hybrid_partition(graph, config, vector_bytes, num_tensors)


def interleave_intervals(num_intervals: int, dimms_per_channel) -> np.ndarray:
    """Round-robin owner DIMM per interval so neighbouring intervals differ."""
    D = dimms_per_channel.dimms_per_channel if isinstance(dimms_per_channel, Placement) else dimms_per_channel
    if D < 1:
        raise ValueError("dimms_per_channel must be >= 1")
    return np.arange(num_intervals, dtype=np.int64) % D


# ---------------------------------------------------------------- placement files

_PLACEMENT_HEADER = struct.Struct("<4sIQII")
_PLACEMENT_RECORD = np.dtype([("vertex", "<u4"), ("channel", "u1"), ("dimm", "u1"), ("dup", "u1")])


def save_placement(placement: Placement, path) -> None:
    n = len(placement.home_channel)
    rec = np.zeros(n, dtype=_PLACEMENT_RECORD)
    rec["vertex"] = np.arange(n)
    rec["channel"] = placement.home_channel
    rec["dimm"] = placement.home_dimm
    rec["dup"] = placement.duplicated
    with open(path, "wb") as f:
        f.write(_PLACEMENT_HEADER.pack(b"GNPL", 1, n, placement.num_channels, placement.dimms_per_channel))
        f.write(rec.tobytes())


def load_placement(path, interleave: bool = True) -> Placement:
    with open(path, "rb") as f:
        data = f.read()
    magic, version, n, C, D = _PLACEMENT_HEADER.unpack_from(data)
    if magic != b"GNPL" or version != 1:
        raise ValueError("not a placement file")
    rec = np.frombuffer(data, dtype=_PLACEMENT_RECORD, count=n, offset=_PLACEMENT_HEADER.size)
    if not np.array_equal(rec["vertex"], np.arange(n)):
        raise ValueError("placement records must list every vertex in order")
    ch = rec["channel"].astype(np.int64)
    dup = rec["dup"].astype(bool)
    high = [np.flatnonzero(dup & (ch == c)) for c in range(C)]
    return Placement(C, D, ch, rec["dimm"].astype(np.int64), dup, interleave, high)


# ---------------------------------------------------------------- address map

@dataclass(frozen=True)
class Coord:
    channel: int
    dimm: int
    rank: int
    bank: int
    row: int
    column: int


class AddressMap:
    """Per-DIMM layout of vertex vectors.

    A vector of ``vector_bytes`` is split evenly over the DIMM's ranks; each
    per-rank sub-vector sits inside a single row.  Vertex ``v`` lives in bank
    ``v mod 16``; vertices sharing a bank are packed consecutively into rows.
    Every (tensor, layer) region has a home area (vertices homed on the DIMM)
    and a duplicate area laid out identically on all DIMMs of a channel.
    Bank group of bank ``b`` is ``b mod 4``.
    """

    def __init__(self, placement: Placement, regions: dict, ranks_per_dimm: int,
                 num_banks: int = NUM_BANKS, row_bytes: int = ROW_BYTES,
                 rows_per_bank: int = ROWS_PER_BANK):
        self.placement = placement
        self.ranks = ranks_per_dimm
        self.num_banks = num_banks
        self.row_bytes = row_bytes
        self.rows_per_bank = rows_per_bank
        self.regions = {}
        n = len(placement.home_channel)
        D = placement.dimms_per_channel
        bank = np.arange(n, dtype=np.int64) % num_banks
        # slot index of each vertex inside (dimm-or-channel area, bank)
        home_g = placement.home_global
        self._slot = np.zeros(n, dtype=np.int64)
        counts_home = np.zeros((placement.num_dimms, num_banks), dtype=np.int64)
        counts_dup = np.zeros((placement.num_channels, num_banks), dtype=np.int64)
        for v in range(n):
            b = bank[v]
            if placement.duplicated[v]:
                c = placement.home_channel[v]
                self._slot[v] = counts_dup[c, b]
                counts_dup[c, b] += 1
            else:
                g = home_g[v]
                self._slot[v] = counts_home[g, b]
                counts_home[g, b] += 1
        self._max_home = int(counts_home.max(initial=0))
        self._max_dup = int(counts_dup.max(initial=0))
        next_row = 0
        for key, vector_bytes in regions.items():
            sub = -(-vector_bytes // ranks_per_dimm)
            slot = -(-sub // BURST_BYTES) * BURST_BYTES
            if slot > row_bytes:
                raise MappingError(f"sub-vector of {sub} bytes does not fit a {row_bytes}-byte row")
            per_row = row_bytes // slot
            home_rows = -(-self._max_home // per_row)
            dup_rows = -(-self._max_dup // per_row)
            self.regions[key] = dict(vector_bytes=vector_bytes, sub=sub, slot=slot, per_row=per_row,
                                     home_base=next_row, dup_base=next_row + home_rows)
            next_row += home_rows + dup_rows
        if next_row > rows_per_bank:
            raise CapacityError(f"address map needs {next_row} rows per bank, only {rows_per_bank} available")
        self._rows_used = next_row
        self._by_base = sorted((r["home_base"], r["dup_base"], k) for k, r in self.regions.items())
        self._bank = bank
        self._lookup = {}
        for v in range(n):
            if placement.duplicated[v]:
                c = int(placement.home_channel[v])
                for d in range(D):
                    self._lookup[(c * D + d, 1, int(bank[v]), int(self._slot[v]))] = v
            else:
                self._lookup[(int(home_g[v]), 0, int(bank[v]), int(self._slot[v]))] = v

    def bytes_per_dimm(self) -> int:
        return self._rows_used * self.num_banks * self.row_bytes * self.ranks

    def region(self, key):
        try:
            return self.regions[key]
        except KeyError:
            raise MappingError(f"no region mapped for {key!r}") from None

    def sub_vector_bytes(self, key) -> int:
        return self.region(key)["sub"]

    def locate(self, vertex: int, key, dimm: int | None = None):
        """(global dimm, bank, row, column of sub-vector start) for ``vertex``."""
        r = self.region(key)
        p = self.placement
        if p.duplicated[vertex]:
            c = int(p.home_channel[vertex])
            if dimm is None:
                dimm = int(p.home_global[vertex])
            elif dimm // p.dimms_per_channel != c:
                raise MappingError(f"vertex {vertex} is not replicated on DIMM {dimm}")
            base = r["dup_base"]
        else:
            home = int(p.home_global[vertex])
            if dimm is not None and dimm != home:
                raise MappingError(f"vertex {vertex} is not stored on DIMM {dimm}")
            dimm = home
            base = r["home_base"]
        k = int(self._slot[vertex])
        row = base + k // r["per_row"]
        col = (k % r["per_row"]) * r["slot"]
        return dimm, int(self._bank[vertex]), row, col

    def daddr(self, vertex: int, key, dimm: int | None = None) -> int:
        """DIMM-local linear byte address of the vertex's sub-vectors."""
        _, bank, row, col = self.locate(vertex, key, dimm)
        return (row * self.num_banks + bank) * self.row_bytes + col

    def split_daddr(self, daddr: int):
        rb, col = divmod(daddr, self.row_bytes)
        row, bank = divmod(rb, self.num_banks)
        return bank, row, col

    def vertex_at(self, dimm: int, daddr: int):
        """Inverse of :meth:`daddr`: (vertex, region key)."""
        bank, row, col = self.split_daddr(daddr)
        for home_base, dup_base, key in self._by_base:
            r = self.regions[key]
            end = dup_base + -(-self._max_dup // r["per_row"])
            if home_base <= row < dup_base:
                area, base = 0, home_base
            elif dup_base <= row < end:
                area, base = 1, dup_base
            else:
                continue
            if col % r["slot"]:
                break
            k = (row - base) * r["per_row"] + col // r["slot"]
            v = self._lookup.get((dimm, area, bank, k))
            if v is None:
                break
            return v, key
        raise MappingError(f"DIMM {dimm} address {daddr:#x} is not mapped")

    def map_address(self, vertex: int, key, byte_offset: int, dimm: int | None = None) -> Coord:
        """Physical coordinates of byte ``byte_offset`` of the vertex's vector."""
        r = self.region(key)
        if not 0 <= byte_offset < r["vector_bytes"]:
            raise MappingError(f"byte offset {byte_offset} outside vector of {r['vector_bytes']} bytes")
        g, bank, row, col = self.locate(vertex, key, dimm)
        rank, off = divmod(byte_offset, r["sub"])
        D = self.placement.dimms_per_channel
        return Coord(g // D, g % D, rank, bank, row, col + off)


def map_address(vertex, type_, layer, byte_offset, address_map: AddressMap, dimm=None) -> Coord:
    return address_map.map_address(vertex, (type_, layer), byte_offset, dimm)
