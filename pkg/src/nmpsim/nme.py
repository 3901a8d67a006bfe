"""Near-memory engine: functional execution of L/C/R/B instructions plus its cost model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import bf16
from .isa import CType, LType, RType
from .partition import AddressMap, MappingError


class NmeProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class NmeConfig:
    num_pes: int = 16
    macs_per_pe: int = 8
    eu_mhz: int = 500
    buffer_bytes: int = 256 * 1024
    word_bytes: int = 16
    vector_budget: int = 128
    eu_power_mw: float = 178.1
    buffer_power_mw: float = 80.0

    @property
    def peak_flops(self) -> float:
        return self.num_pes * self.macs_per_pe * 2 * self.eu_mhz * 1e6

    def eu_cycles(self, d_elements: int) -> int:
        """EU cycles for one edge: all MACs multiply the broadcast edge weight."""
        return math.ceil(d_elements / (self.macs_per_pe * self.num_pes))


def overlap_schedule(loads, computes, overlap: bool = True):
    """Per-shard (load_start, load_done, compute_start, compute_done) and the makespan.

    With ``overlap`` the load of shard k+1 starts once load k is done and the
    EU has finished shard k-1, so only two adjacent shards are in flight.
    """
    loads = list(loads)
    computes = list(computes)
    if len(loads) != len(computes):
        raise ValueError("loads and computes must have equal length")
    out = []
    ldone_prev = 0
    cdone_prev = 0       # C_{k-1}
    cdone_prev2 = 0      # C_{k-2}
    for k, (l, c) in enumerate(zip(loads, computes)):
        if k == 0:
            start = 0
        elif overlap:
            start = max(ldone_prev, cdone_prev2)
        else:
            start = cdone_prev
        ldone = start + l
        cstart = max(ldone, cdone_prev)
        cdone = cstart + c
        out.append((start, ldone, cstart, cdone))
        ldone_prev = ldone
        cdone_prev2, cdone_prev = cdone_prev, cdone
    makespan = max((max(o[1], o[3]) for o in out), default=0)
    return makespan, out


class DimmStore:
    """Functional DRAM contents of one DIMM: one (vertices x d) array per tensor."""

    def __init__(self, num_vertices: int):
        self.n = num_vertices
        self.tensors = {}

    def write(self, key, rows, values, bf16_mode: bool) -> None:
        values = np.asarray(values, dtype=np.float32)
        if bf16_mode:
            values = bf16.round_bf16(values)
        t = self.tensors.get(key)
        if t is None:
            t = np.full((self.n, values.shape[-1]), np.nan, dtype=np.float32)
            self.tensors[key] = t
        t[rows] = values

    def read(self, key, rows) -> np.ndarray:
        t = self.tensors.get(key)
        if t is None:
            raise MappingError(f"tensor {key!r} was never written to this DIMM")
        out = t[rows]
        if np.isnan(out).any():
            raise MappingError(f"tensor {key!r}: reading rows never written to this DIMM")
        return out


class Nme:
    """Buffer-chip engine of one DIMM.

    Holds loaded source vectors by slot and FP32 partial sums by destination
    index.  Functional semantics only; timing lives in the simulator, which
    uses the counters kept here.
    """

    def __init__(self, dimm: int, store: DimmStore, amap: AddressMap, config: NmeConfig = NmeConfig(),
                 bf16_mode: bool = False):
        self.dimm = dimm
        self.store = store
        self.amap = amap
        self.config = config
        self.bf16_mode = bf16_mode
        self.sources = {}         # slot -> (vertex, vector)
        self.partials = {}        # dst_index -> fp32 vector
        self.broadcast = False
        self.local_read_bytes = 0
        self.mac_ops = 0
        self.eu_cycles = 0
        self.buffer_high_water = 0
        self.instructions = 0

    def _resident_bytes(self) -> int:
        return sum(v.nbytes for _, v in self.sources.values()) + sum(v.nbytes for v in self.partials.values())

    def _track(self) -> None:
        used = self._resident_bytes()
        if used > self.config.buffer_bytes:
            raise NmeProtocolError(f"NME {self.dimm}: buffer overflow ({used} bytes)")
        self.buffer_high_water = max(self.buffer_high_water, used)

    def exec_l(self, instr: LType, slot: int = 0):
        if instr.dimm != self.dimm:
            raise NmeProtocolError(f"L-type for DIMM {instr.dimm} delivered to NME {self.dimm}")
        self.broadcast = False
        vertex, key = self.amap.vertex_at(self.dimm, instr.daddr)
        vec = self.store.read(key, vertex)
        if vec.size * (2 if self.bf16_mode else 4) != instr.vector_size:
            raise NmeProtocolError(f"L-type size {instr.vector_size} does not match tensor {key!r}")
        self.sources[slot] = (vertex, vec)
        self.local_read_bytes += instr.vector_size
        self.instructions += 1
        self._track()
        return vertex, key

    def evict(self, slot: int) -> None:
        self.sources.pop(slot, None)

    def exec_c(self, instr: CType):
        self.broadcast = False
        src = self.sources.get(instr.src_slot)
        if src is None:
            raise NmeProtocolError(f"NME {self.dimm}: C-type uses empty source slot {instr.src_slot}")
        x = src[1]
        y = self.partials.get(instr.dst_index)
        if y is None:
            y = np.zeros(x.shape, dtype=np.float32)
            self.partials[instr.dst_index] = y
        y += np.float32(instr.edge_w) * x
        self.mac_ops += x.size
        self.eu_cycles += self.config.eu_cycles(x.size)
        self.instructions += 1
        self._track()
        return src[0]

    def exec_r(self, instr: RType) -> np.ndarray:
        self.broadcast = False
        y = self.partials.pop(instr.dst_index, None)
        if y is None:
            raise NmeProtocolError(f"NME {self.dimm}: R-type for empty partial slot {instr.dst_index}")
        self.instructions += 1
        if self.bf16_mode:
            return bf16.round_bf16(y)
        return y

    def exec_b(self, enable: bool = True) -> None:
        self.broadcast = bool(enable)
