"""Centralized acceleration engine: shard generation, window scheduling, merges, cost models."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .graph import CsrGraph
from .model import ConfigError, ModelConfig, build_op_stream, aggregation_matrix


class SchedulerError(RuntimeError):
    pass


@dataclass(frozen=True)
class CaeConfig:
    gemm_dim: int = 128
    clock_mhz: int = 700
    vpu_cores: int = 32
    vpu_simd: int = 16
    scratchpad_bytes: int = 16 * 2**20
    num_channels: int = 4
    fifo_depth: int = 8
    gemm_power_mw: float = 6291.4
    vpu_power_mw: float = 296.6
    scratchpad_power_mw: float = 5519.2

    @property
    def gemm_peak_flops(self) -> float:
        return 2 * self.gemm_dim * self.gemm_dim * self.clock_mhz * 1e6

    @property
    def vpu_lanes(self) -> int:
        return self.vpu_cores * self.vpu_simd


@dataclass(frozen=True)
class ShardConfig:
    R: int = 1
    C: int = 127
    budget: int = 128

    def __post_init__(self):
        if self.R < 1 or self.C < 1:
            raise ConfigError("shard dimensions R and C must be >= 1")
        if self.R + self.C > self.budget:
            raise ConfigError(f"R + C = {self.R + self.C} exceeds the NME vector budget {self.budget}")
        if self.C > 257:
            raise ConfigError("C exceeds the C-type destination index range")


# ---------------------------------------------------------------- cost models

def update_cost(kind: str, M: int, K: int, N: int, cae: CaeConfig = CaeConfig()) -> int:
    """CAE cycles for an Update over ``M`` vertices with a K x N weight matrix.

    ``vec-mat`` runs on the systolic array with weights resident on chip;
    ``outer-product`` (accumulating a K x N gradient from M vertex pairs) and
    ``activation`` (M x N elementwise) run on the vector unit.
    """
    if min(M, K, N) < 1:
        raise ConfigError("update dimensions must be >= 1")
    if K * N * 4 > cae.scratchpad_bytes:
        raise ConfigError(f"{K}x{N} weights exceed the {cae.scratchpad_bytes}-byte scratchpad")
    g = cae.gemm_dim
    if kind == "vec-mat":
        return math.ceil(M / g) * math.ceil(N / g) * (K + g)
    if kind == "outer-product":
        return math.ceil(M * K * N / cae.vpu_lanes)
    if kind == "activation":
        return math.ceil(M * N / cae.vpu_lanes)
    raise ConfigError(f"unknown update kind {kind!r}")


def vpu_cycles(ops: int, cae: CaeConfig = CaeConfig()) -> int:
    return math.ceil(ops / cae.vpu_lanes) if ops > 0 else 0


def merge_cycles(d: int, cae: CaeConfig = CaeConfig()) -> int:
    return vpu_cycles(d, cae)


def merge_partials(slot, entry):
    """Elementwise add of a DIMM's partial result into the window-buffer slot."""
    entry = np.asarray(entry, dtype=np.float32)
    if slot is None:
        return entry.copy()
    return np.add(slot, entry, dtype=np.float32)


# ---------------------------------------------------------------- edge weights

AGG_OP = {"GCN": 0, "GIN": 1, "SAGEConv": 2, "GAT": 0}


def edge_weights(graph: CsrGraph, config: ModelConfig, direction: str, A=None):
    """Per-edge weights in ``graph.reduce_edges()`` order.

    Backward Reduce uses the transposed aggregation: the weight for source u
    into destination v is A[u, v].
    """
    src, dst = graph.reduce_edges()
    if A is None:
        if config.variant == "GAT":
            raise ConfigError("GAT edge weights need the attention matrix")
        A = aggregation_matrix(graph, config)
    A = A.tocsr()
    if direction == "fwd":
        w = np.asarray(A[dst, src]).ravel()
    else:
        w = np.asarray(A[src, dst]).ravel()
    return src, dst, w


# ---------------------------------------------------------------- shards

@dataclass
class Shard:
    loads: list            # (vertex, slot) pairs to load
    edges: list            # (slot, dst_index, edge index) triples
    run: int


@dataclass
class Block:
    interval: int
    dimm: int
    shards: list
    dst_indices: list      # destinations with a partial result on this DIMM


@dataclass
class ShardPlan:
    num_intervals: int
    R: int
    C: int
    blocks: dict = field(default_factory=dict)       # (interval, dimm) -> Block
    num_loads: int = 0
    num_edges: int = 0
    num_readouts: int = 0

    def dimm_blocks(self, dimm: int) -> list:
        return [self.blocks[k] for k in sorted(self.blocks) if k[1] == dimm]


def _row_index(placement, num_vertices: int) -> np.ndarray:
    """Position of every vertex among the vertices each DIMM holds (sorted by id)."""
    G = placement.num_dimms
    D = placement.dimms_per_channel
    idx = np.full((G, num_vertices), -1, dtype=np.int64)
    home = placement.home_global
    for g in range(G):
        held = (home == g) | (placement.duplicated & (placement.home_channel == g // D))
        verts = np.flatnonzero(held)
        idx[g, verts] = np.arange(verts.size)
    return idx


def shard_arrays(src, dst, placement, R: int, C: int, num_vertices: int):
    """Sorted per-edge shard bookkeeping (vectorised).

    Returns a dict of arrays in processing order: interval, dimm, block,
    src, dst, the original edge index, run id and a first-load flag.  Edges
    are processed interval by interval; within a DIMM, shards run in block
    order.  With R > 1, consecutive shards of a DIMM that share a source
    block form a run whose sources stay resident.
    """
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    n = num_vertices
    I = -(-n // C) if n else 0
    iv = dst // C
    g = placement.processing_dimm(src, iv, I)
    G = placement.num_dimms
    if R == 1:
        blk = src
    else:
        blk = _row_index(placement, n)[g, src] // R
    key = ((iv * G + g) * (n + 1) + blk) * (n + 1) + src
    order = np.argsort(key, kind="stable")
    iv, g, blk, s, d = iv[order], g[order], blk[order], src[order], dst[order]
    m = order.size
    new_shard = np.ones(m, dtype=bool)
    if m:
        new_shard[1:] = (iv[1:] != iv[:-1]) | (g[1:] != g[:-1]) | (blk[1:] != blk[:-1])
    shard_id = np.cumsum(new_shard) - 1
    # runs: per DIMM, consecutive shards (in processing order) sharing a block
    sh_first = np.flatnonzero(new_shard)
    sh_g, sh_blk, sh_iv = g[sh_first], blk[sh_first], iv[sh_first]
    sorder = np.lexsort((sh_blk, sh_iv, sh_g))         # DIMM-major processing order
    new_run = np.ones(sh_first.size, dtype=bool)
    if sh_first.size > 1:
        gg, bb = sh_g[sorder], sh_blk[sorder]
        same = (gg[1:] == gg[:-1]) & (bb[1:] == bb[:-1])
        new_run[1:] = ~same if R > 1 else True
    run_sorted = np.cumsum(new_run) - 1
    shard_run = np.empty(sh_first.size, dtype=np.int64)
    shard_run[sorder] = run_sorted
    run = shard_run[shard_id] if m else shard_id
    # first occurrence of (run, src) in DIMM processing order
    proc = np.lexsort((d, s, shard_run[shard_id] if m else shard_id))
    first = np.zeros(m, dtype=bool)
    if m:
        rs = run[proc]
        ss = s[proc]
        f = np.ones(m, dtype=bool)
        f[1:] = (rs[1:] != rs[:-1]) | (ss[1:] != ss[:-1])
        first[proc] = f
    return dict(interval=iv, dimm=g, block=blk, src=s, dst=d, edge=order, shard=shard_id, run=run,
                first_load=first, num_intervals=I)


def count_loads(src, dst, placement, R: int, C: int, num_vertices: int) -> dict:
    """Instruction counts of a Reduce phase without building the instruction stream."""
    a = shard_arrays(src, dst, placement, R, C, num_vertices)
    m = a["src"].size
    if m:
        key = (a["interval"] * placement.num_dimms + a["dimm"]) * (num_vertices + 1) + a["dst"]
        readouts = np.unique(key).size
    else:
        readouts = 0
    return {"loads": int(a["first_load"].sum()), "edges": int(m), "readouts": int(readouts),
            "shards": int(a["shard"][-1] + 1) if m else 0}


def generate_shards(graph: CsrGraph, placement, shard_config: ShardConfig, src=None, dst=None) -> ShardPlan:
    """Per-(interval, DIMM) shard streams; empty shards produce nothing."""
    if src is None:
        src, dst = graph.reduce_edges()
    R, C = shard_config.R, shard_config.C
    n = graph.num_vertices
    a = shard_arrays(src, dst, placement, R, C, n)
    plan = ShardPlan(a["num_intervals"], R, C)
    row = _row_index(placement, n) if R > 1 else None
    iv, g, s, d, e, sh, run, first = (a["interval"], a["dimm"], a["src"], a["dst"], a["edge"], a["shard"],
                                      a["run"], a["first_load"])
    cur_shard = -1
    block = None
    shard = None
    for k in range(s.size):
        ik, gk = int(iv[k]), int(g[k])
        if block is None or block.interval != ik or block.dimm != gk:
            block = Block(ik, gk, [], [])
            plan.blocks[(ik, gk)] = block
        if sh[k] != cur_shard:
            cur_shard = sh[k]
            shard = Shard([], [], int(run[k]))
            block.shards.append(shard)
        u = int(s[k])
        base = R * (int(run[k]) % 2)
        slot = base + (int(row[gk, u]) % R if R > 1 else 0)
        if first[k]:
            shard.loads.append((u, slot))
        shard.edges.append((slot, int(d[k]) - ik * C, int(e[k])))
    for block in plan.blocks.values():
        block.dst_indices = sorted({di for sh_ in block.shards for _, di, _ in sh_.edges})
        plan.num_loads += sum(len(x.loads) for x in block.shards)
        plan.num_edges += sum(len(x.edges) for x in block.shards)
        plan.num_readouts += len(block.dst_indices)
    return plan


# ---------------------------------------------------------------- window scheduling

class WindowScheduler:
    """Up to ``window`` intervals in flight; commits strictly in interval order."""

    def __init__(self, window: int, expected):
        if window < 1:
            raise ConfigError("window must be >= 1")
        self.window = window
        self.expected = list(expected)
        self.merged = [0] * len(self.expected)
        self.committed = 0
        self.log = []

    @property
    def num_intervals(self) -> int:
        return len(self.expected)

    def may_issue(self, interval: int) -> bool:
        return interval < self.committed + self.window

    def merge(self, interval: int) -> None:
        if interval < self.committed:
            raise SchedulerError(f"partial result for already committed interval {interval}")
        if interval >= self.committed + self.window:
            raise SchedulerError(f"partial result for interval {interval} outside the window")
        self.merged[interval] += 1
        if self.merged[interval] > self.expected[interval]:
            raise SchedulerError(f"too many partial results for interval {interval}")

    def try_commit(self) -> list:
        done = []
        while self.committed < len(self.expected) and self.merged[self.committed] == self.expected[self.committed]:
            self.log.append(self.committed)
            done.append(self.committed)
            self.committed += 1
        return done


# ---------------------------------------------------------------- interchange order

def apply_ieo(graph, config: ModelConfig, placement, shard_config) -> list:
    """Operation stream with combination before aggregation where it pays off."""
    if not config.linear_aggregator:
        raise ConfigError(f"{config.variant} aggregation is not linear; order cannot be interchanged")
    return build_op_stream(graph, config, placement, shard_config, ieo=True)


def ieo_traffic(reduce_edges: int, num_vertices: int, d1: int, d2: int, element_bytes: int = 4) -> dict:
    """Closed-form first-layer DRAM traffic (bytes) for both execution orders."""
    original = (reduce_edges * d1 + num_vertices * d2) * element_bytes
    interchanged = (reduce_edges * d2 + num_vertices * d1) * element_bytes
    return {"original": original, "interchanged": interchanged, "ratio": original / interchanged}
