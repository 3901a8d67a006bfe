"""One full-batch training epoch on the simulated near-memory system.

The simulator executes the phase plan of :func:`model.epoch_phases`.  Reduce
phases run on the near-memory engines (or, with near-memory processing off,
on the CAE reading every edge's source over the channel); the CAE merges
partial results, runs Updates and writes results back through the channels.
All numerics are carried out on the values actually stored in the simulated
DRAM, so the functional outputs can be checked against the reference
trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import bf16
from .cae import (AGG_OP, CaeConfig, ShardConfig, WindowScheduler, count_loads, edge_weights,
                  generate_shards, merge_cycles, update_cost, vpu_cycles)
from .graph import CsrGraph
from .isa import CType, LType, RType, BType, decode, encode
from .kernel import CAE_TICKS, EU_TICKS, MEM_TICKS, BusTimeline, Kernel, mem_cycle_at_or_after
from .metrics import Counters, EnergyModel, energy_total
from .model import (ConfigError, ModelConfig, TrainerState, aggregation_matrix, elu, epoch_phases,
                    relu, TRAINABLE)
from .nme import DimmStore, Nme, NmeConfig
from .partition import AddressMap, PartitionConfig, partition
from .timing import BroadcastGroup, ChannelState, DimmController, Request, TimingParams

TOGGLES = ("nmp", "narrow_shard", "hgp", "broadcast", "window", "interleave", "overlap", "ieo")


@dataclass(frozen=True)
class Toggles:
    nmp: bool = True
    narrow_shard: bool = True
    hgp: bool = False
    broadcast: bool = False
    window: bool = True
    interleave: bool = True
    overlap: bool = True
    ieo: bool = False

    def __post_init__(self):
        if self.broadcast and not self.hgp:
            raise ConfigError("broadcast writes need hybrid partitioning (hgp)")
        if self.overlap and not self.nmp:
            raise ConfigError("inter-shard overlap needs near-memory processing (nmp)")

    @classmethod
    def all_on(cls) -> "Toggles":
        return cls(**{k: True for k in TOGGLES})

    @classmethod
    def all_off(cls) -> "Toggles":
        return cls(**{k: False for k in TOGGLES})


@dataclass(frozen=True)
class SimConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    num_channels: int = 4
    dimms_per_channel: int = 4
    ranks_per_dimm: int = 2
    lam: float = 0.35
    shard: ShardConfig = ShardConfig()
    window: int = 4
    toggles: Toggles = Toggles()
    timing: TimingParams = TimingParams()
    nme: NmeConfig = NmeConfig()
    cae: CaeConfig = CaeConfig()
    record_trace: bool = True
    fault_edge: int = -1          # fault injection: perturb one forward edge weight

    @property
    def bf16(self) -> bool:
        return self.model.element_bytes == 2

    @property
    def effective_shard(self) -> ShardConfig:
        return self.shard if self.toggles.narrow_shard else ShardConfig(1, 1, self.shard.budget)

    @property
    def effective_window(self) -> int:
        return self.window if self.toggles.window else 1

    def partition_config(self) -> PartitionConfig:
        hgp = self.toggles.hgp
        return PartitionConfig(self.num_channels, self.dimms_per_channel, self.ranks_per_dimm,
                               self.lam if hgp else 0.0, "hybrid" if hgp else "even", self.toggles.interleave)


# ---------------------------------------------------------------- tensors and phase I/O

def tensor_dims(config: ModelConfig, ieo: bool) -> dict:
    """Every DRAM-resident tensor of one epoch and its row length in elements."""
    L = config.num_layers
    out = {("h", 0): config.dims[0][0]}
    for l, (d_in, d_out) in enumerate(config.dims, start=1):
        out[("h", l)] = d_out
        out[("z", l)] = d_out
        if config.variant == "GIN":
            out[("q", l)] = d_out
        if config.ieo_layer(l, ieo):
            out[("y", l)] = d_out
            out[("g", l)] = d_out
        else:
            out[("a", l)] = d_in
            if l > 1:
                out[("x", l)] = d_in
    return dict(sorted(out.items()))


def is_reduce_source(key, num_layers: int) -> bool:
    kind, l = key
    return kind in ("y", "x", "g") or (kind == "h" and l < num_layers)


def phase_io(config: ModelConfig, phase, ieo: bool) -> dict:
    """Reduce source, rows read by the CAE and rows written back for a phase."""
    L = config.num_layers
    gin = config.variant == "GIN"

    def post_bwd_reads(m):
        return [("z", m)] + ([("q", m)] if gin else [])

    def cb_reads(m):
        return [] if config.ieo_layer(m, ieo) else [("a", m)]

    def cb_writes(m):
        if config.ieo_layer(m, ieo):
            return [(("g", m), "update")]
        return [(("x", m), "update")] if m > 1 else []

    name, l = phase.name, phase.layer
    if name.endswith(".combine"):
        return {"reduce": None, "reads": [("h", l - 1)], "writes": [(("y", l), "staging")]}
    if name == "loss":
        return {"reduce": None, "reads": [("h", L)] + post_bwd_reads(L) + cb_reads(L), "writes": cb_writes(L)}
    if phase.direction == "fwd":
        q = [(("q", l), "staging")] if gin else []
        if config.ieo_layer(l, ieo):
            return {"reduce": ("y", l), "reads": [], "writes": [(("h", l), "update"), (("z", l), "staging")] + q}
        return {"reduce": ("h", l - 1), "reads": [],
                "writes": [(("h", l), "update"), (("a", l), "staging"), (("z", l), "staging")] + q}
    if config.ieo_layer(l, ieo):
        reads = [("h", l - 1)]
        writes = []
        if l > 1:
            reads += post_bwd_reads(l - 1) + cb_reads(l - 1)
            writes = cb_writes(l - 1)
        return {"reduce": ("g", l), "reads": reads, "writes": writes}
    return {"reduce": ("x", l), "reads": post_bwd_reads(l - 1) + cb_reads(l - 1), "writes": cb_writes(l - 1)}


# ---------------------------------------------------------------- results

@dataclass
class SimResult:
    workload: str
    makespan_ticks: int
    counters: Counters
    phase_ticks: dict
    energy: dict
    outputs: dict
    instruction_words: list
    command_trace: list
    commit_logs: dict
    readouts: dict
    source_dimm_bound: np.ndarray
    placement: object = None
    verdict: str = ""
    deviations: dict = field(default_factory=dict)


def source_dimm_bound(graph: CsrGraph, placement) -> np.ndarray:
    """Per destination: number of DIMMs holding at least one of its sources."""
    src, dst = graph.reduce_edges()
    G = placement.num_dimms
    D = placement.dimms_per_channel
    held = np.zeros((graph.num_vertices, G), dtype=bool)
    nd = ~placement.duplicated[src]
    held[dst[nd], placement.home_global[src[nd]]] = True
    dsrc, ddst = src[~nd], dst[~nd]
    for d in range(D):
        held[ddst, placement.home_channel[dsrc] * D + d] = True
    return held.sum(axis=1)


def workload_id(graph: CsrGraph, config: ModelConfig) -> str:
    import hashlib
    h = hashlib.sha1()
    h.update(np.asarray(graph.row_ptr).tobytes())
    h.update(np.asarray(graph.col_idx).tobytes())
    h.update(repr((config.variant, config.dims, config.element_bytes)).encode())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- the machine

class _PhaseCtx:
    def __init__(self, phase, io, sched, num_intervals, C, d_src):
        self.phase = phase
        self.io = io
        self.sched = sched
        self.I = num_intervals
        self.C = C
        self.d_src = d_src
        self.window_waiters = []
        self.commit_events = {}
        self.buffers = {}
        self.readout_chain = {}
        self.pending = []
        self.weights = None


class Machine:
    def __init__(self, graph: CsrGraph, cfg: SimConfig, state: TrainerState, features, labels):
        self.graph = graph
        self.cfg = cfg
        self.mc = cfg.model
        self.ieo = cfg.toggles.ieo
        self.n = graph.num_vertices
        self.L = self.mc.num_layers
        self.eb = self.mc.element_bytes
        self.bf16 = cfg.bf16
        self.k = Kernel()
        self.shard = cfg.effective_shard
        self.W = cfg.effective_window
        self.dims = tensor_dims(self.mc, self.ieo)
        pc = cfg.partition_config()
        self.placement = partition(graph, pc, vector_bytes=sum(self.dims.values()) * self.eb)
        self.amap = AddressMap(self.placement, {k: d * self.eb for k, d in self.dims.items()}, cfg.ranks_per_dimm)
        C, D = cfg.num_channels, cfg.dimms_per_channel
        self.D = D
        self.G = C * D
        self.channels = [ChannelState(c) for c in range(C)]
        self.cmd_trace = [] if cfg.record_trace else None
        self.ctrl = [DimmController(self.k, cfg.timing, self.channels[g // D], g % D, g, cfg.ranks_per_dimm,
                                    self.cmd_trace) for g in range(self.G)]
        self.stores = [DimmStore(self.n) for _ in range(self.G)]
        self.nmes = [Nme(g, self.stores[g], self.amap, cfg.nme, self.bf16) for g in range(self.G)]
        self.gemm = BusTimeline()
        self.vpu = BusTimeline()
        self.counters = Counters(C, self.G)
        self.itrace = []
        self.block_words = []
        self.bmode = [False] * C
        self.fifo = [0] * self.G
        self.fifo_waiters = [[] for _ in range(self.G)]
        self.commit_logs = {}
        self.readouts = {}
        self.phase_ticks = {}
        src, dst = graph.reduce_edges()
        self.src, self.dst = src, dst
        self.plan = generate_shards(graph, self.placement, self.shard, src, dst) if cfg.toggles.nmp else None
        # functional state held by the CAE
        self.params = [{k: np.asarray(v, dtype=np.float32).copy() for k, v in p.items()} for p in state.params]
        self.grads = [{k: np.zeros_like(v) for k, v in p.items() if k in TRAINABLE} for p in self.params]
        self.labels = np.asarray(labels)
        self.loss_sum = 0.0
        self.attn = {}
        self.static_A = None if self.mc.variant == "GAT" else aggregation_matrix(graph, self.mc)
        x = np.asarray(features, dtype=np.float32)
        if x.shape != (self.n, self.mc.dims[0][0]):
            raise ConfigError(f"input features shape {x.shape} != ({self.n}, {self.mc.dims[0][0]})")
        # input features are resident before the epoch starts (untimed)
        for v in range(self.n):
            for g in self._holders(v, ("h", 0)):
                self.stores[g].write(("h", 0), v, x[v], self.bf16)

    # -- placement helpers
    def _holders(self, v, key):
        if is_reduce_source(key, self.L) and self.placement.duplicated[v]:
            return self.placement.holders(v)
        return [int(self.placement.home_global[v])]

    def _home(self, v):
        return int(self.placement.home_global[v])

    # -- DRAM access
    def _access(self, g, v, key, write, via_channel, group=None):
        """Submit per-rank requests for one vector; returns an event for completion."""
        _, bank, row, col = self.amap.locate(v, key, g)
        sub = self.amap.sub_vector_bytes(key)
        evs = []
        for r in range(self.cfg.ranks_per_dimm):
            ev = self.k.event()
            req = Request(r, bank, row, col, sub, write, via_channel, group,
                          on_done=lambda end, ev=ev: ev.succeed(end))
            if not self.ctrl[g].enqueue(req):
                self.counters.queue_stalls += 1
                yield from self.ctrl[g].submit(req)
            evs.append(ev)
        return self.k.all_of(evs)

    def _deliver(self, ch, count):
        """Instruction words travel over the channel command path, one per cycle."""
        chs = self.channels[ch]
        t = mem_cycle_at_or_after(self.k.now)
        out = []
        for _ in range(count):
            t = chs.next_cmd_slot(t)
            chs.take_cmd_slot(t)
            out.append(t + 1)
            t += 1
        return out

    def _cae_busy(self, unit: BusTimeline, cycles: int) -> int:
        """Reserve a CAE unit; returns the completion tick."""
        if cycles <= 0:
            return self.k.now
        ticks = cycles * CAE_TICKS
        start = unit.reserve(self.k.now, ticks)
        if unit is self.gemm:
            self.counters.gemm_busy_ticks += ticks
        else:
            self.counters.vpu_busy_ticks += ticks
        return start + ticks

    # -- epoch
    def run(self):
        phases = epoch_phases(self.mc, self.ieo)
        self.k.process(self._epoch(phases))
        self.k.run()
        for g, nme in enumerate(self.nmes):
            self.counters.buffer_high_water[g] = nme.buffer_high_water
            self.counters.eu_mac_ops[g] = nme.mac_ops
        return self.k.now

    def _epoch(self, phases):
        for ph in phases:
            t0 = self.k.now
            yield self.k.process(self._phase(ph))
            self.phase_ticks[ph.name] = self.k.now - t0
        # weight update on the vector unit
        nparams = sum(v.size for p in self.params for k, v in p.items() if k in TRAINABLE)
        self.counters.vpu_ops += 2 * nparams
        yield self.k.until(self._cae_busy(self.vpu, vpu_cycles(2 * nparams, self.cfg.cae)))
        lr = np.float32(self.mc.learning_rate)
        self.grads_out = [{k: v.copy() for k, v in g.items()} for g in self.grads]
        for p, g in zip(self.params, self.grads):
            for k, v in g.items():
                p[k] = (p[k] - lr * v).astype(np.float32)

    def _phase(self, ph):
        io = phase_io(self.mc, ph, self.ieo)
        # without near-memory reduction the CAE works on intervals as wide as the vector budget
        C = self.shard.C if self.cfg.toggles.nmp else self.shard.budget - 1
        I = -(-self.n // C)
        key = io["reduce"]
        d_src = self.dims[key] if key else 0
        self.counters.phase(ph.name)
        if key is None:
            ctx = _PhaseCtx(ph, io, None, I, C, 0)
            yield self.k.process(self._post_proc(ctx))
            yield self.k.all_of(ctx.pending)
            return
        self._prepare_weights(ph)
        w = self.phase_weights
        self.readouts[ph.name] = np.zeros(self.n, dtype=np.int64)
        if self.cfg.toggles.nmp:
            expected = [0] * I
            for (i, g), b in self.plan.blocks.items():
                expected[i] += len(b.dst_indices)
            sched = WindowScheduler(self.W, expected)
            ctx = _PhaseCtx(ph, io, sched, I, C, d_src)
            ctx.weights = w
            ctx.words = self._block_words(ph, key, w)
            self.block_words.append(ctx.words)
            procs = [self.k.process(self._nme_proc(g, ctx)) for g in range(self.G)]
            post = self.k.process(self._post_proc(ctx))
            self._commit(ctx)
            yield self.k.all_of(procs)
            yield self.k.all_of(list(ctx.readout_chain.values()))
            yield post
        else:
            sched = WindowScheduler(1, [0] * I)
            ctx = _PhaseCtx(ph, io, sched, I, C, d_src)
            ctx.weights = w
            post = self.k.process(self._post_proc(ctx))
            yield self.k.process(self._base_reduce_proc(ctx))
            yield post
        self.commit_logs[ph.name] = list(ctx.sched.log)
        yield self.k.all_of(ctx.pending)

    # -- edge weights (computed by the CAE)
    def _prepare_weights(self, ph):
        l = ph.layer
        if self.mc.variant == "GAT":
            if ph.direction == "fwd":
                h = self._gather(("h", l - 1), np.arange(self.n)).astype(np.float64)
                p64 = {k: v.astype(np.float64) for k, v in self.params[l - 1].items()}
                self.attn[l] = aggregation_matrix(self.graph, self.mc, h, p64)
                d_in = self.mc.dims[l - 1][0]
                ops = self.n * 2 * d_in * self.mc.gat_att_dim + 4 * self.src.size
            else:
                ops = 0
            A = self.attn[l]
        else:
            A = self.static_A
            ops = self.src.size
        _, _, w = edge_weights(self.graph, self.mc, ph.direction, A)
        self.phase_weights = w.astype(np.float32)
        if ph.direction == "fwd" and 0 <= self.cfg.fault_edge < w.size:
            self.phase_weights[self.cfg.fault_edge] += 1.0
        if ops:
            self.counters.vpu_ops += ops
            self._cae_busy(self.vpu, vpu_cycles(ops, self.cfg.cae))

    def _gather(self, key, rows):
        out = np.empty((len(rows), self.dims[key]), dtype=np.float32)
        home = self.placement.home_global
        for j, v in enumerate(rows):
            out[j] = self.stores[home[v]].read(key, v)
        return out

    # -- instruction generation
    def _block_words(self, ph, key, w):
        """Encoded words per (interval, dimm) block: list of (L words, C words) per shard + R words."""
        vec_bytes = self.dims[key] * self.eb
        wide = not self.bf16
        fwd = ph.direction == "fwd"
        op = AGG_OP[self.mc.variant] if fwd else 0
        src, dst = self.src, self.dst
        out = {}
        for (i, g), block in self.plan.blocks.items():
            shards = []
            for sh in block.shards:
                lw = [encode(LType(g, self.amap.daddr(u, key, g), vec_bytes)) for u, _ in sh.loads]
                cw = []
                for slot, di, e in sh.edges:
                    o = op
                    if o == 1 and src[e] == dst[e] and self.mc.gin_eps != 0:
                        o = 0          # GIN self term (1 + eps) needs a real weight
                    cw.append(encode(CType.with_weight(g, o, float(w[e]), di, slot, wide)))
                shards.append((lw, cw))
            rw = [encode(RType(g, di, vec_bytes)) for di in block.dst_indices]
            out[(i, g)] = (shards, rw)
        return out

    def sequential_trace(self) -> list:
        """Instruction stream of the strictly sequential workflow: every block of an
        interval (DIMMs in order) before any block of the next interval."""
        words = []
        for blocks in self.block_words:
            for (i, g) in sorted(blocks):
                shards, rw = blocks[(i, g)]
                for lw, cw in shards:
                    words += lw + cw
                words += rw
        return words

    # -- near-memory reduce
    def _nme_proc(self, g, ctx):
        nme = self.nmes[g]
        ch = g // self.D
        key = ctx.io["reduce"]
        overlap = self.cfg.toggles.overlap
        eu = self.cfg.nme.eu_cycles(ctx.d_src) * EU_TICKS
        R = self.shard.R
        for block in self.plan.dimm_blocks(g):
            i = block.interval
            while not ctx.sched.may_issue(i):
                ev = self.k.event()
                ctx.window_waiters.append((g, ev))
                yield ev
            shards_w, rw = ctx.words[(i, g)]
            for lw, cw in shards_w:
                self.itrace.extend(lw)
                self.itrace.extend(cw)
            self.itrace.extend(rw)
            self.bmode[ch] = False
            ic = self.counters.instructions
            now = self.k.now
            ldone_prev = cdone_prev = cdone_prev2 = now
            cur_run = None
            for k, (sh, (lw, cw)) in enumerate(zip(block.shards, shards_w)):
                ic["L"] += len(lw)
                ic["C"] += len(cw)
                start = now if k == 0 else (max(ldone_prev, cdone_prev2) if overlap else cdone_prev)
                if start > self.k.now:
                    yield self.k.until(start)
                arrivals = self._deliver(ch, len(lw) + len(cw))
                first_arr = arrivals[0] * MEM_TICKS
                last_arr = arrivals[-1] * MEM_TICKS
                if first_arr > self.k.now:
                    yield self.k.until(first_arr)
                if sh.run != cur_run:
                    base = R * (sh.run % 2)
                    for s in range(base, base + R):
                        nme.evict(s)
                    cur_run = sh.run
                evs = []
                for (u, slot), word in zip(sh.loads, lw):
                    v, k_ = nme.exec_l(decode(word), slot)
                    if v != u or k_ != key:
                        raise RuntimeError(f"L-type address decoded to {(v, k_)}, expected {(u, key)}")
                    self.counters.local_read_bytes[g] += self.dims[key] * self.eb
                    self.counters.dram_read_bytes[g] += self.dims[key] * self.eb
                    self.counters.phases[ctx.phase.name]["reduce_read"] += self.dims[key] * self.eb
                    ev = yield from self._access(g, u, key, write=False, via_channel=False)
                    evs.append(ev)
                if evs:
                    yield self.k.all_of(evs)
                ldone = self.k.now
                for word in cw:
                    nme.exec_c(decode(word))
                c_ticks = len(cw) * eu
                cstart = max(ldone, cdone_prev, last_arr)
                cdone = cstart + c_ticks
                self.counters.eu_busy_ticks[g] += c_ticks
                ldone_prev, cdone_prev2, cdone_prev = ldone, cdone_prev, cdone
            if cdone_prev > self.k.now:
                yield self.k.until(cdone_prev)
            for s in range(2 * R):
                nme.evict(s)
            partials = [(RType(g, di, 0).dst_index, nme.exec_r(decode(w_))) for di, w_ in zip(block.dst_indices, rw)]
            ic["R"] += len(rw)
            prev = ctx.readout_chain.get(g)
            ctx.readout_chain[g] = self.k.process(self._readout_proc(g, ctx, i, partials, prev))

    def _readout_proc(self, g, ctx, i, partials, prev):
        if prev is not None:
            yield prev
        ch = g // self.D
        chs = self.channels[ch]
        arrivals = self._deliver(ch, len(partials))
        p = self.cfg.timing
        nbytes = ctx.d_src * self.eb
        cycles = -(-nbytes // p.burst_bytes) * p.tBL
        lo = i * ctx.C
        for (di, vec), arr in zip(partials, arrivals):
            t0 = self.k.now
            while self.fifo[g] >= self.cfg.cae.fifo_depth:
                ev = self.k.event()
                self.fifo_waiters[g].append(ev)
                yield ev
            self.counters.fifo_stall_ticks += self.k.now - t0
            start = chs.reserve_data(max(mem_cycle_at_or_after(self.k.now), arr), cycles, False, p)
            end_tick = (start + cycles) * MEM_TICKS
            self.counters.off_chip_read_bytes[ch] += nbytes
            self.counters.phases[ctx.phase.name]["reduce_offchip_read"] += nbytes
            self.readouts[ctx.phase.name][lo + di] += 1
            self.fifo[g] += 1
            self.k.at(end_tick, self._arrive, g, ctx, i, di, vec)

    def _arrive(self, g, ctx, i, di, vec):
        mticks = merge_cycles(ctx.d_src, self.cfg.cae) * CAE_TICKS
        start = self.vpu.reserve(self.k.now, mticks)
        self.counters.vpu_busy_ticks += mticks
        self.counters.vpu_ops += ctx.d_src
        self.k.at(start, self._fifo_pop, g)
        self.k.at(start + mticks, self._merged, ctx, i, di, vec)

    def _fifo_pop(self, g):
        self.fifo[g] -= 1
        waiters, self.fifo_waiters[g] = self.fifo_waiters[g], []
        for ev in waiters:
            ev.succeed()

    def _merged(self, ctx, i, di, vec):
        buf = ctx.buffers.get(i)
        if buf is None:
            rows = min(ctx.C, self.n - i * ctx.C)
            buf = ctx.buffers[i] = np.zeros((rows, ctx.d_src), dtype=np.float32)
        buf[di] += vec
        ctx.sched.merge(i)
        self._commit(ctx)

    def _commit(self, ctx):
        done = ctx.sched.try_commit()
        for i in done:
            ev = ctx.commit_events.pop(i, None)
            if ev is not None:
                ev.succeed()
        if done:
            waiters, ctx.window_waiters = ctx.window_waiters, []
            for _, ev in sorted(waiters, key=lambda x: x[0]):
                ev.succeed()

    # -- reduce without near-memory processing
    def _base_reduce_proc(self, ctx):
        key = ctx.io["reduce"]
        nbytes = self.dims[key] * self.eb
        bounds = np.searchsorted(self.dst, np.arange(0, self.n + 1, dtype=np.int64))
        w = ctx.weights
        for i in range(ctx.I):
            lo, hi = i * ctx.C, min((i + 1) * ctx.C, self.n)
            s, e = bounds[lo], bounds[hi]
            src, dst = self.src[s:e], self.dst[s:e]
            per_ch = {}
            for u in src:
                per_ch.setdefault(int(self.placement.home_channel[u]), []).append(int(u))
            readers = [self.k.process(self._channel_reader(us, key)) for _, us in sorted(per_ch.items())]
            yield self.k.all_of(readers)
            for u, v in zip(src, dst):
                ch = int(self.placement.home_channel[u])
                self.counters.off_chip_read_bytes[ch] += nbytes
                self.counters.dram_read_bytes[self._home(u)] += nbytes
                self.readouts[ctx.phase.name][v] += 1
            ph = self.counters.phases[ctx.phase.name]
            ph["reduce_read"] += nbytes * src.size
            ph["reduce_offchip_read"] += nbytes * src.size
            x = self._gather(key, src)
            A = sp.csr_matrix((w[s:e], (dst - lo, np.arange(src.size))), shape=(hi - lo, src.size), dtype=np.float32)
            ctx.buffers[i] = np.asarray(A @ x, dtype=np.float32)
            ops = src.size * self.dims[key]
            self.counters.vpu_ops += ops
            end = self._cae_busy(self.vpu, src.size * merge_cycles(self.dims[key], self.cfg.cae))
            yield self.k.until(end)
            ctx.sched.log.append(i)
            ev = ctx.commit_events.pop(i, None)
            ctx.sched.committed = i + 1
            if ev is not None:
                ev.succeed()

    def _channel_reader(self, vertices, key):
        evs = []
        for u in vertices:
            ev = yield from self._access(self._home(u), u, key, write=False, via_channel=True)
            evs.append(ev)
        yield self.k.all_of(evs)

    # -- CAE post-processing (Update / Others) per interval
    def _post_proc(self, ctx):
        for i in range(ctx.I):
            if ctx.sched is not None and ctx.sched.committed <= i:
                ev = self.k.event()
                ctx.commit_events[i] = ev
                yield ev
            yield from self._post_interval(ctx, i)

    def _post_interval(self, ctx, i):
        lo, hi = i * ctx.C, min((i + 1) * ctx.C, self.n)
        rows = np.arange(lo, hi)
        # reads of retained rows through the channel
        evs = []
        for key in ctx.io["reads"]:
            nbytes = self.dims[key] * self.eb
            for v in rows:
                g = self._home(v)
                ev = yield from self._access(g, int(v), key, write=False, via_channel=True)
                evs.append(ev)
                self.counters.off_chip_read_bytes[g // self.D] += nbytes
                self.counters.dram_read_bytes[g] += nbytes
                self.counters.phases[ctx.phase.name]["update_read"] += nbytes
        if evs:
            yield self.k.all_of(evs)
        reads = {key: self._gather(key, rows) for key in ctx.io["reads"]}
        reduced = ctx.buffers.pop(i, None)
        if ctx.io["reduce"] is not None and reduced is None:
            reduced = np.zeros((hi - lo, ctx.d_src), dtype=np.float32)
        outputs, gemm_c, vpu_c = self._compute(ctx.phase, rows, reduced, reads)
        end = max(self._cae_busy(self.gemm, gemm_c), self._cae_busy(self.vpu, vpu_c))
        if end > self.k.now:
            yield self.k.until(end)
        for key, kind in ctx.io["writes"]:
            yield from self._write_rows(ctx, key, kind, rows, outputs[key])

    def _write_rows(self, ctx, key, kind, rows, values):
        nbytes = self.dims[key] * self.eb
        ph = self.counters.phases[ctx.phase.name]
        field_ = "update_write" if kind == "update" else "staging_write"
        for v, val in zip(rows, values):
            v = int(v)
            holders = self._holders(v, key)
            for g in holders:
                self.stores[g].write(key, v, val, self.bf16)
            ch = int(self.placement.home_channel[v])
            dup = len(holders) > 1
            if dup and self.cfg.toggles.broadcast:
                if not self.bmode[ch]:
                    self.itrace.append(encode(BType(ch)))
                    self.counters.instructions["B"] += 1
                    self.bmode[ch] = True
                    for g in holders:
                        self.nmes[g].exec_b(True)
                group = BroadcastGroup()
                for g in holders:
                    ev = yield from self._access(g, v, key, write=True, via_channel=True, group=group)
                    ctx.pending.append(ev)
                    self.counters.local_write_bytes[g] += nbytes
                off = nbytes
            else:
                for g in holders:
                    ev = yield from self._access(g, v, key, write=True, via_channel=True)
                    ctx.pending.append(ev)
                    self.counters.local_write_bytes[g] += nbytes
                off = nbytes * len(holders)
            self.counters.off_chip_write_bytes[ch] += off
            ph[field_] += off
            if dup:
                self.counters.dup_write_bytes += off

    # -- numerics of the dense work
    def _post_backward(self, m, rows, gh, reads):
        """dL/dh^m -> dL/dz^m for rows; accumulates GIN second-layer grads."""
        p, gr = self.params[m - 1], self.grads[m - 1]
        z = reads[("z", m)]
        if self.mc.variant == "GIN":
            q = reads[("q", m)]
            gq = gh * (q > 0)
            gr["W2"] += relu(z).T @ gq
            gr["b2"] += gq.sum(axis=0)
            gz = (gq @ p["W2"].T) * (z > 0)
            gr["b"] += gz.sum(axis=0)
            return gz.astype(np.float32)
        if self.mc.variant == "GAT":
            return (gh * np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))).astype(np.float32)
        return (gh * (z > 0)).astype(np.float32)

    def _cb(self, m, gz, reads, out):
        """Weight gradient of layer m and the next backward Reduce source."""
        p, gr = self.params[m - 1], self.grads[m - 1]
        if self.mc.ieo_layer(m, self.ieo):
            out[("g", m)] = gz
            return
        gr["W"] += reads[("a", m)].T @ gz
        if m > 1:
            out[("x", m)] = (gz @ p["W"].T).astype(np.float32)

    def _compute(self, ph, rows, reduced, reads):
        """Functional outputs plus GEMM and VPU cycle charges for one interval."""
        mc, cae = self.mc, self.cfg.cae
        M = rows.size
        out = {}
        gemm = vpu = 0
        l = ph.layer
        gin = mc.variant == "GIN"

        def vm(K, N):
            nonlocal gemm
            gemm += update_cost("vec-mat", M, K, N, cae)
            self.counters.gemm_flops += 2 * M * K * N

        def vec(kind, K, N):
            nonlocal vpu
            vpu += update_cost(kind, M, K, N, cae)
            self.counters.vpu_ops += M * K * N if kind == "outer-product" else M * N

        if ph.name.endswith(".combine"):
            p = self.params[l - 1]
            out[("y", l)] = (reads[("h", l - 1)] @ p["W"]).astype(np.float32)
            vm(*p["W"].shape)
            return out, gemm, vpu
        if ph.name == "loss":
            L = self.L
            h = reads[("h", L)].astype(np.float64)
            shifted = h - h.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            prob = e / e.sum(axis=1, keepdims=True)
            lab = self.labels[rows]
            self.loss_sum += float(-(shifted[np.arange(M), lab] - np.log(e.sum(axis=1))).sum())
            prob[np.arange(M), lab] -= 1.0
            gh = (prob / self.n).astype(np.float32)
            vec("activation", 1, 4 * h.shape[1])
            gz = self._post_backward(L, rows, gh, reads)
            vec("activation", 1, gz.shape[1])
            self._cb_costed(L, gz, reads, out, vm, vec)
            return out, gemm, vpu
        if ph.direction == "fwd":
            p = self.params[l - 1]
            if mc.ieo_layer(l, self.ieo):
                z = reduced
            else:
                out[("a", l)] = reduced
                z = (reduced @ p["W"]).astype(np.float32)
                vm(*p["W"].shape)
            if gin:
                z = (z + p["b"]).astype(np.float32)
                q = (relu(z) @ p["W2"] + p["b2"]).astype(np.float32)
                vm(*p["W2"].shape)
                out[("q", l)] = q
                h = relu(q)
                vec("activation", 1, 2 * q.shape[1])
            elif mc.variant == "GAT":
                h = elu(z)
                vec("activation", 1, z.shape[1])
            else:
                h = relu(z)
                vec("activation", 1, z.shape[1])
            out[("z", l)] = z
            out[("h", l)] = h.astype(np.float32)
            return out, gemm, vpu
        # backward Reduce of layer l
        p, gr = self.params[l - 1], self.grads[l - 1]
        if mc.ieo_layer(l, self.ieo):
            r = reduced
            gr["W"] += reads[("h", l - 1)].T @ r
            vec("outer-product", *p["W"].shape)
            if l > 1:
                gh = (r @ p["W"].T).astype(np.float32)
                vm(p["W"].shape[1], p["W"].shape[0])
                gz = self._post_backward(l - 1, rows, gh, reads)
                vec("activation", 1, gz.shape[1])
                self._cb_costed(l - 1, gz, reads, out, vm, vec)
            return out, gemm, vpu
        gz = self._post_backward(l - 1, rows, reduced, reads)
        vec("activation", 1, gz.shape[1])
        self._cb_costed(l - 1, gz, reads, out, vm, vec)
        return out, gemm, vpu

    def _cb_costed(self, m, gz, reads, out, vm, vec):
        p = self.params[m - 1]
        if not self.mc.ieo_layer(m, self.ieo):
            vec("outer-product", *p["W"].shape)
            if self.mc.variant == "GIN":
                vec("outer-product", *p["W2"].shape)
            if m > 1:
                vm(p["W"].shape[1], p["W"].shape[0])
        elif self.mc.variant == "GIN":
            vec("outer-product", *p["W2"].shape)
        self._cb(m, gz, reads, out)

    # -- outputs
    def outputs(self) -> dict:
        hs = [self._gather(("h", l), np.arange(self.n)) for l in range(self.L + 1)]
        return {"h": hs, "loss": self.loss_sum / max(self.n, 1), "grads": self.grads_out, "params": self.params}


def simulate_epoch(graph: CsrGraph, cfg: SimConfig, state: TrainerState, features, labels,
                   energy_model: EnergyModel = EnergyModel()) -> SimResult:
    if cfg.toggles.ieo and cfg.model.variant == "GAT":
        raise ConfigError("interchanged execution order needs a linear aggregator; GAT is not linear")
    m = Machine(graph, cfg, state, features, labels)
    makespan = m.run()
    counters = m.counters
    energy = energy_total(counters, makespan / 42e9, energy_model)
    res = SimResult(workload=workload_id(graph, cfg.model), makespan_ticks=makespan, counters=counters,
                    phase_ticks=m.phase_ticks, energy=energy, outputs=m.outputs(), instruction_words=m.itrace,
                    command_trace=m.cmd_trace or [], commit_logs=m.commit_logs, readouts=m.readouts,
                    source_dimm_bound=source_dimm_bound(graph, m.placement), placement=m.placement)
    res.machine = m
    return res


# ---------------------------------------------------------------- traffic-only estimates

def traffic_counts(graph: CsrGraph, cfg: SimConfig) -> dict:
    """Per-phase byte counters computed without timing (for graphs too large to simulate)."""
    mc = cfg.model
    ieo = cfg.toggles.ieo
    eb = mc.element_bytes
    dims = tensor_dims(mc, ieo)
    L = mc.num_layers
    shard = cfg.effective_shard
    pl = partition(graph, cfg.partition_config())
    n = graph.num_vertices
    src, dst = graph.reduce_edges()
    counts = count_loads(src, dst, pl, shard.R, shard.C, n) if cfg.toggles.nmp else None
    ndup_src = int(pl.duplicated.sum())
    out = {}
    for ph in epoch_phases(mc, ieo):
        io = phase_io(mc, ph, ieo)
        r = {"reduce_read": 0, "reduce_offchip_read": 0, "update_read": 0, "update_write": 0, "staging_write": 0}
        key = io["reduce"]
        if key is not None:
            vb = dims[key] * eb
            if cfg.toggles.nmp:
                r["reduce_read"] = counts["loads"] * vb
                r["reduce_offchip_read"] = counts["readouts"] * vb
            else:
                r["reduce_read"] = r["reduce_offchip_read"] = src.size * vb
        for k in io["reads"]:
            r["update_read"] += n * dims[k] * eb
        for k, kind in io["writes"]:
            vb = dims[k] * eb
            copies = n
            if is_reduce_source(k, L) and not cfg.toggles.broadcast:
                copies += ndup_src * (cfg.dimms_per_channel - 1)
            r["update_write" if kind == "update" else "staging_write"] += copies * vb
        out[ph.name] = r
    return out


# ---------------------------------------------------------------- functional validation

FP32_TOL = 1e-4
BF16_TOL = 2e-2


def relative_error(sim, ref) -> float:
    """max |sim - ref| / max |ref| (norm-wise, so tiny entries do not dominate)."""
    sim = np.asarray(sim, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    scale = np.abs(ref).max(initial=0.0)
    diff = np.abs(sim - ref).max(initial=0.0)
    if scale == 0.0:
        return diff
    return diff / scale


def reference_epoch(graph: CsrGraph, config: ModelConfig, state: TrainerState, features, labels) -> dict:
    from .model import backward_reference, forward_reference, sgd_step, softmax_cross_entropy
    st = state.copy()
    st.zero_grads()
    fs = forward_reference(graph, config, st, features)
    loss, grad = softmax_cross_entropy(fs.h[-1], labels)
    backward_reference(graph, config, st, fs, grad)
    grads = [{k: v.copy() for k, v in g.items()} for g in st.grads]
    sgd_step(st, config.learning_rate)
    return {"h": fs.h, "loss": loss, "grads": grads, "params": st.params}


def compare_outputs(sim: dict, ref: dict) -> dict:
    dev = {"loss": relative_error(sim["loss"], ref["loss"])}
    for l in range(1, len(ref["h"])):
        dev[f"h{l}"] = relative_error(sim["h"][l], ref["h"][l])
    for l, (gs, gr) in enumerate(zip(sim["grads"], ref["grads"]), start=1):
        for k in gr:
            dev[f"grad{l}.{k}"] = relative_error(gs[k], gr[k])
    for l, (ps, pr) in enumerate(zip(sim["params"], ref["params"]), start=1):
        for k in pr:
            dev[f"param{l}.{k}"] = relative_error(ps[k], pr[k])
    return dev


def validate(graph: CsrGraph, cfg: SimConfig, state: TrainerState, features, labels,
             tolerance: float | None = None) -> SimResult:
    """Simulate one epoch and check it against the reference trainer."""
    res = simulate_epoch(graph, cfg, state, features, labels)
    ref = reference_epoch(graph, cfg.model, state, features, labels)
    tol = tolerance if tolerance is not None else (BF16_TOL if cfg.bf16 else FP32_TOL)
    res.reference = ref
    res.tolerance = tol
    res.deviations = compare_outputs(res.outputs, ref)
    res.verdict = "PASS" if max(res.deviations.values()) <= tol else "FAIL"
    return res


def first_divergence(sim: dict, ref: dict, tolerance: float):
    """(tensor name, index of the largest error, simulated value, reference value) or None."""
    pairs = [(f"h{l}", sim["h"][l], ref["h"][l]) for l in range(1, len(ref["h"]))]
    pairs.append(("loss", np.asarray(sim["loss"]), np.asarray(ref["loss"])))
    for part in ("grads", "params"):
        for l, (a, b) in enumerate(zip(sim[part], ref[part]), start=1):
            pairs += [(f"{part[:-1]}{l}.{k}", a[k], b[k]) for k in b]
    for name, a, b in pairs:
        if relative_error(a, b) > tolerance:
            diff = np.abs(np.asarray(a, dtype=np.float64) - b)
            idx = np.unravel_index(int(np.argmax(diff)), diff.shape) if diff.ndim else ()
            return name, tuple(int(i) for i in idx), float(np.asarray(a)[idx]), float(np.asarray(b)[idx])
    return None
