"""DDR4 command-level timing: bank/rank state, FR-FCFS controllers, channel buses.

All times in this module are memory-clock cycles (1200 MHz).  A controller
is attached to one DIMM; the ranks of a DIMM share its command bus (one
command per cycle) but each rank has its own data path to the near-memory
engine.  Requests marked ``via_channel`` additionally need a command slot and
the data bus of the channel the DIMM sits on.

A column command moves ``bursts`` consecutive 64-byte bursts of one
sub-vector; its data occupies the data bus for ``bursts * tBL`` cycles.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .kernel import MEM_TICKS, Kernel, mem_cycle_at_or_after

NEG = -(10**12)


@dataclass(frozen=True)
class TimingParams:
    tRC: int = 56
    tRCD: int = 17
    tCL: int = 17
    tRP: int = 17
    tBL: int = 4
    tCCD_S: int = 4
    tCCD_L: int = 6
    tRRD_S: int = 4
    tRRD_L: int = 6
    tFAW: int = 26
    turnaround: int = 2
    clock_mhz: int = 1200
    queue_depth: int = 32
    num_banks: int = 16
    bank_groups: int = 4
    burst_bytes: int = 64

    def __post_init__(self):
        vals = (self.tRC, self.tRCD, self.tCL, self.tRP, self.tBL, self.tCCD_S, self.tCCD_L,
                self.tRRD_S, self.tRRD_L, self.tFAW)
        if min(vals) <= 0:
            raise ValueError("timing parameters must be positive")
        if self.tCCD_L < self.tCCD_S or self.tRRD_L < self.tRRD_S:
            raise ValueError("long (same bank group) spacings must not be shorter than short ones")

    @property
    def rank_bandwidth(self) -> float:
        """Bytes per second of one 64-bit rank interface (DDR: 2 transfers per clock)."""
        return self.clock_mhz * 1e6 * 2 * 8


class ProtocolError(RuntimeError):
    pass


class BankState:
    __slots__ = ("open_row", "last_act", "last_pre", "col_end")

    def __init__(self):
        self.open_row = None
        self.last_act = NEG
        self.last_pre = NEG
        self.col_end = NEG      # end of the data transfer of the last column command


class RankState:
    __slots__ = ("banks", "acts", "last_act_bg", "last_col_bg", "last_col", "bus_free", "bus_write")

    def __init__(self, params: TimingParams):
        self.banks = [BankState() for _ in range(params.num_banks)]
        self.acts = deque(maxlen=4)
        self.last_act_bg = [NEG] * params.bank_groups
        self.last_col_bg = [NEG] * params.bank_groups
        self.last_col = NEG
        self.bus_free = NEG
        self.bus_write = None


class ChannelState:
    """Shared command slots and data bus of one memory channel."""

    def __init__(self, index: int):
        self.index = index
        self.cmd_slots = set()
        self.data_free = NEG
        self.data_write = None
        self.data_busy = 0

    def next_cmd_slot(self, t: int) -> int:
        while t in self.cmd_slots:
            t += 1
        return t

    def take_cmd_slot(self, t: int) -> None:
        if t in self.cmd_slots:
            raise ProtocolError(f"channel {self.index} command slot {t} already used")
        self.cmd_slots.add(t)

    def reserve_data(self, earliest: int, cycles: int, write: bool, params: TimingParams) -> int:
        """Reserve the channel data bus for a transfer that is not a DRAM access."""
        start = max(earliest, self._data_ready(write, params))
        self._occupy(start, cycles, write)
        return start

    def _data_ready(self, write: bool, params: TimingParams) -> int:
        gap = params.turnaround if self.data_write is not None and self.data_write != write else 0
        return self.data_free + gap

    def _occupy(self, start: int, cycles: int, write: bool) -> None:
        self.data_free = start + cycles
        self.data_write = write
        self.data_busy += cycles


# ---------------------------------------------------------------- constraint arithmetic

def bank_group(bank: int, params: TimingParams) -> int:
    return bank % params.bank_groups


def earliest_act(rank: RankState, bank: int, params: TimingParams) -> int:
    b = rank.banks[bank]
    if b.open_row is not None:
        raise ProtocolError("ACT to a bank with an open row")
    t = max(b.last_act + params.tRC, b.last_pre + params.tRP,
            rank.last_act_bg[bank % params.bank_groups] + params.tRRD_L)
    if rank.acts:
        # tRRD_L >= tRRD_S, so only the most recent ACT matters for the short spacing
        t = max(t, rank.acts[-1] + params.tRRD_S)
        if len(rank.acts) == 4:
            t = max(t, rank.acts[0] + params.tFAW)
    return t


def earliest_col(rank: RankState, bank: int, write: bool, params: TimingParams,
                 channel: ChannelState | None = None) -> int:
    b = rank.banks[bank]
    if b.open_row is None:
        raise ProtocolError("column command to a closed bank")
    t = max(b.last_act + params.tRCD, rank.last_col_bg[bank % params.bank_groups] + params.tCCD_L,
            rank.last_col + params.tCCD_S)
    gap = params.turnaround if rank.bus_write is not None and rank.bus_write != write else 0
    t = max(t, rank.bus_free + gap - params.tCL)
    if channel is not None:
        t = max(t, channel._data_ready(write, params) - params.tCL)
    return t


def earliest_pre(rank: RankState, bank: int, params: TimingParams) -> int:
    b = rank.banks[bank]
    if b.open_row is None:
        raise ProtocolError("PRE to a closed bank")
    return max(b.col_end, b.last_act + 1)


def can_issue(cmd: str, rank: RankState, bank: int, now: int, params: TimingParams,
              write: bool = False, channel: ChannelState | None = None) -> bool:
    """True iff ``cmd`` (ACT/RD/WR/PRE) may issue at ``now`` under every timing rule."""
    if cmd == "ACT":
        return earliest_act(rank, bank, params) <= now
    if cmd in ("RD", "WR"):
        return earliest_col(rank, bank, cmd == "WR", params, channel) <= now
    if cmd == "PRE":
        return earliest_pre(rank, bank, params) <= now
    raise ProtocolError(f"unknown command {cmd!r}")


def apply_act(rank: RankState, bank: int, row: int, t: int, params: TimingParams) -> None:
    b = rank.banks[bank]
    b.open_row = row
    b.last_act = t
    rank.acts.append(t)
    rank.last_act_bg[bank_group(bank, params)] = t


def apply_col(rank: RankState, bank: int, bursts: int, write: bool, t: int, params: TimingParams) -> int:
    """Record a column command at ``t``; returns the cycle its data transfer ends."""
    start = t + params.tCL
    end = start + bursts * params.tBL
    b = rank.banks[bank]
    b.col_end = max(b.col_end, end)
    rank.last_col_bg[bank_group(bank, params)] = t
    rank.last_col = t
    rank.bus_free = end
    rank.bus_write = write
    return end


def apply_pre(rank: RankState, bank: int, t: int) -> None:
    b = rank.banks[bank]
    b.open_row = None
    b.last_pre = t


# ---------------------------------------------------------------- requests and controllers

class BroadcastGroup:
    """One channel write captured by several DIMMs at once."""
    __slots__ = ("channel_start",)

    def __init__(self):
        self.channel_start = None


class Request:
    __slots__ = ("rank", "bank", "row", "col", "nbytes", "bursts", "write", "via_channel",
                 "group", "arrival", "seq", "on_done", "tag")

    def __init__(self, rank, bank, row, col, nbytes, write=False, via_channel=False, group=None,
                 on_done=None, tag=None, burst_bytes=64):
        self.rank = rank
        self.bank = bank
        self.row = row
        self.col = col
        self.nbytes = nbytes
        self.bursts = max(1, -(-nbytes // burst_bytes))
        self.write = write
        self.via_channel = via_channel
        self.group = group
        self.arrival = 0
        self.seq = 0
        self.on_done = on_done
        self.tag = tag


class DimmController:
    """FR-FCFS, open-page controller for the ranks of one DIMM.

    Each scheduling step issues at most one command.  Ready row-hit column
    commands go first (oldest first), then the oldest ready ACT/PRE.  A bank
    is only precharged when no queued request hits its open row.
    """

    def __init__(self, kernel: Kernel, params: TimingParams, channel: ChannelState, dimm_local: int,
                 dimm_global: int, num_ranks: int, trace: list | None = None):
        self.kernel = kernel
        self.p = params
        self.channel = channel
        self.dimm_local = dimm_local
        self.dimm_global = dimm_global
        self.ranks = [RankState(params) for _ in range(num_ranks)]
        self.rd_q = []
        self.wr_q = []
        self.trace = trace
        self._seq = 0
        self._last_cmd = NEG
        self._wake_at = None
        self._token = 0
        self._space_waiters = []
        self.read_bytes = 0
        self.write_bytes = 0
        self.commands = 0
        self.full_stalls = 0

    # -- queue interface
    def has_space(self, write: bool) -> bool:
        return len(self.wr_q if write else self.rd_q) < self.p.queue_depth

    def enqueue(self, req: Request) -> bool:
        """Queue ``req``; False signals backpressure (queue full)."""
        q = self.wr_q if req.write else self.rd_q
        if len(q) >= self.p.queue_depth:
            self.full_stalls += 1
            return False
        req.arrival = mem_cycle_at_or_after(self.kernel.now)
        req.seq = self._seq
        self._seq += 1
        q.append(req)
        self._wake(req.arrival)
        return True

    def space_event(self, write: bool):
        ev = self.kernel.event()
        self._space_waiters.append((write, ev))
        return ev

    def submit(self, req: Request):
        """Generator helper: wait for queue space, then enqueue."""
        while not self.enqueue(req):
            yield self.space_event(req.write)

    @property
    def idle(self) -> bool:
        return not self.rd_q and not self.wr_q

    # -- scheduling
    def _wake(self, cycle: int) -> None:
        if self._wake_at is not None and self._wake_at <= cycle:
            return
        self._wake_at = cycle
        self._token += 1
        tok = self._token
        self.kernel.at(max(cycle * MEM_TICKS, self.kernel.now), self._step, cycle, tok)

    def _candidate(self, req: Request, hits: set):
        rank = self.ranks[req.rank]
        b = rank.banks[req.bank]
        ch = self.channel if (req.via_channel and not self._group_done(req)) else None
        if b.open_row == req.row:
            cmd = "WR" if req.write else "RD"
            t = earliest_col(rank, req.bank, req.write, self.p, ch)
        elif b.open_row is None:
            cmd = "ACT"
            t = earliest_act(rank, req.bank, self.p)
        else:
            if (req.rank, req.bank, b.open_row) in hits:
                return None
            cmd = "PRE"
            t = earliest_pre(rank, req.bank, self.p)
        t = max(t, req.arrival, self._last_cmd + 1)
        if ch is not None:
            t = ch.next_cmd_slot(t)
        return cmd, t

    @staticmethod
    def _group_done(req: Request) -> bool:
        return req.group is not None and req.group.channel_start is not None

    def _step(self, cycle: int, token: int) -> None:
        if token != self._token:
            return
        self._wake_at = None
        queue = sorted(self.rd_q + self.wr_q, key=lambda r: r.seq)
        if not queue:
            return
        hits = set()
        opened = []
        for r in queue:
            if self.ranks[r.rank].banks[r.bank].open_row == r.row:
                hits.add((r.rank, r.bank, r.row))
                opened.append(r)
        # arrival grows with seq, so a later request with the same constraints
        # can never be ready before the first one
        seen = set()
        soonest = None
        for r in opened:
            key = (r.rank, r.bank, r.write, r.via_channel and not self._group_done(r))
            if key in seen:
                continue
            seen.add(key)
            cmd, t = self._candidate(r, hits)
            if t <= cycle:
                self._issue(r, cmd, cycle)
                self._wake(cycle + 1)
                return
            if soonest is None or t < soonest:
                soonest = t
        seen.clear()
        for r in queue:
            if (r.rank, r.bank, r.row) in hits:
                continue
            key = (r.rank, r.bank, r.row, r.via_channel and not self._group_done(r))
            if key in seen:
                continue
            seen.add(key)
            c = self._candidate(r, hits)
            if c is None:
                continue
            cmd, t = c
            if t <= cycle:
                self._issue(r, cmd, cycle)
                self._wake(cycle + 1)
                return
            if soonest is None or t < soonest:
                soonest = t
        if soonest is not None:
            self._wake(soonest)

    def _issue(self, req: Request, cmd: str, t: int) -> None:
        rank = self.ranks[req.rank]
        uses_channel = req.via_channel and not self._group_done(req)
        if uses_channel:
            self.channel.take_cmd_slot(t)
        self._last_cmd = t
        self.commands += 1
        col = 0
        row = rank.banks[req.bank].open_row if cmd == "PRE" else req.row
        if cmd == "ACT":
            apply_act(rank, req.bank, req.row, t, self.p)
        elif cmd == "PRE":
            apply_pre(rank, req.bank, t)
        else:
            col = req.col
            end = apply_col(rank, req.bank, req.bursts, req.write, t, self.p)
            if uses_channel:
                self.channel._occupy(t + self.p.tCL, req.bursts * self.p.tBL, req.write)
                if req.group is not None:
                    req.group.channel_start = t
            if req.write:
                self.wr_q.remove(req)
                self.write_bytes += req.nbytes
            else:
                self.rd_q.remove(req)
                self.read_bytes += req.nbytes
            self._notify_space(req.write)
            if req.on_done is not None:
                self.kernel.at(end * MEM_TICKS, req.on_done, end)
        if self.trace is not None:
            self.trace.append((t, self.channel.index, self.dimm_local, req.rank, req.bank, cmd, row,
                               col, req.bursts if cmd in ("RD", "WR") else 0))

    def _notify_space(self, write: bool) -> None:
        keep = []
        for w, ev in self._space_waiters:
            if w == write and not ev.triggered:
                ev.succeed()
            else:
                keep.append((w, ev))
        self._space_waiters = keep


# ---------------------------------------------------------------- trace text

def format_trace(trace) -> str:
    """Command trace: ``cycle channel dimm rank bank cmd row col bursts`` per line."""
    rows = sorted(trace, key=lambda e: (e[0], e[1], e[2], e[3]))
    return "".join(f"{c} {ch} {d} {r} {b} {cmd} {row} {col} {n}\n"
                   for c, ch, d, r, b, cmd, row, col, n in rows)


def parse_trace(text: str) -> list:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        f = line.split()
        out.append((int(f[0]), int(f[1]), int(f[2]), int(f[3]), int(f[4]), f[5], int(f[6]), int(f[7]),
                    int(f[8]) if len(f) > 8 else 1))
    return out
