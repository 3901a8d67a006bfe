"""Independent replay checker for DRAM command traces.

Written against the rules directly (no code shared with the timing engine)
so that an engine bug cannot hide itself.  Trace entries are tuples
``(cycle, channel, dimm, rank, bank, cmd, row, col, bursts)``.
"""

from __future__ import annotations

from collections import defaultdict

from .timing import TimingParams


def audit_trace(trace, params: TimingParams = TimingParams(), limit: int = 100) -> list:
    """Return human-readable violations (empty list means the trace is clean)."""
    p = params
    errors = []

    def bad(msg):
        if len(errors) < limit:
            errors.append(msg)

    by_dimm = defaultdict(list)
    for e in trace:
        by_dimm[(e[1], e[2])].append(e)

    for (ch, dimm), cmds in sorted(by_dimm.items()):
        cmds.sort(key=lambda e: e[0])
        for a, b in zip(cmds, cmds[1:]):
            if a[0] == b[0]:
                bad(f"ch{ch} dimm{dimm}: two commands on the command bus at cycle {a[0]}")
        by_rank = defaultdict(list)
        for e in cmds:
            by_rank[e[3]].append(e)
        for rank, rc in sorted(by_rank.items()):
            where = f"ch{ch} dimm{dimm} rank{rank}"
            open_row = {}
            last_act = {}
            last_pre = {}
            data_end = {}
            acts = []
            acts_bg = defaultdict(list)
            cols = []
            cols_bg = defaultdict(list)
            transfers = []
            for t, _, _, _, bank, cmd, row, col, bursts in rc:
                bg = bank % p.bank_groups
                if cmd == "ACT":
                    if bank in open_row:
                        bad(f"{where}: ACT to open bank {bank} at {t}")
                    if bank in last_act and t - last_act[bank] < p.tRC:
                        bad(f"{where}: tRC violated on bank {bank} at {t} ({t - last_act[bank]})")
                    if bank in last_pre and t - last_pre[bank] < p.tRP:
                        bad(f"{where}: tRP violated on bank {bank} at {t} ({t - last_pre[bank]})")
                    open_row[bank] = row
                    last_act[bank] = t
                    acts.append(t)
                    acts_bg[bg].append(t)
                elif cmd in ("RD", "WR"):
                    if open_row.get(bank) != row:
                        bad(f"{where}: {cmd} to bank {bank} row {row} not open at {t}")
                    elif t - last_act[bank] < p.tRCD:
                        bad(f"{where}: tRCD violated on bank {bank} at {t} ({t - last_act[bank]})")
                    start = t + p.tCL
                    end = start + bursts * p.tBL
                    transfers.append((start, end, cmd == "WR", t))
                    data_end[bank] = max(data_end.get(bank, end), end)
                    cols.append(t)
                    cols_bg[bg].append(t)
                elif cmd == "PRE":
                    if bank not in open_row:
                        bad(f"{where}: PRE to closed bank {bank} at {t}")
                    if t < data_end.get(bank, t):
                        bad(f"{where}: PRE at {t} before data of bank {bank} finished ({data_end[bank]})")
                    open_row.pop(bank, None)
                    last_pre[bank] = t
                else:
                    bad(f"{where}: unknown command {cmd!r} at {t}")
            for a, b in zip(acts, acts[1:]):
                if b - a < p.tRRD_S:
                    bad(f"{where}: tRRD_S violated at {b} ({b - a})")
            for lst in acts_bg.values():
                for a, b in zip(lst, lst[1:]):
                    if b - a < p.tRRD_L:
                        bad(f"{where}: tRRD_L violated at {b} ({b - a})")
            for i in range(len(acts) - 4):
                if acts[i + 4] - acts[i] < p.tFAW:
                    bad(f"{where}: tFAW violated: 5 ACTs within {acts[i + 4] - acts[i]} cycles at {acts[i + 4]}")
            for a, b in zip(cols, cols[1:]):
                if b - a < p.tCCD_S:
                    bad(f"{where}: tCCD_S violated at {b} ({b - a})")
            for lst in cols_bg.values():
                for a, b in zip(lst, lst[1:]):
                    if b - a < p.tCCD_L:
                        bad(f"{where}: tCCD_L violated at {b} ({b - a})")
            transfers.sort()
            for (s0, e0, w0, t0), (s1, e1, w1, t1) in zip(transfers, transfers[1:]):
                gap = p.turnaround if w0 != w1 else 0
                if s1 < e0 + gap:
                    bad(f"{where}: data bus overlap between commands at {t0} and {t1}")
    return errors
