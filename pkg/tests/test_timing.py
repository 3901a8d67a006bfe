import pytest
from hypothesis import given, settings, strategies as st

from nmpsim.audit import audit_trace
from nmpsim.kernel import MEM_TICKS, Kernel
from nmpsim.timing import (ChannelState, DimmController, ProtocolError, RankState, Request, TimingParams,
                           apply_act, can_issue, earliest_act, format_trace, parse_trace)

P = TimingParams()


def run_requests(reqs, ranks=1, params=P):
    """Feed (arrival_cycle, Request) pairs to one controller; returns (trace, completion cycles)."""
    k = Kernel()
    trace = []
    ctrl = DimmController(k, params, ChannelState(0), 0, 0, ranks, trace)
    done = {}

    def feeder():
        for i, (t, r) in enumerate(reqs):
            if t * MEM_TICKS > k.now:
                yield k.until(t * MEM_TICKS)
            r.on_done = lambda end, i=i: done.__setitem__(i, end)
            yield from ctrl.submit(r)

    k.process(feeder())
    k.run()
    return trace, done


def test_single_read_closed_bank():
    trace, done = run_requests([(0, Request(0, 0, 5, 0, 64))])
    assert [c[5] for c in trace] == ["ACT", "RD"]
    act, rd = trace[0][0], trace[1][0]
    assert rd - act == P.tRCD
    assert done[0] == rd + P.tCL + P.tBL


def test_row_hit_128_bytes_takes_25_cycles():
    trace, done = run_requests([(0, Request(0, 0, 5, 0, 64)), (200, Request(0, 0, 5, 64, 128))])
    rd2 = [c for c in trace if c[5] == "RD"][1][0]
    assert rd2 == 200
    assert done[1] - rd2 == 25


def test_fifth_act_waits_for_faw():
    reqs = [(0, Request(0, b, 1, 0, 64)) for b in (0, 1, 2, 3, 5)]
    trace, _ = run_requests(reqs)
    acts = [c[0] for c in trace if c[5] == "ACT"]
    assert acts[4] - acts[0] >= P.tFAW
    assert all(b - a >= P.tRRD_S for a, b in zip(acts, acts[1:]))


def test_row_conflict_precharges_after_data():
    trace, done = run_requests([(0, Request(0, 0, 1, 0, 64)), (0, Request(0, 0, 2, 0, 64))])
    cmds = [c[5] for c in trace]
    assert cmds == ["ACT", "RD", "PRE", "ACT", "RD"]
    pre = trace[2][0]
    assert pre >= trace[1][0] + P.tCL + P.tBL
    assert trace[3][0] - pre >= P.tRP
    assert trace[3][0] - trace[0][0] >= P.tRC


def test_can_issue_and_protocol_errors():
    r = RankState(P)
    assert can_issue("ACT", r, 0, 0, P)
    apply_act(r, 0, 3, 0, P)
    assert not can_issue("RD", r, 0, P.tRCD - 1, P)
    assert can_issue("RD", r, 0, P.tRCD, P)
    with pytest.raises(ProtocolError):
        earliest_act(r, 0, P)
    with pytest.raises(ProtocolError):
        can_issue("NOP", r, 0, 0, P)
    with pytest.raises(ValueError):
        TimingParams(tCCD_L=2)


def test_queue_backpressure():
    k = Kernel()
    ctrl = DimmController(k, TimingParams(queue_depth=2), ChannelState(0), 0, 0, 1)
    assert ctrl.enqueue(Request(0, 0, 1, 0, 64))
    assert ctrl.enqueue(Request(0, 1, 1, 0, 64))
    assert not ctrl.enqueue(Request(0, 2, 1, 0, 64))
    assert ctrl.full_stalls == 1


request = st.tuples(st.integers(0, 60), st.integers(0, 1), st.integers(0, 15), st.integers(0, 3),
                    st.sampled_from([32, 64, 128, 256]), st.booleans(), st.booleans())


@given(st.lists(request, min_size=1, max_size=40))
@settings(max_examples=60, deadline=None)
def test_random_traffic_passes_independent_audit(reqs):
    reqs = sorted(reqs, key=lambda r: r[0])
    trace, done = run_requests([(t, Request(rank, bank, row, 0, nb, wr, via))
                                for t, rank, bank, row, nb, wr, via in reqs], ranks=2)
    assert audit_trace(trace, P) == []
    assert len(done) == len(reqs)


def test_audit_catches_violations():
    bad = [(0, 0, 0, 0, 0, "ACT", 1, 0, 0), (5, 0, 0, 0, 0, "RD", 1, 0, 1)]
    assert any("tRCD" in e for e in audit_trace(bad, P))
    faw = [(t, 0, 0, 0, b, "ACT", 1, 0, 0) for t, b in zip((0, 6, 12, 18, 24), (0, 1, 2, 3, 4))]
    assert any("tFAW" in e for e in audit_trace(faw, P))
    overlap = [(0, 0, 0, 0, 0, "ACT", 1, 0, 0), (1, 0, 0, 0, 1, "ACT", 1, 0, 0),
               (20, 0, 0, 0, 0, "RD", 1, 0, 2), (24, 0, 0, 0, 1, "RD", 1, 0, 2)]
    assert any("overlap" in e for e in audit_trace(overlap, P))
    early_pre = [(0, 0, 0, 0, 0, "ACT", 1, 0, 0), (20, 0, 0, 0, 0, "RD", 1, 0, 1),
                 (30, 0, 0, 0, 0, "PRE", 1, 0, 0)]
    assert any("PRE" in e for e in audit_trace(early_pre, P))


def test_trace_text_round_trip():
    trace, _ = run_requests([(0, Request(0, 3, 7, 128, 64)), (3, Request(0, 3, 9, 0, 64, True))])
    assert parse_trace(format_trace(trace)) == trace
