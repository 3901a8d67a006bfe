import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nmpsim.graph import generate_power_law
from nmpsim.isa import CType, LType, RType
from nmpsim.nme import DimmStore, Nme, NmeConfig, NmeProtocolError, overlap_schedule
from nmpsim.partition import AddressMap, MappingError, PartitionConfig, partition


def test_overlap_example():
    makespan, _ = overlap_schedule([25] * 10, [30] * 10)
    assert makespan == 25 + 10 * 30
    no, _ = overlap_schedule([25] * 10, [30] * 10, overlap=False)
    assert no == 10 * 55
    assert overlap_schedule([7, 9, 4], [0, 0, 0])[0] == 20
    assert overlap_schedule([25], [30])[0] == overlap_schedule([25], [30], overlap=False)[0]


durations = st.lists(st.tuples(st.integers(0, 200), st.integers(0, 200)), min_size=1, max_size=12)


@given(durations)
@settings(max_examples=100)
def test_overlap_schedule_properties(pairs):
    loads = [a for a, _ in pairs]
    comps = [b for _, b in pairs]
    m, s = overlap_schedule(loads, comps)
    m0, _ = overlap_schedule(loads, comps, overlap=False)
    assert m <= m0 == sum(loads) + sum(comps)
    assert m >= max(sum(loads), sum(comps))
    for k, (ls, ld, cs, cd) in enumerate(s):
        assert cs >= ld and cd - cs == comps[k]
        if k >= 2:
            assert ls >= s[k - 2][3]       # at most two shards in flight


def test_peak_and_cycles():
    c = NmeConfig()
    assert c.peak_flops == 16 * 8 * 2 * 500e6
    assert c.eu_cycles(256) == 2
    assert c.eu_cycles(129) == 2


def _engine(bf16_mode=False):
    g = generate_power_law(40, 4, 0)
    p = partition(g, PartitionConfig(num_channels=1, dimms_per_channel=1))
    eb = 2 if bf16_mode else 4
    amap = AddressMap(p, {("h", 0): 8 * eb}, 2)
    store = DimmStore(40)
    x = np.arange(320, dtype=np.float32).reshape(40, 8) / 100
    store.write(("h", 0), np.arange(40), x, bf16_mode)
    return Nme(0, store, amap, NmeConfig(), bf16_mode), amap, store.read(("h", 0), np.arange(40))


def test_weighted_sum_of_two_sources():
    nme, amap, x = _engine()
    nme.exec_l(LType(0, amap.daddr(3, ("h", 0)), 32), slot=0)
    nme.exec_l(LType(0, amap.daddr(7, ("h", 0)), 32), slot=1)
    nme.exec_c(CType.with_weight(0, 0, 0.5, 2, 0, wide=True))
    nme.exec_c(CType.with_weight(0, 0, 2.0, 2, 1, wide=True))
    y = nme.exec_r(RType(0, 2, 32))
    assert np.allclose(y, 0.5 * x[3] + 2 * x[7])
    assert nme.mac_ops == 16
    assert nme.local_read_bytes == 64


def test_bf16_readout_is_rounded():
    nme, amap, x = _engine(bf16_mode=True)
    nme.exec_l(LType(0, amap.daddr(3, ("h", 0)), 16), slot=0)
    nme.exec_c(CType.with_weight(0, 0, 0.3, 0, 0))
    y = nme.exec_r(RType(0, 0, 16))
    assert np.array_equal(y.view(np.uint32) & 0xFFFF, np.zeros(8, dtype=np.uint32))


def test_protocol_errors():
    nme, amap, _ = _engine()
    with pytest.raises(NmeProtocolError):
        nme.exec_c(CType.with_weight(0, 0, 1.0, 0, 5, wide=True))
    with pytest.raises(NmeProtocolError):
        nme.exec_r(RType(0, 9, 32))
    with pytest.raises(NmeProtocolError):
        nme.exec_l(LType(1, 0, 32))
    with pytest.raises(NmeProtocolError):
        nme.exec_l(LType(0, amap.daddr(3, ("h", 0)), 64))
    with pytest.raises(MappingError):
        nme.exec_l(LType(0, 8192 * 16 * 500, 32))


def test_buffer_overflow():
    g = generate_power_law(40, 4, 0)
    p = partition(g, PartitionConfig(num_channels=1, dimms_per_channel=1))
    amap = AddressMap(p, {("h", 0): 4096}, 1)
    store = DimmStore(40)
    store.write(("h", 0), np.arange(40), np.ones((40, 1024)), False)
    nme = Nme(0, store, amap, NmeConfig(buffer_bytes=3 * 4096))
    for s in range(3):
        nme.exec_l(LType(0, amap.daddr(s, ("h", 0)), 4096), slot=s)
    with pytest.raises(NmeProtocolError):
        nme.exec_c(CType.with_weight(0, 0, 1.0, 0, 0, wide=True))


def test_store_rejects_unwritten_rows():
    s = DimmStore(5)
    with pytest.raises(MappingError):
        s.read(("h", 0), 1)
    s.write(("h", 0), [0], np.ones((1, 3)), False)
    with pytest.raises(MappingError):
        s.read(("h", 0), 1)
