from types import SimpleNamespace

import pytest

from nmpsim.metrics import (ComparisonError, Counters, EnergyModel, energy_from_report, energy_total,
                            format_report, parse_report, reduction_saving, roofline_point, sweep_csv)


def test_energy_data_movement():
    c = Counters(4, 16)
    c.off_chip_read_bytes[0] = 1000
    c.off_chip_write_bytes[1] = 500
    c.dram_read_bytes[3] = 2000
    e = energy_total(c, 0.0)
    assert e["offchip_io"] == pytest.approx(1500 * 8 * 22e-12)
    assert e["dram_read"] == pytest.approx(2000 * 8 * 14e-12)
    assert e["total"] == pytest.approx(sum(v for k, v in e.items() if k != "total"))


def test_energy_modes():
    c = Counters(1, 2)
    c.eu_busy_ticks[0] = 42_000_000_000       # one second
    active = energy_total(c, 2.0)
    assert active["nme_eu"] == pytest.approx(0.1781)
    assert active["nme_buffer"] == pytest.approx(0.080)
    on = energy_total(c, 2.0, mode="always-on")
    assert on["nme_eu"] == pytest.approx(0.1781 * 2 * 2)
    assert on["cae_gemm"] == pytest.approx(6.2914 * 2)
    with pytest.raises(ValueError):
        energy_total(c, 1.0, mode="sometimes")


def test_roofline():
    u = roofline_point("update", 1000)
    assert u["bandwidth"] == pytest.approx(4 * 19.2e9)
    assert u["attainable"] == u["peak"]
    assert roofline_point("update", 10, cae_peak=22e12)["ridge"] == pytest.approx(22e12 / 76.8e9)
    r = roofline_point("reduce", 0.5)
    assert r["bandwidth"] == pytest.approx(32 * 19.2e9)
    assert r["attainable"] == pytest.approx(0.5 * 32 * 19.2e9)
    with pytest.raises(ValueError):
        roofline_point("reduce", -1)


def _run(workload, reduce_bytes):
    c = Counters(1, 1)
    c.phase("fwd1.aggregate")["reduce_offchip_read"] = reduce_bytes
    return SimpleNamespace(workload=workload, counters=c)


def test_reduction_saving():
    assert reduction_saving(_run("a", 1000), _run("a", 250)) == pytest.approx(0.75)
    with pytest.raises(ComparisonError):
        reduction_saving(_run("a", 1000), _run("b", 250))


def test_report_round_trip():
    d = {"workload": "abc", "off_chip_read_bytes": 100, "off_chip_write_bytes": 20, "dram_read_bytes": 7}
    text = format_report(d)
    back = parse_report(text)
    assert back == {k: str(v) for k, v in d.items()}
    assert energy_from_report(back) == pytest.approx(120 * 8 * 22e-12 + 7 * 8 * 14e-12)


def test_sweep_csv():
    out = sweep_csv([{"parameter": "window", "value": 4, "cycles": 10, "off_chip_bytes": 5,
                      "local_read_bytes": 3, "energy_j": 1.5e-6}])
    assert out.splitlines()[0] == "parameter,value,cycles,off_chip_bytes,local_read_bytes,energy_j"
    assert out.splitlines()[1].startswith("window,4,10,5,3,")
