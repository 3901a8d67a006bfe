"""Counters, energy accounting, roofline points and report rendering."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .cae import CaeConfig
from .kernel import CAE_TICKS, EU_TICKS, TICK_HZ
from .nme import NmeConfig
from .timing import TimingParams


class ComparisonError(ValueError):
    pass


PHASE_FIELDS = ("reduce_read", "reduce_offchip_read", "update_read", "update_write", "staging_write")


@dataclass
class Counters:
    num_channels: int
    num_dimms: int
    off_chip_read_bytes: np.ndarray = None
    off_chip_write_bytes: np.ndarray = None
    local_read_bytes: np.ndarray = None
    local_write_bytes: np.ndarray = None
    dram_read_bytes: np.ndarray = None
    dup_write_bytes: int = 0
    eu_mac_ops: np.ndarray = None
    eu_busy_ticks: np.ndarray = None
    buffer_high_water: np.ndarray = None
    gemm_flops: int = 0
    vpu_ops: int = 0
    gemm_busy_ticks: int = 0
    vpu_busy_ticks: int = 0
    fifo_stall_ticks: int = 0
    queue_stalls: int = 0
    instructions: dict = field(default_factory=lambda: {"L": 0, "C": 0, "R": 0, "B": 0})
    phases: dict = field(default_factory=dict)

    def __post_init__(self):
        C, G = self.num_channels, self.num_dimms
        for name, size in (("off_chip_read_bytes", C), ("off_chip_write_bytes", C), ("local_read_bytes", G),
                           ("local_write_bytes", G), ("dram_read_bytes", G), ("eu_mac_ops", G),
                           ("eu_busy_ticks", G), ("buffer_high_water", G)):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(size, dtype=np.int64))

    def phase(self, name: str) -> dict:
        if name not in self.phases:
            self.phases[name] = {k: 0 for k in PHASE_FIELDS}
        return self.phases[name]

    def totals(self) -> dict:
        return {
            "off_chip_read_bytes": int(self.off_chip_read_bytes.sum()),
            "off_chip_write_bytes": int(self.off_chip_write_bytes.sum()),
            "local_read_bytes": int(self.local_read_bytes.sum()),
            "local_write_bytes": int(self.local_write_bytes.sum()),
            "dram_read_bytes": int(self.dram_read_bytes.sum()),
            "dup_write_bytes": int(self.dup_write_bytes),
            "eu_mac_ops": int(self.eu_mac_ops.sum()),
            "gemm_flops": int(self.gemm_flops),
            "vpu_ops": int(self.vpu_ops),
        }

    def reduce_offchip_read(self) -> int:
        return sum(p["reduce_offchip_read"] for p in self.phases.values())


# ---------------------------------------------------------------- energy

@dataclass(frozen=True)
class EnergyModel:
    off_chip_pj_per_bit: float = 22.0
    dram_read_pj_per_bit: float = 14.0
    nme: NmeConfig = NmeConfig()
    cae: CaeConfig = CaeConfig()


def energy_total(counters: Counters, elapsed_s: float, model: EnergyModel = EnergyModel(),
                 mode: str = "active") -> dict:
    """Joules by component.  ``active`` charges power only while a unit works;
    ``always-on`` charges every unit for the whole run."""
    if mode not in ("active", "always-on"):
        raise ValueError(f"unknown energy mode {mode!r}")
    t = counters.totals()
    bits_off = (t["off_chip_read_bytes"] + t["off_chip_write_bytes"]) * 8
    out = {
        "offchip_io": bits_off * model.off_chip_pj_per_bit * 1e-12,
        "dram_read": t["dram_read_bytes"] * 8 * model.dram_read_pj_per_bit * 1e-12,
    }
    mw = 1e-3
    if mode == "active":
        eu_s = counters.eu_busy_ticks.sum() / TICK_HZ
        gemm_s = counters.gemm_busy_ticks / TICK_HZ
        vpu_s = counters.vpu_busy_ticks / TICK_HZ
        out["nme_eu"] = model.nme.eu_power_mw * mw * eu_s
        out["nme_buffer"] = model.nme.buffer_power_mw * mw * eu_s
        out["cae_gemm"] = model.cae.gemm_power_mw * mw * gemm_s
        out["cae_vpu"] = model.cae.vpu_power_mw * mw * vpu_s
        out["cae_scratchpad"] = model.cae.scratchpad_power_mw * mw * (gemm_s + vpu_s)
    else:
        G = counters.num_dimms
        out["nme_eu"] = model.nme.eu_power_mw * mw * elapsed_s * G
        out["nme_buffer"] = model.nme.buffer_power_mw * mw * elapsed_s * G
        out["cae_gemm"] = model.cae.gemm_power_mw * mw * elapsed_s
        out["cae_vpu"] = model.cae.vpu_power_mw * mw * elapsed_s
        out["cae_scratchpad"] = model.cae.scratchpad_power_mw * mw * elapsed_s
    out["total"] = sum(out.values())
    return out


# ---------------------------------------------------------------- roofline

def roofline_point(kind: str, intensity: float, num_dimms: int = 16, ranks_per_dimm: int = 2,
                   num_channels: int = 4, timing: TimingParams = TimingParams(),
                   nme: NmeConfig = NmeConfig(), cae: CaeConfig = CaeConfig(),
                   cae_peak: float | None = None) -> dict:
    """Attainable Ops/s for a Reduce (near-memory) or Update (CAE) operation."""
    if intensity < 0:
        raise ValueError("intensity must be >= 0")
    rank_bw = timing.rank_bandwidth
    channel_bw = num_channels * rank_bw
    if kind == "reduce":
        bw = num_dimms * ranks_per_dimm * rank_bw
        peak = num_dimms * nme.peak_flops
    elif kind == "update":
        bw = channel_bw
        peak = cae.gemm_peak_flops if cae_peak is None else cae_peak
    else:
        raise ValueError(f"unknown roofline kind {kind!r}")
    return {"intensity": intensity, "attainable": min(peak, intensity * bw), "peak": peak,
            "bandwidth": bw, "ridge": peak / bw}


def reduction_saving(base: "object", nmp: "object") -> float:
    """1 - (off-chip Reduce reads with near-memory reduction) / (without)."""
    if getattr(base, "workload", None) != getattr(nmp, "workload", None):
        raise ComparisonError("reports come from different workloads")
    b = base.counters.reduce_offchip_read()
    n = nmp.counters.reduce_offchip_read()
    if b == 0:
        return 0.0
    return 1.0 - n / b


# ---------------------------------------------------------------- reports

def report_dict(result) -> dict:
    """Flat, ordered key -> value mapping for a simulation result."""
    c = result.counters
    out = {"workload": result.workload, "makespan_ticks": result.makespan_ticks,
           "makespan_s": f"{result.makespan_ticks / TICK_HZ:.12e}",
           "functional_verdict": result.verdict or "NOT-CHECKED"}
    for k, v in c.totals().items():
        out[k] = v
    for ch in range(c.num_channels):
        out[f"channel{ch}.off_chip_read_bytes"] = int(c.off_chip_read_bytes[ch])
        out[f"channel{ch}.off_chip_write_bytes"] = int(c.off_chip_write_bytes[ch])
    for g in range(c.num_dimms):
        out[f"dimm{g}.local_read_bytes"] = int(c.local_read_bytes[g])
        out[f"dimm{g}.local_write_bytes"] = int(c.local_write_bytes[g])
        out[f"dimm{g}.eu_busy_cycles"] = int(c.eu_busy_ticks[g] // EU_TICKS)
        out[f"dimm{g}.buffer_high_water"] = int(c.buffer_high_water[g])
    out["gemm_busy_cycles"] = c.gemm_busy_ticks // CAE_TICKS
    out["vpu_busy_cycles"] = c.vpu_busy_ticks // CAE_TICKS
    out["fifo_stall_ticks"] = c.fifo_stall_ticks
    out["queue_stalls"] = c.queue_stalls
    for k, v in c.instructions.items():
        out[f"instructions.{k}"] = v
    for name, ph in c.phases.items():
        for k, v in ph.items():
            out[f"phase.{name}.{k}"] = v
    for name, t in result.phase_ticks.items():
        out[f"phase.{name}.ticks"] = t
    for k, v in result.energy.items():
        out[f"energy.{k}_j"] = f"{v:.9e}"
    for k, v in result.deviations.items():
        out[f"deviation.{k}"] = f"{v:.6e}"
    return out


def format_report(d: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in d.items())


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        k, _, v = line.partition(" = ")
        out[k.strip()] = v.strip()
    return out


def energy_from_report(d: dict, model: EnergyModel = EnergyModel()) -> float:
    """Recompute data-movement energy (J) from a parsed report's counters."""
    off = (int(d["off_chip_read_bytes"]) + int(d["off_chip_write_bytes"])) * 8
    return off * model.off_chip_pj_per_bit * 1e-12 + int(d["dram_read_bytes"]) * 8 * model.dram_read_pj_per_bit * 1e-12


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["parameter", "value", "cycles", "off_chip_bytes", "local_read_bytes", "energy_j"])
    for r in rows:
        w.writerow([r["parameter"], r["value"], r["cycles"], r["off_chip_bytes"], r["local_read_bytes"],
                    f"{r['energy_j']:.9e}"])
    return buf.getvalue()
