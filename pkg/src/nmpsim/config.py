"""Run configuration: one INI-style file with sections, overridable key by key."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cae import CaeConfig, ShardConfig
from .graph import CsrGraph, generate_power_law, load_csr, load_edge_list, preset_graph
from .model import ConfigError, ModelConfig, init_state, load_matrix
from .simulator import TOGGLES, SimConfig, Toggles
from .workloads import features_and_labels

DEFAULTS = {
    "graph": {"source": "generator", "path": "", "preset": "YP", "scale": "0.0005", "n": "200",
              "avg_degree": "10", "seed": "1", "symmetric": "true"},
    "model": {"variant": "GCN", "dims": "16,16,8", "element_bytes": "4", "learning_rate": "0.01",
              "gin_eps": "0.1", "num_classes": "8", "features": "", "labels": ""},
    "system": {"channels": "4", "dimms_per_channel": "4", "ranks_per_dimm": "2", "lambda": "0.35",
               "shard_r": "1", "shard_c": "127", "shard_budget": "128", "window": "4", "fifo_depth": "8",
               "queue_depth": "32"},
    "toggles": {k: "true" for k in TOGGLES},
    "run": {"seed": "0", "report": "", "trace": "", "instructions": "", "placement": "",
            "energy_mode": "active", "validate_cap": "5000", "fault_edge": "-1"},
}


@dataclass
class RunConfig:
    raw: configparser.ConfigParser
    sim: SimConfig
    seed: int
    outputs: dict = field(default_factory=dict)
    energy_mode: str = "active"
    validate_cap: int = 5000

    def get(self, section: str, key: str) -> str:
        return self.raw.get(section, key)

    def text(self) -> str:
        lines = []
        for sec in self.raw.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in self.raw.items(sec)]
            lines.append("")
        return "\n".join(lines)


def parse_overrides(items) -> list:
    """``section.key=value`` strings -> (section, key, value) triples."""
    out = []
    for item in items or []:
        name, eq, value = item.partition("=")
        sec, dot, key = name.strip().partition(".")
        if not eq or not dot or not sec or not key:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        out.append((sec, key, value.strip()))
    return out


def _bool(cp, sec, key) -> bool:
    try:
        return cp.getboolean(sec, key)
    except ValueError as e:
        raise ConfigError(f"[{sec}] {key}: {e}") from None


def _int(cp, sec, key) -> int:
    try:
        return cp.getint(sec, key)
    except ValueError as e:
        raise ConfigError(f"[{sec}] {key}: {e}") from None


def _float(cp, sec, key) -> float:
    try:
        return cp.getfloat(sec, key)
    except ValueError as e:
        raise ConfigError(f"[{sec}] {key}: {e}") from None


def load_config(path=None, overrides=()) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";",))
    cp.read_dict(DEFAULTS)
    if path is not None:
        try:
            with open(path) as f:
                cp.read_file(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except configparser.Error as e:
            raise ConfigError(f"malformed config {path}: {e}") from None
    for sec, key, value in parse_overrides(overrides):
        if not cp.has_section(sec):
            raise ConfigError(f"unknown config section [{sec}]")
        cp.set(sec, key, value)
    for sec in cp.sections():
        if sec not in DEFAULTS:
            raise ConfigError(f"unknown config section [{sec}]")
        for key in cp[sec]:
            if key not in DEFAULTS[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
    return build_run_config(cp)


def build_run_config(cp: configparser.ConfigParser) -> RunConfig:
    try:
        dims_flat = [int(x) for x in cp.get("model", "dims").split(",") if x.strip()]
    except ValueError:
        raise ConfigError("[model] dims must be a comma-separated list of integers") from None
    if len(dims_flat) < 2:
        raise ConfigError("[model] dims needs at least an input and an output width")
    model = ModelConfig(cp.get("model", "variant"), tuple(zip(dims_flat, dims_flat[1:])),
                        _int(cp, "model", "element_bytes"), _float(cp, "model", "learning_rate"),
                        _float(cp, "model", "gin_eps"))
    toggles = Toggles(**{k: _bool(cp, "toggles", k) for k in TOGGLES})
    shard = ShardConfig(_int(cp, "system", "shard_r"), _int(cp, "system", "shard_c"),
                        _int(cp, "system", "shard_budget"))
    from .timing import TimingParams
    sim = SimConfig(model=model, num_channels=_int(cp, "system", "channels"),
                    dimms_per_channel=_int(cp, "system", "dimms_per_channel"),
                    ranks_per_dimm=_int(cp, "system", "ranks_per_dimm"), lam=_float(cp, "system", "lambda"),
                    shard=shard, window=_int(cp, "system", "window"), toggles=toggles,
                    timing=TimingParams(queue_depth=_int(cp, "system", "queue_depth")),
                    cae=CaeConfig(fifo_depth=_int(cp, "system", "fifo_depth")),
                    fault_edge=_int(cp, "run", "fault_edge"))
    try:
        sim.partition_config()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if sim.window < 1:
        raise ConfigError("[system] window must be >= 1")
    mode = cp.get("run", "energy_mode")
    if mode not in ("active", "always-on"):
        raise ConfigError("[run] energy_mode must be 'active' or 'always-on'")
    outputs = {k: cp.get("run", k) for k in ("report", "trace", "instructions", "placement")}
    return RunConfig(cp, sim, _int(cp, "run", "seed"), outputs, mode, _int(cp, "run", "validate_cap"))


def load_graph(rc: RunConfig) -> CsrGraph:
    cp = rc.raw
    source = cp.get("graph", "source")
    symmetric = _bool(cp, "graph", "symmetric")
    seed = _int(cp, "graph", "seed")
    if source == "generator":
        return generate_power_law(_int(cp, "graph", "n"), _float(cp, "graph", "avg_degree"), seed)
    if source == "preset":
        return preset_graph(cp.get("graph", "preset"), _float(cp, "graph", "scale"), seed)[0]
    if source == "file":
        path = Path(cp.get("graph", "path"))
        if not path.exists():
            raise ConfigError(f"graph file {path} does not exist")
        with open(path, "rb") as f:
            head = f.read(4)
        if head == b"GNRC":
            return load_csr(path)
        with open(path) as f:
            return load_edge_list(f, symmetric=symmetric)
    raise ConfigError(f"[graph] source must be generator, preset or file (got {source!r})")


def load_inputs(rc: RunConfig, graph: CsrGraph):
    """(initial trainer state, input features, labels) for a run."""
    cp = rc.raw
    mc = rc.sim.model
    n, d_in = graph.num_vertices, mc.dims[0][0]
    num_classes = _int(cp, "model", "num_classes")
    if num_classes > mc.dims[-1][1]:
        raise ConfigError("num_classes exceeds the output width")
    x, y = features_and_labels(n, d_in, num_classes, rc.seed)
    if cp.get("model", "features"):
        x = load_matrix(cp.get("model", "features")).astype(np.float32)
    if cp.get("model", "labels"):
        y = load_matrix(cp.get("model", "labels")).ravel().astype(np.int64)
    if x.shape != (n, d_in):
        raise ConfigError(f"features have shape {x.shape}, expected ({n}, {d_in})")
    if y.shape != (n,) or y.min(initial=0) < 0 or y.max(initial=0) >= mc.dims[-1][1]:
        raise ConfigError("labels must be one class index per vertex within the output width")
    return init_state(mc, rc.seed), x, y
