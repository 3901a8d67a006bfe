"""Command-line entry point: simulate, validate, sweep, partition, report."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .cae import ShardConfig
from .config import load_config, load_graph, load_inputs
from .graph import GraphError
from .isa import save_trace
from .kernel import MEM_TICKS
from .metrics import format_report, parse_report, report_dict, sweep_csv
from .model import VARIANTS, ConfigError
from .partition import CapacityError, MappingError, partition, save_placement
from .simulator import first_divergence, simulate_epoch, tensor_dims, validate
from .timing import format_trace

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_FAIL = 0, 1, 2, 3
SWEEP_PARAMETERS = ("shard", "window", "lambda", "ranks", "RxC")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p):
    p.add_argument("-c", "--config", help="run-config file (INI sections)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--variant", choices=VARIANTS, help="GNN variant (overrides model.variant)")
    p.add_argument("--preset", help="use a scaled synthetic stand-in for a named preset graph")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="nmpsim", description="Near-memory GNN training simulator")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("simulate", help="simulate one training epoch and write a report")
    _common(p)
    p.add_argument("-o", "--output", help="report path (default: stdout)")
    p = sub.add_parser("validate", help="compare a simulated epoch against the reference trainer")
    _common(p)
    p = sub.add_parser("sweep", help="one simulation per parameter value, CSV output")
    _common(p)
    p.add_argument("--parameter", required=True, choices=SWEEP_PARAMETERS)
    p.add_argument("--values", required=True, help="comma-separated values (R:C pairs for RxC)")
    p.add_argument("-o", "--output", help="CSV path (default: stdout)")
    p = sub.add_parser("partition", help="export the vertex placement")
    _common(p)
    p.add_argument("-o", "--output", required=True, help="placement file")
    p = sub.add_parser("report", help="re-render a saved report")
    p.add_argument("path")
    p.add_argument("--format", choices=("text", "json"), default="text")
    return ap


def _overrides(args) -> list:
    out = list(args.set)
    if args.variant:
        out.append(f"model.variant={args.variant}")
    if args.preset:
        out += ["graph.source=preset", f"graph.preset={args.preset}"]
    return out


def _write(path, text: str) -> None:
    if path:
        with open(path, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _run(rc, graph, check: bool):
    state, x, y = load_inputs(rc, graph)
    if check:
        if graph.num_vertices > rc.validate_cap:
            raise ConfigError(f"graph has {graph.num_vertices} vertices, above the validation cap "
                              f"{rc.validate_cap} ([run] validate_cap)")
        return validate(graph, rc.sim, state, x, y)
    return simulate_epoch(graph, rc.sim, state, x, y)


def _energy(res, rc):
    if rc.energy_mode != "active":
        from .metrics import energy_total
        from .kernel import TICK_HZ
        res.energy = energy_total(res.counters, res.makespan_ticks / TICK_HZ, mode=rc.energy_mode)


def cmd_simulate(args) -> int:
    rc = load_config(args.config, _overrides(args))
    graph = load_graph(rc)
    res = _run(rc, graph, check=graph.num_vertices <= rc.validate_cap)
    _energy(res, rc)
    _write(args.output or rc.outputs["report"], format_report(report_dict(res)))
    if rc.outputs["trace"]:
        _write(rc.outputs["trace"], format_trace(res.command_trace))
    if rc.outputs["instructions"]:
        save_trace(res.instruction_words, rc.outputs["instructions"])
    if rc.outputs["placement"]:
        save_placement(res.placement, rc.outputs["placement"])
    return EXIT_OK


def cmd_validate(args) -> int:
    rc = load_config(args.config, _overrides(args))
    res = _run(rc, load_graph(rc), check=True)
    worst = sorted(res.deviations.items(), key=lambda kv: -kv[1])
    print(f"tolerance = {res.tolerance:.1e}")
    for name, v in worst:
        print(f"{name} = {v:.6e}")
    if res.verdict == "PASS":
        print("PASS")
        return EXIT_OK
    name, idx, s, r = first_divergence(res.outputs, res.reference, res.tolerance)
    print(f"FAIL: first divergent tensor {name} at index {list(idx)}: simulated {s:.6g}, reference {r:.6g}")
    return EXIT_FAIL


def sweep_point(sim, parameter: str, value: str):
    """SimConfig with one design parameter replaced."""
    try:
        if parameter == "shard":
            s = int(value)
            return replace(sim, shard=ShardConfig(1, max(s - 1, 1), max(s, 2)))
        if parameter == "window":
            return replace(sim, window=int(value))
        if parameter == "lambda":
            return replace(sim, lam=float(value))
        if parameter == "ranks":
            return replace(sim, ranks_per_dimm=int(value))
        if parameter == "RxC":
            r, _, c = value.replace("x", ":").partition(":")
            return replace(sim, shard=ShardConfig(int(r), int(c), sim.shard.budget))
    except ValueError as e:
        raise ConfigError(f"bad {parameter} value {value!r}: {e}") from None
    raise UsageError(f"unknown sweep parameter {parameter!r}")


def cmd_sweep(args) -> int:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    rc = load_config(args.config, _overrides(args))
    graph = load_graph(rc)
    state, x, y = load_inputs(rc, graph)
    rows = []
    for v in values:
        sim = replace(sweep_point(rc.sim, args.parameter, v), record_trace=False)
        res = simulate_epoch(graph, sim, state, x, y)
        t = res.counters.totals()
        rows.append({"parameter": args.parameter, "value": v, "cycles": res.makespan_ticks // MEM_TICKS,
                     "off_chip_bytes": t["off_chip_read_bytes"] + t["off_chip_write_bytes"],
                     "local_read_bytes": t["local_read_bytes"], "energy_j": res.energy["total"]})
    _write(args.output, sweep_csv(rows))
    return EXIT_OK


def cmd_partition(args) -> int:
    rc = load_config(args.config, _overrides(args))
    graph = load_graph(rc)
    dims = tensor_dims(rc.sim.model, rc.sim.toggles.ieo)
    vb = sum(dims.values()) * rc.sim.model.element_bytes
    save_placement(partition(graph, rc.sim.partition_config(), vector_bytes=vb), args.output)
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        with open(args.path) as f:
            d = parse_report(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read report {args.path}: {e}") from None
    if args.format == "json":
        _write(None, json.dumps(d, indent=2, sort_keys=False) + "\n")
    else:
        _write(None, format_report(d))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "validate": cmd_validate, "sweep": cmd_sweep,
            "partition": cmd_partition, "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, GraphError, CapacityError, MappingError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
