"""Design-space sweeps (shard size, window, lambda, ranks per DIMM) on one graph; one CSV per parameter."""

import argparse
import sys
from pathlib import Path

from nmpsim.cli import main as nmpsim

SWEEPS = {
    "shard": "2,4,8,16,32,64,128,256",
    "window": "1,2,4,8,16,32",
    "lambda": "0,0.05,0.1,0.2,0.35,0.5",
    "ranks": "1,2,4,8",
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results", help="directory for the CSV files")
    ap.add_argument("--preset", default=None, help="preset graph name instead of the generator")
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--variant", default="GCN")
    ap.add_argument("--only", choices=sorted(SWEEPS))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    common = ["--variant", args.variant, "--set", f"graph.n={args.n}", "--set", "model.dims=64,64,16",
              "--set", "model.num_classes=16", "--set", "toggles.hgp=true", "--set", "toggles.broadcast=true"]
    if args.preset:
        common += ["--preset", args.preset]
    for param, values in SWEEPS.items():
        if args.only and param != args.only:
            continue
        path = out / f"sweep_{param}.csv"
        rc = nmpsim(["sweep", *common, "--parameter", param, "--values", values, "-o", str(path)])
        if rc:
            sys.exit(rc)
        print(path.read_text(), end="")


if __name__ == "__main__":
    main()
