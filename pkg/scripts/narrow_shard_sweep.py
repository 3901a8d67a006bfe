"""Local DRAM reads of the Reduce phase for several R x C shard shapes at a fixed vector budget."""

import argparse
import time

from nmpsim.cae import count_loads
from nmpsim.graph import generate_power_law
from nmpsim.model import ModelConfig
from nmpsim.partition import partition
from nmpsim.simulator import SimConfig

SHAPES = [(1, 127), (2, 126), (4, 124), (8, 120), (32, 96), (64, 64), (96, 32), (127, 1)]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=50_000)
    ap.add_argument("--degrees", default="20,100")
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    mc = ModelConfig("GCN", ((args.dim, args.dim),))
    vb = args.dim * mc.element_bytes
    print("degree,R,C,local_read_bytes,shards,relative_to_R1")
    for deg in (float(d) for d in args.degrees.split(",")):
        t0 = time.time()
        g = generate_power_law(args.n, deg, args.seed)
        p = partition(g, SimConfig(model=mc).partition_config())
        src, dst = g.reduce_edges()
        rows = [(R, C, count_loads(src, dst, p, R, C, g.num_vertices)) for R, C in SHAPES]
        base = rows[0][2]["loads"]
        for R, C, c in rows:
            print(f"{deg:g},{R},{C},{c['loads'] * vb},{c['shards']},{c['loads'] / base:.4f}")
        print(f"# degree {deg:g}: {time.time() - t0:.1f} s")


if __name__ == "__main__":
    main()
