"""Off-chip Reduce read saving and data-movement energy, host-only vs near-memory, per preset graph."""

import argparse

from nmpsim.graph import preset_graph
from nmpsim.metrics import reduction_saving
from nmpsim.model import ModelConfig, init_state
from nmpsim.simulator import SimConfig, Toggles, simulate_epoch
from nmpsim.workloads import features_and_labels


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--presets", default="YP,AM")
    ap.add_argument("--scale", type=float, default=0.0002)
    ap.add_argument("--variant", default="GCN")
    args = ap.parse_args()
    mc = ModelConfig(args.variant, ((32, 16), (16, 8)))
    print("preset,vertices,reduce_edges,saving,energy_base_j,energy_nmp_j")
    for name in args.presets.split(","):
        g = preset_graph(name, args.scale, 0)[0]
        x, y = features_and_labels(g.num_vertices, 32, 8, 0)
        st = init_state(mc, 0)
        runs = {}
        for label, tg in (("base", Toggles(nmp=False, overlap=False)), ("nmp", Toggles(hgp=True, broadcast=True))):
            runs[label] = simulate_epoch(g, SimConfig(model=mc, toggles=tg, record_trace=False), st, x, y)
        s = reduction_saving(runs["base"], runs["nmp"])
        print(f"{name},{g.num_vertices},{g.degree_tilde.sum() - g.num_vertices},{s:.4f},"
              f"{runs['base'].energy['total']:.4e},{runs['nmp'].energy['total']:.4e}")


if __name__ == "__main__":
    main()
