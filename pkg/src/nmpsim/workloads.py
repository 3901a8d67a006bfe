"""Small seeded workloads shared by the tests and the experiment scripts."""

from __future__ import annotations

import numpy as np

from .graph import CsrGraph, from_edges, generate_power_law


def features_and_labels(n: int, d_in: int, num_classes: int, seed: int):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, d_in)).astype(np.float32), rng.integers(0, num_classes, n)


def small_case(seed: int, n: int = 200, avg_degree: float = 10.0, d_in: int = 16, num_classes: int = 6):
    """Power-law graph plus random input features and labels."""
    g = generate_power_law(n, avg_degree, seed)
    x, y = features_and_labels(n, d_in, num_classes, seed + 1000)
    return g, x, y


def skewed_graph(num_intervals: int, width: int, num_dimms: int, base_degree: int, skew: float,
                 seed: int) -> CsrGraph:
    """Directed graph whose Reduce work is concentrated on one DIMM per interval.

    Vertices are placed round-robin (vertex v lives on DIMM v mod G).  Every
    destination in interval i draws ``base_degree`` sources from each DIMM
    and ``skew * base_degree`` extra sources from DIMM ``i mod G``, so one
    DIMM owns ``skew``-times the edges of any other, and the heavy DIMM
    rotates from interval to interval.
    """
    rng = np.random.default_rng(seed)
    n = num_intervals * width
    G = num_dimms
    per_dimm = [np.arange(g, n, G) for g in range(G)]
    src, dst = [], []
    for v in range(n):
        heavy = (v // width) % G
        for g in range(G):
            k = base_degree * (int(skew) if g == heavy else 1)
            k = min(k, per_dimm[g].size)
            src.append(rng.choice(per_dimm[g], size=k, replace=False))
            dst.append(np.full(k, v))
    return from_edges(np.concatenate(src), np.concatenate(dst), num_vertices=n, symmetric=False)
