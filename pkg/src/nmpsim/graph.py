"""Input graphs in CSR form.

Row ``v`` of the CSR lists ``N(v)``, the vertices whose features are
aggregated into ``v``.  Self-loops are never stored; every aggregation over
``Ñ(v)`` adds ``v`` itself implicitly.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np

CSR_MAGIC = b"GNRC"
CSR_VERSION = 1
_CSR_HEADER = struct.Struct("<4sIQQ")
MAX_VERTEX = 2**32 - 1


class GraphError(Exception):
    """Base class for graph construction errors."""


class ParseError(GraphError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class InputError(GraphError):
    pass


class ParameterError(GraphError):
    pass


class DomainError(GraphError):
    pass


@dataclass(frozen=True, eq=False)
class CsrGraph:
    num_vertices: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    symmetric: bool = True

    def __post_init__(self):
        rp = np.ascontiguousarray(self.row_ptr, dtype=np.int64)
        ci = np.ascontiguousarray(self.col_idx, dtype=np.int64)
        if rp.shape != (self.num_vertices + 1,):
            raise InputError("row_ptr must have num_vertices+1 entries")
        if rp[0] != 0 or rp[-1] != ci.size or np.any(np.diff(rp) < 0):
            raise InputError("row_ptr is not a valid offset array")
        if ci.size and (ci.min() < 0 or ci.max() >= self.num_vertices):
            raise InputError("col_idx entry out of range")
        rp.setflags(write=False)
        ci.setflags(write=False)
        object.__setattr__(self, "row_ptr", rp)
        object.__setattr__(self, "col_idx", ci)

    @property
    def num_edges(self) -> int:
        """Number of stored directed edges (self-loops excluded)."""
        return int(self.col_idx.size)

    @property
    def degree(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    @property
    def degree_tilde(self) -> np.ndarray:
        return self.degree + 1

    def neighbors(self, v: int) -> np.ndarray:
        return self.col_idx[self.row_ptr[v]:self.row_ptr[v + 1]]

    def has_edge(self, u: int, v: int) -> bool:
        """True if ``u`` is in ``N(v)``."""
        row = self.neighbors(v)
        i = np.searchsorted(row, u)
        return bool(i < row.size and row[i] == u)

    def in_tilde(self, u: int, v: int) -> bool:
        return u == v or self.has_edge(u, v)

    def reduce_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """All (src, dst) pairs with src in Ñ(dst), grouped by dst.

        Within a destination the self-loop comes first, then N(dst) ascending.
        """
        n = self.num_vertices
        deg = self.degree
        dst = np.repeat(np.arange(n, dtype=np.int64), deg + 1)
        src = np.empty(dst.size, dtype=np.int64)
        starts = self.row_ptr + np.arange(n + 1)
        self_pos = starts[:-1]
        src[self_pos] = np.arange(n)
        mask = np.ones(dst.size, dtype=bool)
        mask[self_pos] = False
        src[mask] = self.col_idx
        return src, dst

    def degree_table(self) -> "DegreeTable":
        return DegreeTable(self.degree, self.degree_tilde)


@dataclass(frozen=True, eq=False)
class DegreeTable:
    degree: np.ndarray
    degree_tilde: np.ndarray


@dataclass(frozen=True)
class GraphPreset:
    name: str
    num_vertices: int
    num_edges: int
    feature_dim: int
    avg_degree: float
    default_lambda: float


PRESETS = {
    "PT": GraphPreset("PT", 132_534, 39_561_252, 128, 597.0, 0.0),
    "RD": GraphPreset("RD", 232_965, 114_615_892, 602, 492.9, 0.0),
    "YP": GraphPreset("YP", 716_847, 6_977_410, 300, 19.5, 0.35),
    "AM": GraphPreset("AM", 2_449_029, 123_718_280, 100, 101.0, 0.35),
}


def from_edges(src, dst, num_vertices: int | None = None, symmetric: bool = True) -> CsrGraph:
    """Build a CSR graph from parallel arrays; ``src`` is placed in ``N(dst)``.

    Duplicates and self-loops are dropped.
    """
    src = np.asarray(src, dtype=np.int64).ravel()
    dst = np.asarray(dst, dtype=np.int64).ravel()
    if num_vertices is None:
        num_vertices = int(max(src.max(initial=-1), dst.max(initial=-1)) + 1)
    if symmetric:
        src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    keep = src != dst
    src, dst = src[keep], dst[keep]
    key = np.unique(dst * num_vertices + src) if src.size else np.zeros(0, dtype=np.int64)
    d, s = np.divmod(key, max(num_vertices, 1))
    counts = np.bincount(d, minlength=num_vertices)
    row_ptr = np.zeros(num_vertices + 1, dtype=np.int64)
    np.cumsum(counts, out=row_ptr[1:])
    return CsrGraph(num_vertices, row_ptr, s, symmetric)


def load_edge_list(stream: TextIO | Iterable[str], symmetric: bool = True) -> CsrGraph:
    """Parse whitespace-separated ``u v`` lines; ``#`` lines are comments."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    us, vs = [], []
    for lineno, line in enumerate(stream, 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        if len(parts) != 2:
            raise ParseError(lineno, f"expected 'u v', got {text!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(lineno, f"non-integer vertex in {text!r}") from None
        if u < 0 or v < 0:
            raise ParseError(lineno, "negative vertex index")
        if u > MAX_VERTEX or v > MAX_VERTEX:
            raise InputError(f"line {lineno}: vertex index exceeds {MAX_VERTEX}")
        us.append(u)
        vs.append(v)
    if not us:
        return CsrGraph(0, np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64), symmetric)
    return from_edges(us, vs, symmetric=symmetric)


def write_edge_list(graph: CsrGraph, stream: TextIO) -> None:
    src, dst = _stored_pairs(graph)
    if graph.symmetric:
        keep = src < dst
        src, dst = src[keep], dst[keep]
    for u, v in zip(src.tolist(), dst.tolist()):
        stream.write(f"{u} {v}\n")


def _stored_pairs(graph: CsrGraph):
    dst = np.repeat(np.arange(graph.num_vertices), graph.degree)
    return graph.col_idx.copy(), dst


def save_csr(graph: CsrGraph, path) -> None:
    with open(path, "wb") as f:
        f.write(_CSR_HEADER.pack(CSR_MAGIC, CSR_VERSION, graph.num_vertices, graph.num_edges))
        f.write(graph.row_ptr.astype("<u8").tobytes())
        f.write(graph.col_idx.astype("<u4").tobytes())


def load_csr(path) -> CsrGraph:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _CSR_HEADER.size:
        raise InputError("truncated CSR file")
    magic, version, n, m = _CSR_HEADER.unpack_from(data)
    if magic != CSR_MAGIC:
        raise InputError(f"bad CSR magic {magic!r}")
    if version != CSR_VERSION:
        raise InputError(f"unsupported CSR version {version}")
    off = _CSR_HEADER.size
    expected = off + 8 * (n + 1) + 4 * m
    if len(data) != expected:
        raise InputError(f"CSR file size {len(data)} != expected {expected}")
    row_ptr = np.frombuffer(data, dtype="<u8", count=n + 1, offset=off).astype(np.int64)
    col_idx = np.frombuffer(data, dtype="<u4", count=m, offset=off + 8 * (n + 1)).astype(np.int64)
    g = CsrGraph(int(n), row_ptr, col_idx, symmetric=False)
    return CsrGraph(g.num_vertices, g.row_ptr, g.col_idx, _is_symmetric(g))


def _is_symmetric(graph: CsrGraph) -> bool:
    src, dst = _stored_pairs(graph)
    n = max(graph.num_vertices, 1)
    fwd = np.sort(dst * n + src)
    rev = np.sort(src * n + dst)
    return bool(np.array_equal(fwd, rev))


def gcn_edge_weight(graph: CsrGraph, u: int, v: int) -> float:
    """Symmetric degree normalisation 1/sqrt(D̃u·D̃v) for u in Ñ(v)."""
    if not (0 <= u < graph.num_vertices and 0 <= v < graph.num_vertices):
        raise DomainError(f"vertex out of range: ({u}, {v})")
    if not graph.in_tilde(u, v):
        raise DomainError(f"{u} is not in the closed neighbourhood of {v}")
    dt = graph.degree_tilde
    return 1.0 / math.sqrt(float(dt[u]) * float(dt[v]))


def generate_power_law(n: int, avg_degree: float, seed: int) -> CsrGraph:
    """Symmetric preferential-attachment graph with mean degree ~``avg_degree``.

    Every new vertex attaches to ``m`` distinct existing vertices chosen with
    probability proportional to degree; ``m`` alternates between floor and
    ceil of ``avg_degree/2`` to hit fractional targets.
    """
    if n < 1:
        raise ParameterError("n must be >= 1")
    if avg_degree < 0:
        raise ParameterError("avg_degree must be >= 0")
    if avg_degree >= n:
        raise ParameterError("avg_degree must be < n")
    rng = np.random.default_rng(seed)
    half = avg_degree / 2.0
    m_lo = int(math.floor(half))
    frac = half - m_lo
    if half <= 0 or n == 1:
        return from_edges([], [], num_vertices=n)
    m_hi = m_lo + 1 if frac > 0 else m_lo
    core = max(m_hi, 1) + 1
    core = min(core, n)
    iu, ju = np.triu_indices(core, k=1)
    src_parts = [iu.astype(np.int64)]
    dst_parts = [ju.astype(np.int64)]
    # endpoint pool: each vertex appears once per incident edge (degree-proportional sampling)
    pool = np.empty(2 * (iu.size + (n - core) * m_hi) + n, dtype=np.int64)
    filled = 2 * iu.size
    pool[:iu.size] = iu
    pool[iu.size:filled] = ju
    ms = np.full(n - core, m_lo, dtype=np.int64)
    if frac > 0:
        ms[rng.random(n - core) < frac] = m_hi
    for t, m in zip(range(core, n), ms.tolist()):
        m = min(m, t)
        if m <= 0:
            continue
        chosen = np.unique(pool[rng.integers(0, filled, size=m)]) if filled else np.zeros(0, np.int64)
        while chosen.size < m:
            extra = pool[rng.integers(0, filled, size=2 * (m - chosen.size))] if filled \
                else rng.integers(0, t, size=m)
            chosen = np.unique(np.concatenate([chosen, extra]))
        if chosen.size > m:
            chosen = rng.permutation(chosen)[:m]
        src_parts.append(np.full(m, t, dtype=np.int64))
        dst_parts.append(chosen)
        pool[filled:filled + m] = chosen
        pool[filled + m:filled + 2 * m] = t
        filled += 2 * m
    return from_edges(np.concatenate(src_parts), np.concatenate(dst_parts), num_vertices=n)


def random_graph(n: int, num_undirected_edges: int, seed: int) -> CsrGraph:
    """Uniform random simple symmetric graph with an exact undirected edge count."""
    max_edges = n * (n - 1) // 2
    if num_undirected_edges > max_edges:
        raise ParameterError("too many edges for a simple graph")
    rng = np.random.default_rng(seed)
    keys = np.zeros(0, dtype=np.int64)
    while keys.size < num_undirected_edges:
        need = num_undirected_edges - keys.size
        a = rng.integers(0, n, size=int(need * 1.2) + 16)
        b = rng.integers(0, n, size=a.size)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        ok = lo != hi
        keys = np.unique(np.concatenate([keys, lo[ok] * n + hi[ok]]))
    if keys.size > num_undirected_edges:
        keys = np.sort(rng.choice(keys, size=num_undirected_edges, replace=False))
    lo, hi = np.divmod(keys, n)
    return from_edges(lo, hi, num_vertices=n)


def degree_histogram(graph: CsrGraph, thresholds) -> np.ndarray:
    """Vertex counts per bucket: ``<=t0``, ``(t0, t1]``, ..., ``>t_last``."""
    t = np.asarray(thresholds)
    idx = np.searchsorted(t, graph.degree, side="left")
    return np.bincount(idx, minlength=t.size + 1)


def preset_graph(name: str, scale: float, seed: int) -> tuple[CsrGraph, GraphPreset]:
    """Synthetic stand-in for a named preset: same mean degree (capped), scaled size."""
    try:
        p = PRESETS[name.upper()]
    except KeyError:
        raise ParameterError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    n = max(2, int(round(p.num_vertices * scale)))
    avg = min(p.avg_degree, (n - 1) * 0.5)
    return generate_power_law(n, avg, seed), p
