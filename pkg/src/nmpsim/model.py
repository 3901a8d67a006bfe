"""GNN model configuration, the reference trainer, and epoch operation streams.

The reference trainer works on whole-graph sparse matrices in float64 and is
the numerical oracle for the simulated accelerator datapath.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .graph import CsrGraph

VARIANTS = ("GCN", "GIN", "SAGEConv", "GAT")
LINEAR_AGGREGATORS = ("GCN", "GIN", "SAGEConv")


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    variant: str = "GCN"
    dims: tuple = ((16, 16), (16, 8))
    element_bytes: int = 4
    learning_rate: float = 0.01
    gin_eps: float = 0.1
    gat_att_dim: int = 8
    gat_slope: float = 0.2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        self.dims = tuple((int(a), int(b)) for a, b in self.dims)
        if not self.dims:
            raise ConfigError("need at least one layer")
        for (_, d_out), (d_in, _) in zip(self.dims, self.dims[1:]):
            if d_out != d_in:
                raise ConfigError(f"layer dims do not chain: {self.dims}")
        if any(a < 1 or b < 1 for a, b in self.dims):
            raise ConfigError("layer dims must be >= 1")
        if self.element_bytes not in (2, 4):
            raise ConfigError("element_bytes must be 2 (BF16) or 4 (FP32)")

    @property
    def num_layers(self) -> int:
        return len(self.dims)

    @property
    def linear_aggregator(self) -> bool:
        return self.variant in LINEAR_AGGREGATORS

    def ieo_layer(self, layer: int, ieo: bool) -> bool:
        """Whether ``layer`` (1-based) runs combination before aggregation."""
        d_in, d_out = self.dims[layer - 1]
        return ieo and self.linear_aggregator and d_in > d_out


@dataclass
class TrainerState:
    params: list                    # per layer: dict name -> array
    grads: list = field(default_factory=list)
    loss: float = float("nan")

    def zero_grads(self):
        self.grads = [{k: np.zeros_like(v) for k, v in p.items() if k in TRAINABLE} for p in self.params]

    def copy(self) -> "TrainerState":
        return TrainerState([{k: v.copy() for k, v in p.items()} for p in self.params],
                            [{k: v.copy() for k, v in g.items()} for g in self.grads], self.loss)


TRAINABLE = ("W", "b", "W2", "b2")


def init_state(config: ModelConfig, seed: int) -> TrainerState:
    """Uniform(+-1/sqrt(d_in)) initialisation for every parameter tensor."""
    rng = np.random.default_rng(seed)
    params = []
    for d_in, d_out in config.dims:
        s = 1.0 / math.sqrt(d_in)
        p = {"W": rng.uniform(-s, s, (d_in, d_out))}
        if config.variant == "GIN":
            s2 = 1.0 / math.sqrt(d_out)
            p["b"] = rng.uniform(-s, s, d_out)
            p["W2"] = rng.uniform(-s2, s2, (d_out, d_out))
            p["b2"] = rng.uniform(-s2, s2, d_out)
        elif config.variant == "GAT":
            k = config.gat_att_dim
            p["W1"] = rng.uniform(-s, s, (d_in, k))
            p["W2a"] = rng.uniform(-s, s, (d_in, k))
            p["att"] = rng.uniform(-1.0 / math.sqrt(k), 1.0 / math.sqrt(k), 2 * k)
        params.append(p)
    st = TrainerState(params)
    st.zero_grads()
    return st


@dataclass
class FeatureStore:
    h: list                                         # h[0] = input, h[l] = layer-l output
    a: list = field(default_factory=list)           # a[l-1] = aggregation result of layer l
    z: list = field(default_factory=list)           # first FC output (pre-activation)
    q: list = field(default_factory=list)           # GIN second FC output
    attention: list = field(default_factory=list)   # per-layer sparse aggregation matrices
    delta: list = field(default_factory=list)       # delta[l] = dL/dh^l
    delta_masked: list = field(default_factory=list)  # delta_masked[l-1] = dL/dz^l


# ---------------------------------------------------------------- helpers

def relu(x):
    return np.maximum(x, 0.0)


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def leaky_relu(x, slope):
    return np.where(x > 0, x, slope * x)


def _adjacency(graph: CsrGraph, values) -> sp.csr_matrix:
    src, dst = graph.reduce_edges()
    n = graph.num_vertices
    return sp.csr_matrix((values, (dst, src)), shape=(n, n))


def aggregation_matrix(graph: CsrGraph, config: ModelConfig, h=None, params=None) -> sp.csr_matrix:
    """Sparse matrix A with a_v = sum_u A[v, u] h_u over u in Ñ(v)."""
    src, dst = graph.reduce_edges()
    dt = graph.degree_tilde.astype(np.float64)
    if config.variant == "GCN":
        vals = 1.0 / np.sqrt(dt[src] * dt[dst])
    elif config.variant == "SAGEConv":
        vals = 1.0 / dt[dst]
    elif config.variant == "GIN":
        vals = np.where(src == dst, 1.0 + config.gin_eps, 1.0)
    else:
        k = config.gat_att_dim
        left = (h @ params["W1"]) @ params["att"][:k]
        right = (h @ params["W2a"]) @ params["att"][k:]
        e = leaky_relu(left[dst] + right[src], config.gat_slope)
        n = graph.num_vertices
        emax = np.full(n, -np.inf)
        np.maximum.at(emax, dst, e)
        w = np.exp(e - emax[dst])
        denom = np.bincount(dst, weights=w, minlength=n)
        vals = w / denom[dst]
    return _adjacency(graph, vals)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean() if n else 0.0
    grad = p
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / max(n, 1)


# ---------------------------------------------------------------- reference trainer

def forward_reference(graph, config: ModelConfig, state: TrainerState, input_features,
                      frozen_attention: Optional[list] = None) -> FeatureStore:
    x = np.asarray(input_features, dtype=np.float64)
    if x.shape != (graph.num_vertices, config.dims[0][0]):
        raise ConfigError(f"input features shape {x.shape} != ({graph.num_vertices}, {config.dims[0][0]})")
    fs = FeatureStore(h=[x])
    h = x
    for l, p in enumerate(state.params):
        if frozen_attention is not None:
            A = frozen_attention[l]
        else:
            A = aggregation_matrix(graph, config, h, p)
        a = A @ h
        z = a @ p["W"]
        if config.variant == "GIN":
            z = z + p["b"]
            q = relu(z) @ p["W2"] + p["b2"]
            h = relu(q)
            fs.q.append(q)
        elif config.variant == "GAT":
            h = elu(z)
        else:
            h = relu(z)
        fs.attention.append(A)
        fs.a.append(a)
        fs.z.append(z)
        fs.h.append(h)
    return fs


def _post_backward(config, p, fs, l, gh, grads):
    """dL/dh^l -> dL/dz^l through the layer's post-aggregation nonlinearity."""
    if config.variant == "GIN":
        gq = gh * (fs.q[l - 1] > 0)
        pz = relu(fs.z[l - 1])
        grads["W2"] += pz.T @ gq
        grads["b2"] += gq.sum(axis=0)
        gp = gq @ p["W2"].T
        gz = gp * (fs.z[l - 1] > 0)
        grads["b"] += gz.sum(axis=0)
        return gz
    if config.variant == "GAT":
        z = fs.z[l - 1]
        return gh * np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))
    return gh * (fs.z[l - 1] > 0)


def backward_reference(graph, config: ModelConfig, state: TrainerState, features: FeatureStore,
                       output_grads):
    """Accumulate weight gradients into ``state.grads``; return (features, grads).

    Attention coefficients (GAT) are treated as constants.
    """
    L = config.num_layers
    if len(features.a) != L or len(features.h) != L + 1:
        raise StateError("forward results (aggregations) were not retained")
    gh = np.asarray(output_grads, dtype=np.float64)
    if gh.shape != features.h[L].shape:
        raise ConfigError("output gradient shape does not match final layer")
    features.delta = [None] * (L + 1)
    features.delta_masked = [None] * L
    features.delta[L] = gh
    for l in range(L, 0, -1):
        p = state.params[l - 1]
        g = state.grads[l - 1]
        gz = _post_backward(config, p, features, l, gh, g)
        features.delta_masked[l - 1] = gz
        g["W"] += features.a[l - 1].T @ gz
        if l > 1:
            gh = features.attention[l - 1].T @ (gz @ p["W"].T)
            features.delta[l - 1] = gh
    return features, state.grads


def loss_reference(graph, config, state, input_features, labels, frozen_attention=None):
    fs = forward_reference(graph, config, state, input_features, frozen_attention)
    loss, _ = softmax_cross_entropy(fs.h[-1], labels)
    return loss


def train_step_reference(graph, config, state, input_features, labels):
    """One full-batch epoch: forward, loss, backward, SGD. Returns the FeatureStore."""
    state.zero_grads()
    fs = forward_reference(graph, config, state, input_features)
    state.loss, grad = softmax_cross_entropy(fs.h[-1], labels)
    backward_reference(graph, config, state, fs, grad)
    sgd_step(state, config.learning_rate)
    return fs


def sgd_step(state: TrainerState, lr: float) -> TrainerState:
    for p, g in zip(state.params, state.grads):
        for k, v in g.items():
            p[k] = p[k] - lr * v
    state.zero_grads()
    return state


# ---------------------------------------------------------------- operation streams

@dataclass(frozen=True)
class ReduceStep:
    layer: int
    direction: str
    dest_interval: int
    src: np.ndarray = field(repr=False, compare=False)
    dst: np.ndarray = field(repr=False, compare=False)


@dataclass(frozen=True)
class UpdateStep:
    layer: int
    direction: str
    kind: str             # "vec-mat" | "outer-product"
    vertex_range: tuple


@dataclass(frozen=True)
class OthersStep:
    kind: str             # "loss" | "activation"
    vertex_range: tuple


@dataclass(frozen=True)
class Phase:
    """One pass over all intervals; the simulator executes phases in order."""
    kind: str             # "reduce" | "dense"
    name: str
    layer: int
    direction: str
    steps_per_interval: tuple   # abstract steps after (or instead of) the Reduce


def epoch_phases(config: ModelConfig, ieo: bool) -> list:
    """Phase plan for one training epoch.

    Forward: per layer either Reduce->Update (default) or Update->Reduce
    (interchanged order).  Backward weight-gradient work for a layer is fused
    into the pass that produces its masked gradients.
    """
    if ieo and config.variant == "GAT":
        raise ConfigError("interchanged execution order needs a linear aggregator; "
                          "GAT attention aggregation is nonlinear")
    L = config.num_layers
    gin_extra = config.variant == "GIN"
    phases = []
    for l in range(1, L + 1):
        if config.ieo_layer(l, ieo):
            phases.append(Phase("dense", f"fwd{l}.combine", l, "fwd", (("update", l, "vec-mat"),)))
            post = [("others", "activation")]
            if gin_extra:
                post.insert(0, ("update", l, "vec-mat"))
            phases.append(Phase("reduce", f"fwd{l}.aggregate", l, "fwd", tuple(post)))
        else:
            post = [("update", l, "vec-mat")] + ([("update", l, "vec-mat")] if gin_extra else [])
            phases.append(Phase("reduce", f"fwd{l}.aggregate", l, "fwd", tuple(post)))

    def cb(l):
        # weight-gradient work of a non-interchanged layer, done where dL/dz^l is produced
        if config.ieo_layer(l, ieo):
            return []
        out = [("update", l, "outer-product")]
        if l > 1:
            out.append(("update", l, "vec-mat"))
        return out

    phases.append(Phase("dense", "loss", L, "bwd", tuple([("others", "loss")] + cb(L))))
    for l in range(L, 0, -1):
        if config.ieo_layer(l, ieo):
            post = [("update", l, "outer-product")]
            if l > 1:
                post.append(("update", l, "vec-mat"))
                post += cb(l - 1)
            phases.append(Phase("reduce", f"bwd{l}.aggregate", l, "bwd", tuple(post)))
        elif l > 1:
            phases.append(Phase("reduce", f"bwd{l}.aggregate", l, "bwd", tuple(cb(l - 1))))
    return phases


def intervals(num_vertices: int, width: int) -> list:
    return [(lo, min(lo + width, num_vertices)) for lo in range(0, num_vertices, width)]


def build_op_stream(graph: CsrGraph, config: ModelConfig, placement, shard_config, ieo: bool) -> list:
    if placement is not None and len(placement.home_channel) != graph.num_vertices:
        raise ConfigError("placement does not cover every vertex")
    src, dst = graph.reduce_edges()
    bounds = np.searchsorted(dst, np.arange(0, graph.num_vertices + 1))
    ivs = intervals(graph.num_vertices, shard_config.C)
    stream = []
    for ph in epoch_phases(config, ieo):
        for i, (lo, hi) in enumerate(ivs):
            if ph.kind == "reduce":
                s, e = bounds[lo], bounds[hi]
                stream.append(ReduceStep(ph.layer, ph.direction, i, src[s:e], dst[s:e]))
            for step in ph.steps_per_interval:
                if step[0] == "update":
                    stream.append(UpdateStep(step[1], ph.direction, step[2], (lo, hi)))
                else:
                    stream.append(OthersStep(step[1], (lo, hi)))
    return stream


def op_counts(graph: CsrGraph, config: ModelConfig) -> dict:
    """Reduce additions and Update vector operations per layer (default order)."""
    n = graph.num_vertices
    fc = 2 if config.variant == "GIN" else 1
    reduce_adds = graph.num_edges + n
    layers = []
    for l in range(1, config.num_layers + 1):
        layers.append({
            "reduce_additions": reduce_adds,
            "fwd_vec_mat": fc * n,
            "bwd_outer_product": fc * n,
            "bwd_vec_mat": (fc - 1) * n + (n if l > 1 else 0),
        })
    return {"reduce_additions_per_layer": [d["reduce_additions"] for d in layers],
            "updates_per_layer": layers}


def arithmetic_intensity(kind: str, d_in: int, d_out: int, fanin: int = 1, element_bytes: int = 4) -> float:
    """Theoretical Ops/Byte with weights held on chip."""
    if d_in < 1 or d_out < 1 or fanin < 1:
        raise ValueError("dimensions must be >= 1")
    eb = element_bytes
    if kind == "vec-mat":
        return 2 * d_in * d_out / (eb * (d_in + d_out))
    if kind == "outer-product":
        return d_in * d_out / (eb * (d_in + d_out))
    if kind == "reduce":
        return 2 * fanin * d_in / (eb * (fanin * d_in + d_out))
    raise ValueError(f"unknown kind {kind!r}")


# ---------------------------------------------------------------- matrix files

_MATRIX_HEADER = struct.Struct("<QQI")
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<u2"), 2: np.dtype("<i8")}


def save_matrix(path, array, bf16: bool = False) -> None:
    from . import bf16 as _bf
    a = np.asarray(array)
    if a.ndim == 1:
        a = a[:, None]
    if bf16:
        code, data = 1, _bf.to_bits(a.astype(np.float32)).astype("<u2")
    elif np.issubdtype(a.dtype, np.integer):
        code, data = 2, a.astype("<i8")
    else:
        code, data = 0, a.astype("<f4")
    with open(path, "wb") as f:
        f.write(_MATRIX_HEADER.pack(a.shape[0], a.shape[1], code))
        f.write(np.ascontiguousarray(data).tobytes())


def load_matrix(path) -> np.ndarray:
    from . import bf16 as _bf
    with open(path, "rb") as f:
        data = f.read()
    rows, cols, code = _MATRIX_HEADER.unpack_from(data)
    if code not in _CODES:
        raise ConfigError(f"unknown element code {code}")
    dt = _CODES[code]
    arr = np.frombuffer(data, dtype=dt, count=rows * cols, offset=_MATRIX_HEADER.size).reshape(rows, cols)
    if code == 1:
        return _bf.from_bits(arr)
    return arr.astype(dt.newbyteorder("="))
