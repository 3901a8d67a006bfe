import numpy as np
import pytest
import scipy.sparse as sp

from nmpsim.graph import from_edges, generate_power_law
from nmpsim.model import (ConfigError, ModelConfig, StateError, aggregation_matrix, arithmetic_intensity,
                          backward_reference, epoch_phases, forward_reference, init_state, load_matrix,
                          loss_reference, op_counts, save_matrix, softmax_cross_entropy, train_step_reference)
from nmpsim.workloads import features_and_labels


def test_gcn_weights_match_closed_form():
    g = from_edges([0, 1], [1, 2], num_vertices=3)
    A = aggregation_matrix(g, ModelConfig("GCN")).toarray()
    dt = np.array([2, 3, 2])
    for v in range(3):
        for u in range(3):
            expected = 1 / np.sqrt(dt[u] * dt[v]) if (u == v or abs(u - v) == 1) else 0.0
            assert A[v, u] == pytest.approx(expected)


def test_sage_and_gin_weights():
    g = generate_power_law(50, 4, 0)
    A = aggregation_matrix(g, ModelConfig("SAGEConv")).toarray()
    assert np.allclose(A.sum(axis=1), 1.0)
    B = aggregation_matrix(g, ModelConfig("GIN", gin_eps=0.25)).toarray()
    assert np.allclose(np.diag(B), 1.25)


def test_gat_attention_rows_sum_to_one():
    g = generate_power_law(60, 6, 1)
    mc = ModelConfig("GAT", ((8, 4),))
    st = init_state(mc, 0)
    x, _ = features_and_labels(60, 8, 4, 0)
    A = aggregation_matrix(g, mc, x.astype(np.float64), st.params[0])
    assert np.allclose(np.asarray(A.sum(axis=1)).ravel(), 1.0)


def test_forward_matches_dense_formula():
    g = generate_power_law(40, 4, 2)
    mc = ModelConfig("GCN", ((6, 5), (5, 3)))
    st = init_state(mc, 1)
    x, _ = features_and_labels(40, 6, 3, 1)
    fs = forward_reference(g, mc, st, x)
    A = aggregation_matrix(g, mc).toarray()
    h = x.astype(np.float64)
    for p in st.params:
        h = np.maximum(A @ h @ p["W"], 0)
    assert np.allclose(fs.h[-1], h)


def _flat_loss(g, mc, st, x, y, frozen):
    return loss_reference(g, mc, st, x, y, frozen)


@pytest.mark.parametrize("variant", ["GCN", "GIN", "SAGEConv", "GAT"])
def test_backward_matches_central_differences(variant):
    g = generate_power_law(30, 4, 5)
    mc = ModelConfig(variant, ((5, 4), (4, 3)))
    st = init_state(mc, 2)
    x, y = features_and_labels(30, 5, 3, 2)
    fs = forward_reference(g, mc, st, x)
    _, grad = softmax_cross_entropy(fs.h[-1], y)
    backward_reference(g, mc, st, fs, grad)
    frozen = fs.attention
    eps = 1e-6
    for l, p in enumerate(st.params):
        for k, gk in st.grads[l].items():
            num = np.zeros_like(p[k])
            for idx in np.ndindex(p[k].shape):
                old = p[k][idx]
                p[k][idx] = old + eps
                lp = _flat_loss(g, mc, st, x, y, frozen)
                p[k][idx] = old - eps
                lm = _flat_loss(g, mc, st, x, y, frozen)
                p[k][idx] = old
                num[idx] = (lp - lm) / (2 * eps)
            err = np.abs(num - gk).max() / max(np.abs(num).max(), 1e-12)
            assert err < 1e-3, (l, k, err)


def test_backward_requires_forward_state():
    g = generate_power_law(20, 4, 0)
    mc = ModelConfig("GCN", ((4, 3),))
    st = init_state(mc, 0)
    x, y = features_and_labels(20, 4, 3, 0)
    fs = forward_reference(g, mc, st, x)
    fs.a = []
    with pytest.raises(StateError):
        backward_reference(g, mc, st, fs, np.zeros((20, 3)))


def test_train_step_lowers_loss():
    g = generate_power_law(80, 6, 3)
    mc = ModelConfig("GCN", ((8, 8), (8, 4)), learning_rate=0.5)
    st = init_state(mc, 0)
    x, y = features_and_labels(80, 8, 4, 3)
    losses = []
    for _ in range(5):
        train_step_reference(g, mc, st, x, y)
        losses.append(st.loss)
    assert losses[-1] < losses[0]


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig("MLP")
    with pytest.raises(ConfigError):
        ModelConfig("GCN", ((4, 3), (5, 2)))
    with pytest.raises(ConfigError):
        ModelConfig("GCN", element_bytes=8)


def test_epoch_phases():
    mc = ModelConfig("GCN", ((602, 256), (256, 41)))
    names = [p.name for p in epoch_phases(mc, ieo=True)]
    assert names == ["fwd1.combine", "fwd1.aggregate", "fwd2.combine", "fwd2.aggregate", "loss",
                     "bwd2.aggregate", "bwd1.aggregate"]
    names = [p.name for p in epoch_phases(mc, ieo=False)]
    assert names == ["fwd1.aggregate", "fwd2.aggregate", "loss", "bwd2.aggregate"]
    with pytest.raises(ConfigError):
        epoch_phases(ModelConfig("GAT", ((8, 4),)), ieo=True)


def test_ieo_only_where_it_shrinks():
    mc = ModelConfig("GCN", ((4, 8), (8, 2)))
    assert not mc.ieo_layer(1, True)
    assert mc.ieo_layer(2, True)
    assert not mc.ieo_layer(2, False)


def test_arithmetic_intensity():
    assert arithmetic_intensity("vec-mat", 512, 512) == pytest.approx(0.25 * 512)
    assert arithmetic_intensity("outer-product", 512, 512) == pytest.approx(0.125 * 512)
    assert arithmetic_intensity("reduce", 256, 256, fanin=10**4) == pytest.approx(0.5, rel=0.01)


def test_op_counts():
    g = generate_power_law(100, 6, 0)
    c = op_counts(g, ModelConfig("GIN", ((16, 8), (8, 4))))
    assert c["reduce_additions_per_layer"] == [g.num_edges + 100] * 2
    assert c["updates_per_layer"][0]["fwd_vec_mat"] == 200
    assert c["updates_per_layer"][1]["bwd_vec_mat"] == 200


def test_matrix_file_round_trip(tmp_path):
    a = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
    save_matrix(tmp_path / "a.bin", a)
    assert np.array_equal(load_matrix(tmp_path / "a.bin"), a)
    save_matrix(tmp_path / "b.bin", a, bf16=True)
    assert np.allclose(load_matrix(tmp_path / "b.bin"), a, rtol=1e-2)
    labels = np.array([0, 3, 1])
    save_matrix(tmp_path / "y.bin", labels)
    assert np.array_equal(load_matrix(tmp_path / "y.bin").ravel(), labels)
