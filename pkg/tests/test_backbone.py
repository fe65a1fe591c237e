import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import fd_check
from instaprompt import autodiff as ad
from instaprompt.backbone import (
    Backbone,
    CheckpointError,
    PretrainError,
    backbone_forward,
    checkpoint_load,
    checkpoint_save,
    edge_prediction_auc,
    edge_prediction_loss,
    encode_inputs,
    gcn_forward,
    pretrain_edge_prediction,
    readout_mean,
)
from instaprompt.data import Dataset, GraphInstance, SchemaError, benchmark_spec, collate, generate_synthetic


def graph(n, edges, rng, d=3):
    return GraphInstance(rng.normal(size=(n, d)), edges, 0)


def test_encode_inputs(rng):
    bb = Backbone.init(3, hidden=5, seed=1)
    assert np.array_equal(encode_inputs(GraphInstance(np.zeros((2, 3)), [], 0), bb).data, np.zeros((2, 5)))
    x = np.vstack([np.ones(3), np.ones(3), rng.normal(size=3)])
    h = encode_inputs(GraphInstance(x, [], 0), bb).data
    assert np.array_equal(h[0], h[1])
    bb.b_in.data = rng.normal(size=5)
    oracle = np.maximum(x @ bb.w_in.data + bb.b_in.data, 0)
    assert np.allclose(encode_inputs(GraphInstance(x, [], 0), bb).data, oracle, atol=1e-14)
    with pytest.raises(SchemaError):
        encode_inputs(GraphInstance(np.zeros((2, 4)), [], 0), bb)


def test_gcn_isolated_node_keeps_itself(rng):
    bb = Backbone.init(3, hidden=4, seed=0)
    g = graph(1, [], rng)
    h = ad.constant(rng.normal(size=(1, 4)))
    layer = bb.layers[0]
    out = gcn_forward(h, g, layer, activate=False).data
    assert np.allclose(out, h.data @ layer.weight.data + layer.bias.data)


def test_gcn_symmetric_pair(rng):
    bb = Backbone.init(3, hidden=4, seed=0)
    g = graph(2, [[0, 1]], rng)
    h = ad.constant(np.tile(rng.normal(size=4), (2, 1)))
    out = gcn_forward(h, g, bb.layers[0]).data
    assert np.array_equal(out[0], out[1])


def test_gcn_neighbourhood_mean_loop_oracle(rng):
    bb = Backbone.init(3, hidden=4, seed=0)
    bb.layers[0].bias.data = rng.normal(size=4)
    g = graph(5, [[0, 1], [1, 2], [0, 2], [3, 4]], rng)
    h = rng.normal(size=(5, 4))
    nbrs = g.neighbors()
    m = np.array([np.mean([h[u] for u in nbrs[v] + [v]], axis=0) for v in range(5)])
    oracle = np.maximum(m @ bb.layers[0].weight.data + bb.layers[0].bias.data, 0)
    assert np.allclose(gcn_forward(ad.constant(h), g, bb.layers[0]).data, oracle, atol=1e-13)
    # triangle nodes all see the same mean
    assert np.allclose(m[0], h[:3].mean(axis=0)) and np.allclose(m[1], m[2])


def test_no_edges_is_per_node_mlp(rng):
    bb = Backbone.init(3, hidden=4, num_layers=2, seed=0)
    g = graph(4, [], rng)
    H = backbone_forward(g, bb).data
    for v in range(4):
        alone = backbone_forward(GraphInstance(g.features[v:v + 1], [], 0), bb).data
        assert np.allclose(H[v], alone[0], atol=1e-14)


def test_one_layer_backbone_is_composition(rng):
    bb = Backbone.init(3, hidden=4, num_layers=1, seed=0)
    g = graph(4, [[0, 1], [2, 3]], rng)
    manual = gcn_forward(encode_inputs(g, bb), g, bb.layers[0], activate=False)
    assert np.array_equal(backbone_forward(g, bb).data, manual.data)


def test_frozen_backbone_gets_no_gradient(rng):
    bb = Backbone.init(3, hidden=4, seed=0).freeze()
    g = graph(4, [[0, 1], [1, 2]], rng)
    w = ad.parameter(rng.normal(size=(4, 2)))
    ad.backward(ad.sum(ad.matmul(backbone_forward(g, bb), w)))
    assert all(p.grad is None and not p.requires_grad for p in bb.parameters())
    assert w.grad is not None


def test_backbone_gradients(rng):
    bb = Backbone.init(3, hidden=4, num_layers=2, seed=0)
    for p in bb.parameters():
        p.data = p.data + rng.normal(scale=0.3, size=p.shape)
    g = collate([graph(4, [[0, 1], [1, 2], [2, 3]], rng), graph(3, [[0, 2]], rng)])
    w = ad.constant(rng.normal(size=(4, 2)))
    fd_check(lambda: ad.softmax_cross_entropy(ad.matmul(readout_mean(backbone_forward(g, bb), g), w), [0, 1]),
             bb.parameters(), rng)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(0, 10_000))
def test_permutation_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    bb = Backbone.init(3, hidden=6, seed=seed % 7)
    edges = rng.integers(0, n, size=(2 * n, 2))
    g = GraphInstance(rng.normal(size=(n, 3)), edges.tolist(), 0)
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    gp = GraphInstance(g.features[perm], inv[g.edges].tolist(), 0)
    H, Hp = backbone_forward(g, bb).data, backbone_forward(gp, bb).data
    assert np.allclose(Hp, H[perm], atol=1e-9)
    assert np.allclose(readout_mean(ad.constant(Hp)).data, readout_mean(ad.constant(H)).data, atol=1e-9)


def test_readout_examples(rng):
    r = rng.normal(size=(1, 4))
    assert np.array_equal(readout_mean(ad.constant(r)).data, r)
    assert np.allclose(readout_mean(ad.constant(np.vstack([r, -r]))).data, 0.0)
    H = rng.normal(size=(7, 4))
    assert np.allclose(readout_mean(ad.constant(H)).data[0], H.mean(axis=0), atol=1e-15)
    with pytest.raises(ValueError):
        readout_mean(ad.constant(np.zeros((0, 4))))


def test_batched_readout_matches_per_graph(rng):
    bb = Backbone.init(3, hidden=4, seed=0)
    gs = [graph(n, [[0, n - 1]], rng) for n in (2, 5, 3)]
    b = collate(gs)
    Z = readout_mean(backbone_forward(b, bb), b).data
    for i, g in enumerate(gs):
        assert np.allclose(Z[i], readout_mean(backbone_forward(g, bb)).data[0], atol=1e-13)


@pytest.fixture(scope="module")
def synth():
    # mixed-cluster graphs: edges are predictable from node features
    return generate_synthetic(benchmark_spec(seed=5, graphs_per_class=40))


def test_initial_edge_loss_near_ln2(synth):
    bb = Backbone.init(synth.feature_dim, seed=5)
    assert abs(edge_prediction_loss(synth, bb, seed=5) - np.log(2.0)) <= 0.15


def test_pretraining_generalises_to_held_out_graphs(synth):
    bb = Backbone.init(synth.feature_dim, seed=5)
    res = pretrain_edge_prediction(synth, bb, epochs=30, seed=5)
    assert res.epoch_losses[-1] < res.epoch_losses[0]
    held = generate_synthetic(benchmark_spec(seed=99, graphs_per_class=40))
    assert edge_prediction_auc(held, bb, seed=1) >= 0.75


def test_pretraining_guards(rng):
    ds = generate_synthetic(n_classes=2, graphs_per_class=2, seed=0)
    with pytest.raises(PretrainError):
        pretrain_edge_prediction(ds, Backbone.init(ds.feature_dim, seed=0), neg_ratio=0)
    with pytest.raises(PretrainError):
        pretrain_edge_prediction(ds, Backbone.init(ds.feature_dim, seed=0).freeze())
    no_edges = Dataset([graph(3, [], rng), graph(1, [], rng)])
    with pytest.raises(PretrainError):
        pretrain_edge_prediction(no_edges, Backbone.init(3, seed=0))


def test_pretraining_zero_epochs_is_identity(synth):
    bb = Backbone.init(synth.feature_dim, seed=2)
    before = [p.data.copy() for p in bb.parameters()]
    pretrain_edge_prediction(synth, bb, epochs=0)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, bb.parameters()))


def test_checkpoint_round_trip(tmp_path, synth, rng):
    bb = Backbone.init(synth.feature_dim, hidden=8, num_layers=3, seed=1)
    for p in bb.parameters():
        p.data = rng.normal(size=p.shape)
    checkpoint_save(tmp_path / "bb.ckpt", bb)
    back = checkpoint_load(tmp_path / "bb.ckpt", hidden=8, d_in=synth.feature_dim)
    assert len(back.layers) == 3
    for g in synth.graphs[:5]:
        assert np.array_equal(backbone_forward(g, bb).data, backbone_forward(g, back).data)


def test_checkpoint_dim_mismatch(tmp_path):
    checkpoint_save(tmp_path / "bb.ckpt", Backbone.init(4, hidden=8))
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "bb.ckpt", hidden=16)
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "bb.ckpt", d_in=5)


def test_checkpoint_corruption_and_version(tmp_path):
    path = tmp_path / "bb.ckpt"
    checkpoint_save(path, Backbone.init(4, hidden=8))
    payload = json.loads(path.read_text())
    payload["body"]["params"]["encoder.bias"][0] = 1.0
    path.write_text(json.dumps(payload))
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint_load(path)
    payload["version"] = 99
    path.write_text(json.dumps(payload))
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_load(path)
    path.write_text("{truncated")
    with pytest.raises(CheckpointError):
        checkpoint_load(path)
