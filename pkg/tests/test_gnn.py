import math
from fractions import Fraction

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from bingo.gnn import (
    EmptyDataset,
    EmptyGraph,
    GraphTensors,
    Metrics,
    ModelParams,
    ShapeMismatch,
    TrainConfig,
    TwinSample,
    adjacency,
    conv_forward,
    dropout_mask,
    evaluate,
    loss_and_grads,
    make_batch,
    model_forward,
    pool,
    train,
)
from bingo.tensorio import CheckpointError


def random_graph(rng, n=None, dim=8, max_edges=12):
    n = n or int(rng.integers(1, 11))
    edges = []
    for _ in range(3):
        m = int(rng.integers(0, max_edges + 1))
        edges.append(rng.integers(0, n, size=(m, 2)))
    return GraphTensors(rng.standard_normal((n, dim)), tuple(edges))


def random_twin(rng, dim=8, label=None):
    return TwinSample(random_graph(rng, dim=dim), random_graph(rng, dim=dim),
                      label if label is not None else int(rng.integers(0, 2)))


def dense_conv(g, weights):
    n = g.num_nodes
    outs = []
    for k, w in enumerate(weights):
        a = np.zeros((n, n))
        for s, d in g.edges[k]:
            a[s, d] = 1.0
        outs.append(np.maximum((a + np.eye(n)) @ g.nodes.astype(np.float64) @ w.astype(np.float64), 0))
    return np.concatenate(outs, axis=1)


def small_params(seed=0, dim=8):
    return ModelParams.init(seed, embed_dim=dim, channel_width=4, hidden=(8, 4))


# ---------------------------------------------------------------- convolution


def test_single_node_identity():
    v = np.array([[0.5, 2.0, 0.0]])
    g = GraphTensors(v, tuple(np.zeros((0, 2), int) for _ in range(3)))
    adj = [adjacency(e, 1) for e in g.edges]
    out = conv_forward(adj, v, [np.eye(3)] * 3)
    assert np.array_equal(out, np.hstack([v, v, v]))


def test_cfg_edge_only_other_channels_self_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3))
    ws = [rng.standard_normal((3, 2)) for _ in range(3)]
    adj = [adjacency(np.array([[0, 1]]), 2), adjacency(np.zeros((0, 2)), 2), adjacency(np.zeros((0, 2)), 2)]
    out = conv_forward(adj, x, ws)
    assert np.allclose(out[:, 2:4], np.maximum(x @ ws[1], 0))
    assert np.allclose(out[:, 4:6], np.maximum(x @ ws[2], 0))
    # row 0 gathers its out-neighbour (node 1)
    assert np.allclose(out[0, :2], np.maximum((x[0] + x[1]) @ ws[0], 0))
    assert np.allclose(out[1, :2], np.maximum(x[1] @ ws[0], 0))


def test_conv_matches_dense_float64():
    rng = np.random.default_rng(1)
    for _ in range(50):
        g = random_graph(rng)
        ws = [rng.standard_normal((8, 5)) for _ in range(3)]
        out = conv_forward([adjacency(e, g.num_nodes) for e in g.edges], g.nodes, ws)
        assert np.max(np.abs(out - dense_conv(g, ws))) <= 1e-12


def test_conv_shape_mismatch():
    x = np.zeros((2, 3))
    with pytest.raises(ShapeMismatch):
        conv_forward([adjacency(np.zeros((0, 2)), 2)] * 3, x, [np.zeros((4, 2))] * 3)
    with pytest.raises(ShapeMismatch):
        conv_forward([adjacency(np.zeros((0, 2)), 3)] * 3, x, [np.zeros((3, 2))] * 3)
    with pytest.raises(ShapeMismatch):
        GraphTensors(x, (np.array([[0, 5]]), np.zeros((0, 2), int), np.zeros((0, 2), int)))


def test_duplicate_edges_collapse():
    a = adjacency(np.array([[0, 1], [0, 1]]), 2)
    assert a.toarray().tolist() == [[0, 1], [0, 0]]


# ---------------------------------------------------------------- pooling


def test_pool_basic():
    assert np.array_equal(pool(np.array([[1.0, 2.0]])), [1.0, 2.0])
    assert np.array_equal(pool(np.array([[1.0, 2.0], [1.0, 2.0]])), [1.0, 2.0])
    with pytest.raises(EmptyGraph):
        pool(np.zeros((0, 3)))


def test_pool_permutation_invariant():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((7, 5))
    for _ in range(100):
        assert np.allclose(pool(x[rng.permutation(7)]), pool(x))


def test_zero_context_node_only_changes_mean_denominator():
    rng = np.random.default_rng(3)
    params = small_params(3)
    g = random_graph(rng, n=4)
    n = g.num_nodes
    g2 = GraphTensors(np.vstack([g.nodes, np.zeros((1, 8))]), g.edges)
    b1 = make_batch([TwinSample(g, g, 0)])
    b2 = make_batch([TwinSample(g2, g2, 0)])
    from bingo.gnn.model import _side_forward

    p1, c1 = _side_forward(params, b1.pre)
    p2, _ = _side_forward(params, b2.pre)
    # an isolated zero row stays zero through every ReLU(x W) layer (no biases)
    last = c1[-1]
    final_rows = np.concatenate([np.maximum(z, 0) for z in last[1]], axis=1)
    assert np.allclose(p1, final_rows.sum(axis=0) / n)
    assert np.allclose(p2, final_rows.sum(axis=0) / (n + 1))


# ---------------------------------------------------------------- forward


def test_probabilities_sum_to_one():
    rng = np.random.default_rng(4)
    params = ModelParams.init(0)
    for _ in range(50):
        p0, p1 = model_forward(params, random_twin(rng, dim=128))
        assert abs(p0 + p1 - 1) <= 1e-9


def test_pre_post_order_matters():
    rng = np.random.default_rng(5)
    params = small_params(1)
    t = random_twin(rng)
    swapped = TwinSample(t.post, t.pre, t.label)
    assert not np.isclose(model_forward(params, t)[1], model_forward(params, swapped)[1])


def test_zero_mlp_is_uniform():
    rng = np.random.default_rng(6)
    params = small_params(2)
    for k in params.arrays:
        if k.startswith("mlp."):
            params.arrays[k][...] = 0
    assert model_forward(params, random_twin(rng)) == (0.5, 0.5)


def test_empty_side_rejected():
    rng = np.random.default_rng(7)
    empty = GraphTensors(np.zeros((0, 8)), tuple(np.zeros((0, 2), int) for _ in range(3)))
    with pytest.raises(EmptyGraph):
        model_forward(small_params(), TwinSample(empty, random_graph(rng)))


def test_node_permutation_equivariance():
    rng = np.random.default_rng(8)
    params = small_params(4)
    for _ in range(20):
        t = random_twin(rng)
        perm = rng.permutation(t.pre.num_nodes)
        inv = np.argsort(perm)
        pre = GraphTensors(t.pre.nodes[perm], tuple(inv[e] for e in t.pre.edges))
        assert np.allclose(model_forward(params, t), model_forward(params, TwinSample(pre, t.post)), atol=1e-6)


def test_dropout_mask_scaling():
    m = dropout_mask(np.random.default_rng(0), (1000, 10), 0.5)
    assert set(np.unique(m)) <= {0.0, 2.0}
    assert abs(m.mean() - 1.0) < 0.05


# ---------------------------------------------------------------- loss and gradients


def test_uniform_output_loss_is_ln2():
    rng = np.random.default_rng(9)
    params = small_params()
    for k in params.arrays:
        if k.startswith("mlp."):
            params.arrays[k][...] = 0
    loss, _ = loss_and_grads(params, make_batch([random_twin(rng) for _ in range(3)]), train_mode=False)
    assert math.isclose(loss, math.log(2), rel_tol=1e-12)


def test_saturated_logits_loss_to_zero():
    rng = np.random.default_rng(10)
    params = small_params()
    params.arrays["mlp.W2"][...] = 0
    params.arrays["mlp.b2"][...] = [-30.0, 30.0]
    loss, _ = loss_and_grads(params, make_batch([random_twin(rng, label=1)]), train_mode=False)
    assert loss < 1e-20


def gradient_check(params, batch, mask, h=1e-5, entries=None, rng=None):
    """Per-group relative error ||g_a - g_n|| / (||g_a|| + ||g_n||)."""
    _, grads = loss_and_grads(params, batch, mask=mask)
    worst = {}
    for name, arr in params.arrays.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size) if entries is None else rng.choice(flat.size, min(entries, flat.size), replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up, _ = loss_and_grads(params, batch, mask=mask)
            flat[i] = orig - h
            down, _ = loss_and_grads(params, batch, mask=mask)
            flat[i] = orig
            num[j] = (up - down) / (2 * h)
        ana = grads[name].reshape(-1)[idx]
        denom = np.linalg.norm(ana) + np.linalg.norm(num)
        worst[name] = 0.0 if denom == 0 else float(np.linalg.norm(ana - num) / denom)
    return worst


def test_gradient_every_entry_small_model():
    rng = np.random.default_rng(11)
    params = small_params(5)
    batch = make_batch([random_twin(rng), random_twin(rng)])
    mask = dropout_mask(rng, (2, 2 * 3 * params.channel_width), 0.5)
    errors = gradient_check(params, batch, mask)
    assert len(errors) == 15
    assert max(errors.values()) <= 1e-4, errors


def test_gradient_default_dims_sampled():
    rng = np.random.default_rng(12)
    params = ModelParams.init(6)
    batch = make_batch([random_twin(rng, dim=128), random_twin(rng, dim=128)])
    mask = dropout_mask(rng, (2, 384), 0.5)
    errors = gradient_check(params, batch, mask, entries=12, rng=rng)
    assert max(errors.values()) <= 1e-4, errors


def test_batched_loss_is_mean_of_singles():
    rng = np.random.default_rng(13)
    params = small_params(7)
    twins = [random_twin(rng) for _ in range(4)]
    total, grads = loss_and_grads(params, make_batch(twins), train_mode=False)
    singles = [loss_and_grads(params, make_batch([t]), train_mode=False) for t in twins]
    assert math.isclose(total, np.mean([s[0] for s in singles]), rel_tol=1e-12)
    for k in grads:
        assert np.allclose(grads[k], np.mean([s[1][k] for s in singles], axis=0), atol=1e-12)


# ---------------------------------------------------------------- training


def toy_dataset(rng, n=40):
    # label = 1 iff the post graph has an extra node feature direction
    out = []
    for i in range(n):
        label = i % 2
        pre = random_graph(rng)
        post_nodes = pre.nodes.copy()
        post_nodes[:, 0] += 3.0 if label else -3.0
        out.append(TwinSample(pre, GraphTensors(post_nodes, pre.edges), label, f"c{i}"))
    return out


def test_lr_zero_leaves_params_bitwise():
    rng = np.random.default_rng(14)
    params = small_params(8)
    before = {k: v.copy() for k, v in params.arrays.items()}
    train(params, toy_dataset(rng, 10), TrainConfig(lr=0.0, max_epochs=2, batch_size=4))
    assert all(np.array_equal(before[k], params.arrays[k]) for k in before)


def test_training_deterministic():
    data = toy_dataset(np.random.default_rng(15))
    runs = [train(small_params(9), data, TrainConfig(max_epochs=3, batch_size=8, seed=3))[1] for _ in range(2)]
    assert runs[0] == runs[1]


def test_training_learns_toy_task():
    data = toy_dataset(np.random.default_rng(16), 60)
    params, hist = train(small_params(10), data, TrainConfig(max_epochs=40, batch_size=16, lr=0.01))
    assert hist[-1]["train_eval_loss"] < hist[0]["train_eval_loss"]
    assert evaluate(params, data).accuracy >= 0.9


def test_siamese_branches_share_weights():
    # swapping the sides of every sample updates the same tensors
    data = toy_dataset(np.random.default_rng(17), 8)
    swapped = [TwinSample(t.post, t.pre, t.label) for t in data]
    p = small_params(11)
    _, grads_a = loss_and_grads(p, make_batch(data), train_mode=False)
    _, grads_b = loss_and_grads(p, make_batch(swapped), train_mode=False)
    assert set(grads_a) == set(grads_b) == set(p.arrays)
    assert not any(k.startswith(("pre", "post")) for k in p.arrays)


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        train(small_params(), [], TrainConfig(max_epochs=1))
    with pytest.raises(EmptyDataset):
        evaluate(small_params(), [])


@pytest.mark.parametrize("kw", [{"lr": -1.0}, {"dropout": 1.0}, {"batch_size": 0}])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.batch_size, c.beta1, c.beta2, c.lr, c.dropout, c.adam_eps) == (128, 0.9, 0.99, 0.001, 0.5, 1e-8)


# ---------------------------------------------------------------- metrics


def test_confusion_fixture():
    m = Metrics(tp=5, fn=2, fp=1, tn=12)
    assert Fraction(m.accuracy).limit_denominator(1000) == Fraction(17, 20)
    assert abs(m.accuracy - 0.85) <= 1e-12
    assert abs(m.f1 - 10 / 13) <= 1e-12
    assert abs(m.fnr - 2 / 7) <= 1e-12
    assert abs(m.fpr - 1 / 13) <= 1e-12


def test_perfect_predictions():
    m = Metrics.from_predictions([1, 0, 1, 0], [1, 0, 1, 0])
    assert (m.accuracy, m.fnr, m.fpr) == (1.0, 0.0, 0.0)


def test_undefined_rates():
    m = Metrics.from_predictions([0, 0], [0, 1])
    assert m.fnr is None and m.to_json()["fnr"] is None
    assert m.fpr == 0.5


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50))
def test_metrics_identities(pairs):
    labels, preds = zip(*pairs)
    m = Metrics.from_predictions(labels, preds)
    assert m.total == len(pairs)
    assert m.accuracy == sum(a == b for a, b in pairs) / len(pairs)


def test_threshold_at_half():
    rng = np.random.default_rng(18)
    params = small_params()
    for k in params.arrays:
        if k.startswith("mlp."):
            params.arrays[k][...] = 0
    # p1 == 0.5 exactly, so every sample is predicted Security
    m = evaluate(params, [random_twin(rng, label=0) for _ in range(3)])
    assert m.fp == 3


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    p = ModelParams.init(3)
    p.save(tmp_path / "m.bin", embedder="hashed")
    back = ModelParams.load(tmp_path / "m.bin")
    assert list(back.arrays) == list(p.arrays)
    for k in p.arrays:
        assert np.array_equal(back.arrays[k], p.arrays[k].astype(np.float32))
    assert back.meta["embedder"] == "hashed"
    assert (tmp_path / "m.bin").read_bytes().startswith(b"bingo-gnn/1")


def test_checkpoint_bad_version(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"not-a-checkpoint\n")
    with pytest.raises(CheckpointError):
        ModelParams.load(path)


def test_sparse_adjacency_is_sparse():
    assert sp.issparse(make_batch([random_twin(np.random.default_rng(0))]).pre.adj[0])
