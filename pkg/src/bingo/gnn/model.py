"""Siamese multi-edge-type graph convolution classifier.

Each convolution layer runs one channel per edge type (CFG, CDG, DDG)::

    N' = [ relu((A_0 + I) N W_0) | relu((A_1 + I) N W_1) | relu((A_2 + I) N W_2) ]

with ``A_k[i, j] = 1`` for an edge ``i -> j``, so node ``i`` aggregates its
out-neighbours and itself.  Three such layers feed a global mean pool; the
pooled pre- and post-patch vectors are concatenated, passed through dropout
and a 3-layer MLP, and softmaxed into ``(p_non_security, p_security)``.

Both branches use the same parameter arrays.  Gradients are derived by hand.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from bingo.tensorio import read_blob, write_blob

GNN_VERSION = "bingo-gnn/1"
NUM_CHANNELS = 3
NUM_LAYERS = 3


class ShapeMismatch(ValueError):
    pass


class EmptyGraph(ValueError):
    pass


# ---------------------------------------------------------------- data


@dataclass
class GraphTensors:
    """One side of a twin graph: node features and per-type directed edges."""

    nodes: np.ndarray
    edges: tuple[np.ndarray, np.ndarray, np.ndarray]

    def __post_init__(self):
        n = self.nodes.shape[0]
        if len(self.edges) != NUM_CHANNELS:
            raise ShapeMismatch(f"expected {NUM_CHANNELS} edge arrays")
        for e in self.edges:
            if e.size and (e.min() < 0 or e.max() >= n):
                raise ShapeMismatch("edge endpoint outside the node range")
        if not np.all(np.isfinite(self.nodes)):
            raise ValueError("node features must be finite")

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[0]


@dataclass
class TwinSample:
    pre: GraphTensors
    post: GraphTensors
    label: int | None = None
    commit_id: str = ""


def adjacency(edges: np.ndarray, n: int, dtype=np.float64) -> sp.csr_matrix:
    """Sparse ``A`` with ``A[src, dst] = 1`` (duplicates collapse)."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    a = sp.csr_matrix((np.ones(len(edges), dtype=dtype), (edges[:, 0], edges[:, 1])), shape=(n, n))
    a.data[:] = 1
    return a


@dataclass
class SideBatch:
    x: np.ndarray                 # stacked node features
    adj: list[sp.csr_matrix]      # block-diagonal A_k, self-loops not included
    pool: sp.csr_matrix           # (graphs, nodes) mean-pooling operator
    offsets: np.ndarray           # first node row of each graph


@dataclass
class GraphBatch:
    pre: SideBatch
    post: SideBatch
    labels: np.ndarray | None

    def __len__(self):
        return self.pre.pool.shape[0]


def _side_batch(graphs: Sequence[GraphTensors], dtype) -> SideBatch:
    sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    if np.any(sizes == 0):
        raise EmptyGraph("graph with no nodes")
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    total = int(sizes.sum())
    x = np.concatenate([g.nodes for g in graphs]).astype(dtype, copy=False)
    adj = []
    for k in range(NUM_CHANNELS):
        parts = [g.edges[k].reshape(-1, 2) + off for g, off in zip(graphs, offsets)]
        adj.append(adjacency(np.concatenate(parts) if parts else np.zeros((0, 2)), total, dtype))
    rows = np.repeat(np.arange(len(graphs)), sizes)
    pool = sp.csr_matrix((np.repeat(1.0 / sizes, sizes).astype(dtype), (rows, np.arange(total))),
                         shape=(len(graphs), total))
    return SideBatch(x, adj, pool, offsets)


def make_batch(samples: Sequence[TwinSample], dtype=np.float64) -> GraphBatch:
    if not samples:
        raise ValueError("empty batch")
    labels = None
    if all(s.label is not None for s in samples):
        labels = np.array([s.label for s in samples], dtype=np.int64)
    return GraphBatch(_side_batch([s.pre for s in samples], dtype),
                      _side_batch([s.post for s in samples], dtype), labels)


# ---------------------------------------------------------------- parameters


@dataclass
class ModelParams:
    arrays: "OrderedDict[str, np.ndarray]"
    embed_dim: int = 128
    channel_width: int = 64
    hidden: tuple[int, int] = (128, 64)
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, seed: int = 0, embed_dim: int = 128, channel_width: int = 64,
             hidden: tuple[int, int] = (128, 64), dtype=np.float64) -> "ModelParams":
        rng = np.random.default_rng(seed)
        arrays: OrderedDict[str, np.ndarray] = OrderedDict()

        def glorot(fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)

        width = NUM_CHANNELS * channel_width
        for h in range(NUM_LAYERS):
            fan_in = embed_dim if h == 0 else width
            for k in range(NUM_CHANNELS):
                arrays[f"conv{h}.W{k}"] = glorot(fan_in, channel_width)
        dims = [2 * width, *hidden, 2]
        for i in range(3):
            arrays[f"mlp.W{i}"] = glorot(dims[i], dims[i + 1])
            arrays[f"mlp.b{i}"] = np.zeros(dims[i + 1], dtype=dtype)
        return cls(arrays, embed_dim, channel_width, tuple(hidden), {"seed": seed})

    def conv_weights(self, h: int) -> list[np.ndarray]:
        return [self.arrays[f"conv{h}.W{k}"] for k in range(NUM_CHANNELS)]

    def copy(self) -> "ModelParams":
        return ModelParams(OrderedDict((k, v.copy()) for k, v in self.arrays.items()),
                           self.embed_dim, self.channel_width, self.hidden, dict(self.meta))

    def astype(self, dtype) -> "ModelParams":
        out = self.copy()
        for k in out.arrays:
            out.arrays[k] = out.arrays[k].astype(dtype)
        return out

    def save(self, path, **extra) -> None:
        header = {"embed_dim": self.embed_dim, "channel_width": self.channel_width,
                  "hidden": list(self.hidden), **self.meta, **extra}
        write_blob(path, GNN_VERSION, header, self.arrays)

    @classmethod
    def load(cls, path) -> "ModelParams":
        header, tensors = read_blob(path, GNN_VERSION)
        params = cls(OrderedDict((k, v.astype(np.float64)) for k, v in tensors.items()),
                     header["embed_dim"], header["channel_width"], tuple(header["hidden"]),
                     {k: v for k, v in header.items()
                      if k not in ("embed_dim", "channel_width", "hidden", "tensors")})
        ref = cls.init(0, params.embed_dim, params.channel_width, params.hidden)
        if list(ref.arrays) != list(params.arrays) or any(
            ref.arrays[k].shape != params.arrays[k].shape for k in ref.arrays
        ):
            raise ShapeMismatch(f"{path}: tensor layout does not match the model")
        return params


# ---------------------------------------------------------------- forward pieces


def conv_forward(adj: Sequence, nodes: np.ndarray, weights: Sequence[np.ndarray]) -> np.ndarray:
    """One multi-channel convolution; ``adj`` holds the three ``A_k``
    (sparse or dense, without self-loops)."""
    if len(adj) != NUM_CHANNELS or len(weights) != NUM_CHANNELS:
        raise ShapeMismatch("need one adjacency and one weight matrix per edge type")
    n = nodes.shape[0]
    outs = []
    for a, w in zip(adj, weights):
        if a.shape != (n, n) or w.shape[0] != nodes.shape[1]:
            raise ShapeMismatch(f"adjacency {a.shape} / weight {w.shape} vs nodes {nodes.shape}")
        y = nodes @ w
        z = a @ y + y
        outs.append(np.maximum(z, 0))
    return np.concatenate(outs, axis=1)


def pool(nodes: np.ndarray) -> np.ndarray:
    if nodes.shape[0] == 0:
        raise EmptyGraph("cannot pool an empty graph")
    return nodes.mean(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _side_forward(params: ModelParams, side: SideBatch):
    x = side.x
    cache = []
    for h in range(NUM_LAYERS):
        zs = []
        for k, w in enumerate(params.conv_weights(h)):
            y = x @ w
            zs.append(side.adj[k] @ y + y)
        out = np.concatenate([np.maximum(z, 0) for z in zs], axis=1)
        cache.append((x, zs))
        x = out
    pooled = side.pool @ x
    return pooled, cache


def _side_backward(params: ModelParams, side: SideBatch, cache, d_pooled, grads):
    dx = side.pool.T @ d_pooled
    width = params.channel_width
    for h in reversed(range(NUM_LAYERS)):
        x_in, zs = cache[h]
        dx_in = np.zeros_like(x_in)
        for k, w in enumerate(params.conv_weights(h)):
            dz = dx[:, k * width:(k + 1) * width] * (zs[k] > 0)
            dy = side.adj[k].T @ dz + dz
            grads[f"conv{h}.W{k}"] += x_in.T @ dy
            dx_in += dy @ w.T
        dx = dx_in


def dropout_mask(rng: np.random.Generator, shape, rate: float, dtype=np.float64) -> np.ndarray:
    """Inverted dropout: kept units are scaled by 1/(1-rate)."""
    if rate <= 0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def _forward(params: ModelParams, batch: GraphBatch, mask: np.ndarray | None):
    g_pre, c_pre = _side_forward(params, batch.pre)
    g_post, c_post = _side_forward(params, batch.post)
    x = np.concatenate([g_pre, g_post], axis=1)
    if mask is not None:
        x = x * mask
    a = params.arrays
    z0 = x @ a["mlp.W0"] + a["mlp.b0"]
    h0 = np.maximum(z0, 0)
    z1 = h0 @ a["mlp.W1"] + a["mlp.b1"]
    h1 = np.maximum(z1, 0)
    logits = h1 @ a["mlp.W2"] + a["mlp.b2"]
    probs = softmax(logits)
    return probs, (c_pre, c_post, x, z0, h0, z1, h1, logits)


def predict_proba(params: ModelParams, batch: GraphBatch) -> np.ndarray:
    probs, _ = _forward(params, batch, None)
    return probs


def model_forward(params: ModelParams, twin: TwinSample, train_mode: bool = False,
                  rng: np.random.Generator | None = None, dropout: float = 0.5) -> tuple[float, float]:
    """``(p_non_security, p_security)`` for one twin graph."""
    batch = make_batch([twin], dtype=params.arrays["mlp.W0"].dtype)
    mask = None
    if train_mode:
        rng = rng if rng is not None else np.random.default_rng()
        mask = dropout_mask(rng, (1, 2 * NUM_CHANNELS * params.channel_width), dropout)
    probs, _ = _forward(params, batch, mask)
    return float(probs[0, 0]), float(probs[0, 1])


def loss_and_grads(params: ModelParams, batch: GraphBatch, dropout: float = 0.5,
                   rng: np.random.Generator | None = None, mask: np.ndarray | None = None,
                   train_mode: bool = True) -> tuple[float, "OrderedDict[str, np.ndarray]"]:
    """Mean cross-entropy over the batch and its exact gradient.

    Pass ``mask`` to fix the dropout mask (shape ``(batch, 2*3*width)``);
    otherwise one is drawn from ``rng`` when ``train_mode`` is set.
    """
    if batch.labels is None:
        raise ValueError("batch has unlabeled samples")
    dtype = params.arrays["mlp.W0"].dtype
    if mask is None and train_mode and dropout > 0:
        rng = rng if rng is not None else np.random.default_rng()
        mask = dropout_mask(rng, (len(batch), 2 * NUM_CHANNELS * params.channel_width), dropout, dtype)
    probs, (c_pre, c_post, x, z0, h0, z1, h1, logits) = _forward(params, batch, mask)
    b = len(batch)
    idx = np.arange(b)
    p_gold = probs[idx, batch.labels]
    loss = float(-np.mean(np.log(np.maximum(p_gold, np.finfo(dtype).tiny))))

    a = params.arrays
    grads: OrderedDict[str, np.ndarray] = OrderedDict((k, np.zeros_like(v)) for k, v in a.items())
    d_logits = probs.copy()
    d_logits[idx, batch.labels] -= 1.0
    d_logits /= b
    grads["mlp.W2"] += h1.T @ d_logits
    grads["mlp.b2"] += d_logits.sum(axis=0)
    d_z1 = (d_logits @ a["mlp.W2"].T) * (z1 > 0)
    grads["mlp.W1"] += h0.T @ d_z1
    grads["mlp.b1"] += d_z1.sum(axis=0)
    d_z0 = (d_z1 @ a["mlp.W1"].T) * (z0 > 0)
    grads["mlp.W0"] += x.T @ d_z0
    grads["mlp.b0"] += d_z0.sum(axis=0)
    d_x = d_z0 @ a["mlp.W0"].T
    if mask is not None:
        d_x = d_x * mask
    width = NUM_CHANNELS * params.channel_width
    _side_backward(params, batch.pre, c_pre, d_x[:, :width], grads)
    _side_backward(params, batch.post, c_post, d_x[:, width:], grads)
    return loss, grads
