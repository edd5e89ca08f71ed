from bingo.gnn.model import (
    EmptyGraph,
    GraphBatch,
    GraphTensors,
    ModelParams,
    ShapeMismatch,
    TwinSample,
    adjacency,
    conv_forward,
    dropout_mask,
    loss_and_grads,
    make_batch,
    model_forward,
    pool,
    predict_proba,
)
from bingo.gnn.train import Adam, EmptyDataset, Metrics, TrainConfig, dataset_loss, evaluate, predict, train

__all__ = [
    "Adam",
    "EmptyDataset",
    "EmptyGraph",
    "GraphBatch",
    "GraphTensors",
    "Metrics",
    "ModelParams",
    "ShapeMismatch",
    "TrainConfig",
    "TwinSample",
    "adjacency",
    "conv_forward",
    "dataset_loss",
    "dropout_mask",
    "evaluate",
    "loss_and_grads",
    "make_batch",
    "model_forward",
    "pool",
    "predict",
    "predict_proba",
    "train",
]
