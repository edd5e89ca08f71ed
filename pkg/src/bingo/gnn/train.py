from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from bingo.gnn.model import (
    ModelParams,
    TwinSample,
    loss_and_grads,
    make_batch,
    predict_proba,
)
from bingo.patchdiff import EmptyDataset


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.99
    lr: float = 0.001
    dropout: float = 0.5
    max_epochs: int = 50
    seed: int = 0
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")


@dataclass(frozen=True)
class Metrics:
    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    @staticmethod
    def _ratio(num, den):
        return None if den == 0 else num / den

    @property
    def accuracy(self) -> float | None:
        return self._ratio(self.tp + self.tn, self.total)

    @property
    def f1(self) -> float | None:
        return self._ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    @property
    def fnr(self) -> float | None:
        return self._ratio(self.fn, self.tp + self.fn)

    @property
    def fpr(self) -> float | None:
        return self._ratio(self.fp, self.fp + self.tn)

    @classmethod
    def from_predictions(cls, labels: Sequence[int], predicted: Sequence[int]) -> "Metrics":
        labels = np.asarray(labels)
        predicted = np.asarray(predicted)
        return cls(
            tp=int(np.sum((labels == 1) & (predicted == 1))),
            fn=int(np.sum((labels == 1) & (predicted == 0))),
            fp=int(np.sum((labels == 0) & (predicted == 1))),
            tn=int(np.sum((labels == 0) & (predicted == 0))),
        )

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "f1": self.f1,
            "fnr": self.fnr,
            "fpr": self.fpr,
            "confusion": {"tp": self.tp, "fn": self.fn, "fp": self.fp, "tn": self.tn},
        }


class Adam:
    def __init__(self, params: ModelParams, lr=0.001, beta1=0.9, beta2=0.99, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, params: ModelParams, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params.arrays[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def predict(params: ModelParams, samples: Sequence[TwinSample], batch_size: int = 256) -> np.ndarray:
    """Probability of the security class for every sample."""
    out = []
    for i in range(0, len(samples), batch_size):
        out.append(predict_proba(params, make_batch(samples[i:i + batch_size]))[:, 1])
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(params: ModelParams, samples: Sequence[TwinSample], threshold: float = 0.5) -> Metrics:
    if not samples:
        raise EmptyDataset("nothing to evaluate")
    p1 = predict(params, samples)
    labels = [s.label for s in samples]
    if any(lbl is None for lbl in labels):
        raise ValueError("evaluation needs labeled samples")
    return Metrics.from_predictions(labels, (p1 >= threshold).astype(int))


def dataset_loss(params: ModelParams, samples: Sequence[TwinSample], batch_size: int = 256) -> float:
    """Mean cross-entropy without dropout."""
    total = 0.0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        loss, _ = loss_and_grads(params, make_batch(chunk), train_mode=False)
        total += loss * len(chunk)
    return total / len(samples)


def _round(x):
    return None if x is None else float(x)


def train(params: ModelParams, samples: Sequence[TwinSample], cfg: TrainConfig = TrainConfig(),
          test_samples: Sequence[TwinSample] | None = None, log=None) -> tuple[ModelParams, list[dict]]:
    """Adam training with a seeded per-epoch shuffle.

    ``params`` is updated in place and returned.  Each history record holds
    the epoch's mean mini-batch loss (with dropout), the dropout-free loss
    on the training set, and test metrics when ``test_samples`` is given.
    """
    if not samples:
        raise EmptyDataset("no training samples")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(samples))
        batch_losses = 0.0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [samples[i] for i in order[start:start + cfg.batch_size]]
            batch = make_batch(chunk)
            loss, grads = loss_and_grads(params, batch, cfg.dropout, rng)
            opt.step(params, grads)
            batch_losses += loss * len(chunk)
        record = {
            "epoch": epoch,
            "train_loss": batch_losses / len(samples),
            "train_eval_loss": dataset_loss(params, samples),
        }
        if test_samples:
            record["test"] = evaluate(params, test_samples).to_json()
        history.append(record)
        if log is not None:
            log(record)
    params.meta["epoch"] = params.meta.get("epoch", 0) + cfg.max_epochs
    return params, history
