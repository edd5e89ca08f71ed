"""Training-history figures.  Uses the Agg backend so it runs headless."""

from __future__ import annotations

import csv
import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

HISTORY_COLUMNS = ("epoch", "train_loss", "train_eval_loss", "test_accuracy", "test_f1", "test_fnr", "test_fpr")

_STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
    "svg.hashsalt": "bingo",
}


def history_rows(history: dict) -> list[dict]:
    rows = []
    for rec in history["epochs"]:
        test = rec.get("test") or {}
        rows.append({
            "epoch": rec["epoch"],
            "train_loss": rec["train_loss"],
            "train_eval_loss": rec["train_eval_loss"],
            "test_accuracy": test.get("accuracy"),
            "test_f1": test.get("f1"),
            "test_fnr": test.get("fnr"),
            "test_fpr": test.get("fpr"),
        })
    return rows


def write_history_csv(history: dict, path: str) -> list[dict]:
    rows = history_rows(history)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, HISTORY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: "" if v is None else (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return rows


def _series(rows, key):
    pts = [(r["epoch"], r[key]) for r in rows if r[key] is not None]
    return [p[0] for p in pts], [p[1] for p in pts]


def plot_loss(rows: list[dict], path: str) -> None:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for key, label in (("train_loss", "mini-batch (dropout)"), ("train_eval_loss", "train, no dropout")):
            ax.plot(*_series(rows, key), label=label, lw=1.4)
        ax.axhline(math.log(2), color="0.5", ls=":", lw=1, label="ln 2")
        ax.set_xlabel("epoch")
        ax.set_ylabel("cross-entropy")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)


def plot_metrics(rows: list[dict], path: str) -> None:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for key in ("test_accuracy", "test_f1", "test_fnr", "test_fpr"):
            xs, ys = _series(rows, key)
            if xs:
                ax.plot(xs, ys, label=key.removeprefix("test_"), lw=1.4)
        ax.set_xlabel("epoch")
        ax.set_ylabel("test split")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(ncol=2)
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)


def render_report(history: dict, out_dir: str) -> list[str]:
    """history.csv plus loss.png and metrics.png; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, n) for n in ("history.csv", "loss.png", "metrics.png")]
    rows = write_history_csv(history, paths[0])
    plot_loss(rows, paths[1])
    plot_metrics(rows, paths[2])
    return paths
