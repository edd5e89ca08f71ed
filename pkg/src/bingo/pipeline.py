"""Glue between the analysis stages: extraction, embedding, training, evaluation."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from bingo.asm import Program, Side, parse_program
from bingo.embedding.hashed import DEFAULT_DIM, hashed_embed
from bingo.flowgraphs import Cpg, EdgeType, SliceConfig
from bingo.gnn import GraphTensors, ModelParams, TrainConfig, TwinSample, evaluate, train
from bingo.gnn.train import EmptyDataset
from bingo.patchdiff import (
    DatasetManifest,
    Label,
    ManifestEntry,
    TwinGraph,
    build_twin_graph,
    load_twin,
    patch_blocks_by_diff,
    patch_blocks_from_debug,
    split_dataset,
)

log = logging.getLogger(__name__)

HISTORY_VERSION = "bingo-history/1"


@dataclass
class PipelineConfig:
    slice: SliceConfig = field(default_factory=SliceConfig)
    embedder: str = "hashed"
    train: TrainConfig = field(default_factory=TrainConfig)
    input_dir: str = "."
    output_dir: str = "."
    seed: int = 0


# ---------------------------------------------------------------- embedders


class Embedder:
    """Maps a node's per-instruction token lists to a feature vector."""

    def __init__(self, spec: str = "hashed", dim: int = DEFAULT_DIM):
        self.spec = spec
        if spec == "hashed":
            self.dim = dim
            self._fn = lambda tokens: hashed_embed(tokens, dim)
        elif spec.startswith("encoder:"):
            from bingo.embedding.encoder import encode_block, load_encoder

            model, vocab = load_encoder(spec.split(":", 1)[1])
            self.dim = model.cfg.embed_dim
            self._fn = lambda tokens: encode_block(model, vocab, tokens)
        else:
            raise ValueError(f"unknown embedder {spec!r} (use 'hashed' or 'encoder:PATH')")

    def __call__(self, tokens) -> np.ndarray:
        return self._fn(tokens)


def graph_tensors(cpg: Cpg, embed: Callable) -> GraphTensors:
    index = {nid: i for i, nid in enumerate(cpg.node_ids)}
    nodes = np.stack([embed(n.tokens) for n in cpg.nodes]) if cpg.nodes else np.zeros((0, 0))
    edges = []
    for k in EdgeType:
        pairs = sorted((index[s], index[d]) for (s, d), vec in cpg.edges.items() if vec[k])
        edges.append(np.array(pairs, dtype=np.int64).reshape(-1, 2))
    return GraphTensors(nodes, tuple(edges))


def twin_to_sample(twin: TwinGraph, embed: Callable) -> TwinSample:
    label = twin.label.index if twin.label is not None else None
    return TwinSample(graph_tensors(twin.pre_graph, embed), graph_tensors(twin.post_graph, embed),
                      label, twin.commit_id)


def load_samples(manifest: DatasetManifest, entries: Iterable[ManifestEntry], embed: Callable) -> list[TwinSample]:
    out = []
    for e in entries:
        twin = load_twin(manifest.resolve(e))
        if e.label is not None:
            twin.label = e.label
        out.append(twin_to_sample(twin, embed))
    return out


# ---------------------------------------------------------------- extraction


def extract(pre: Program, post: Program, changed_lines: tuple[Iterable[int], Iterable[int]] | None,
            config: SliceConfig = SliceConfig(), label: Label | None = None,
            commit_id: str = "", internal_only: bool = False):
    """Patch blocks -> graphs -> slices -> twin graphs.

    ``changed_lines`` selects the debug-line path; ``None`` uses the
    fingerprint diff.  Returns ``(twins, warnings, patch_block_set)``.
    """
    if changed_lines is not None:
        pbs = patch_blocks_from_debug(pre, post, changed_lines[0], changed_lines[1])
    else:
        pbs = patch_blocks_by_diff(pre, post)
    if pbs.is_empty():
        return [], [("*", "no patch blocks")], pbs
    twins, warnings = build_twin_graph(pre, post, pbs, config, label, internal_only, commit_id)
    return twins, warnings, pbs


def extract_text(pre_text: str, post_text: str, changed_lines=None, config: SliceConfig = SliceConfig(),
                 label: Label | None = None, commit_id: str = "", internal_only: bool = False):
    pre = parse_program(pre_text, commit_id, Side.PRE_PATCH)
    post = parse_program(post_text, commit_id, Side.POST_PATCH)
    return extract(pre, post, changed_lines, config, label, commit_id, internal_only)


# ---------------------------------------------------------------- training


def _json_dump(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=False)
        fh.write("\n")


def run_training(manifest: DatasetManifest, cfg: TrainConfig, embedder: str = "hashed",
                 out_dir: str = ".", progress=None) -> dict:
    """Split, train, write ``checkpoint.bin`` and ``history.json``."""
    train_entries, test_entries = split_dataset(manifest)
    embed = Embedder(embedder)
    train_samples = load_samples(manifest, train_entries, embed)
    test_samples = load_samples(manifest, test_entries, embed)
    if not train_samples:
        raise EmptyDataset("training split is empty")
    params = ModelParams.init(cfg.seed, embed_dim=embed.dim)
    params, epochs = train(params, train_samples, cfg, test_samples, log=progress)
    final = {
        "train": evaluate(params, train_samples).to_json(),
        "test": evaluate(params, test_samples).to_json(),
    }
    history = {
        "version": HISTORY_VERSION,
        "embedder": embedder,
        "config": asdict(cfg),
        "split": {
            "ratio": manifest.split_ratio,
            "seed": manifest.seed,
            "train_entries": len(train_entries),
            "test_entries": len(test_entries),
            "train_commits": len({e.commit_id for e in train_entries}),
            "test_commits": len({e.commit_id for e in test_entries}),
        },
        "epochs": epochs,
        "final": final,
    }
    os.makedirs(out_dir, exist_ok=True)
    params.save(os.path.join(out_dir, "checkpoint.bin"), embedder=embedder, seed=cfg.seed)
    _json_dump(history, os.path.join(out_dir, "history.json"))
    return history


def run_eval(checkpoint: str, manifest: DatasetManifest, subset: str = "all") -> dict:
    params = ModelParams.load(checkpoint)
    embed = Embedder(params.meta.get("embedder", "hashed"))
    if embed.dim != params.embed_dim:
        raise ValueError(f"embedder dimension {embed.dim} != checkpoint input dimension {params.embed_dim}")
    if subset == "all":
        entries = manifest.entries
    else:
        train_entries, test_entries = split_dataset(manifest)
        entries = train_entries if subset == "train" else test_entries
    samples = load_samples(manifest, entries, embed)
    return evaluate(params, samples).to_json()
