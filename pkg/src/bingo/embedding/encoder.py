"""Small transformer block encoder trained with MLM, CWP and DUP.

Only needed when the encoder embedder is selected; the default pipeline uses
:func:`bingo.embedding.hashed.hashed_embed`.
"""

from __future__ import annotations

import math
import os
import random
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from bingo.embedding.tasks import (
    PretrainBatch,
    Task,
    TooShort,
    Vocabulary,
    encode_instructions,
    make_cwp_pairs,
    make_dup_pairs,
    make_mlm_batch,
    pair_batch,
)
from bingo.tensorio import read_blob, write_blob

ENC_VERSION = "bingo-enc/1"


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 4
    embed_dim: int = 128
    max_seq: int = 64
    mask_prob: float = 0.15
    cwp_window: int = 2
    ffn_dim: int | None = None

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")

    @classmethod
    def full_scale(cls, vocab_size: int) -> "EncoderConfig":
        """12 layers of 8 heads at dim 128."""
        return cls(vocab_size, layers=12, heads=8)

    @property
    def ffn(self) -> int:
        return self.ffn_dim or 4 * self.embed_dim


class EncoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ffn: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, ffn)
        self.ff2 = nn.Linear(ffn, d)
        self.norm2 = nn.LayerNorm(d)

    def forward(self, x, pad_mask, bypass_norm=False):
        b, n, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1) @ v
        x = x + self.out(attn.transpose(1, 2).reshape(b, n, d))
        if not bypass_norm:
            x = self.norm1(x)
        x = x + self.ff2(F.gelu(self.ff1(x)))
        if not bypass_norm:
            x = self.norm2(x)
        return x


class BlockEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.tok = nn.Embedding(cfg.vocab_size, d)
        self.seg = nn.Embedding(cfg.max_seq, d)
        self.pos = nn.Embedding(cfg.max_seq, d)
        self.layers = nn.ModuleList(EncoderLayer(d, cfg.heads, cfg.ffn) for _ in range(cfg.layers))
        self.mlm_head = nn.Linear(d, cfg.vocab_size)
        self.cwp_head = nn.Linear(d, 2)
        self.dup_head = nn.Linear(d, 2)
        self.bypass_norm = False
        self.apply(self._init)

    @staticmethod
    def _init(m):
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, std=0.02)
        if isinstance(m, nn.Linear):
            nn.init.zeros_(m.bias)

    def forward(self, token_ids, segment_ids, position_ids, pad_mask):
        x = self.tok(token_ids) + self.seg(segment_ids) + self.pos(position_ids)
        for layer in self.layers:
            x = layer(x, pad_mask, self.bypass_norm)
        return x


def collate(batches: Sequence[PretrainBatch], pad_id: int, max_seq: int):
    n = min(max(len(b.token_ids) for b in batches), max_seq)
    tok = torch.full((len(batches), n), pad_id, dtype=torch.long)
    seg = torch.zeros((len(batches), n), dtype=torch.long)
    pos = torch.zeros((len(batches), n), dtype=torch.long)
    pad = torch.ones((len(batches), n), dtype=torch.bool)
    for i, b in enumerate(batches):
        m = min(len(b.token_ids), n)
        tok[i, :m] = torch.tensor(b.token_ids[:m])
        seg[i, :m] = torch.tensor(b.segment_ids[:m]).clamp(max=max_seq - 1)
        pos[i, :m] = torch.tensor(b.position_ids[:m])
        pad[i, :m] = False
    return tok, seg, pos, pad


def task_loss(model: BlockEncoder, batches: Sequence[PretrainBatch], pad_id: int) -> torch.Tensor:
    """Mean cross-entropy of one task over a list of same-task samples."""
    task = batches[0].task
    tok, seg, pos, pad = collate(batches, pad_id, model.cfg.max_seq)
    hidden = model(tok, seg, pos, pad)
    if task is Task.MLM:
        rows, cols, gold = [], [], []
        for i, b in enumerate(batches):
            for p, orig in b.targets:
                if p < hidden.shape[1]:
                    rows.append(i)
                    cols.append(p)
                    gold.append(orig)
        logits = model.mlm_head(hidden[rows, cols])
        return F.cross_entropy(logits, torch.tensor(gold))
    head = model.cwp_head if task is Task.CWP else model.dup_head
    logits = head(hidden[:, 0])
    return F.cross_entropy(logits, torch.tensor([b.targets for b in batches]))


def sample_task_batch(task: Task, vocab: Vocabulary, blocks: Sequence[Sequence[Sequence[str]]],
                      rng: random.Random, cfg: EncoderConfig, size: int) -> list[PretrainBatch]:
    """Draw ``size`` samples of one task from a corpus of blocks (each a list
    of per-instruction token-text lists)."""
    if task is not Task.MLM:
        blocks = [b for b in blocks if len(b) >= 2]
        if not blocks:
            raise TooShort(f"{task.value} needs blocks with at least two instructions")
    out: list[PretrainBatch] = []
    while len(out) < size:
        block = rng.choice(blocks)
        if task is Task.MLM:
            out.append(make_mlm_batch(vocab, block, rng, cfg.mask_prob, cfg.max_seq))
            continue
        try:
            if task is Task.CWP:
                pairs, _ = make_cwp_pairs(block, cfg.cwp_window, rng)
            else:
                pairs = make_dup_pairs(block, rng, 1)
        except TooShort:
            continue
        a, b, label = rng.choice(pairs)
        out.append(pair_batch(vocab, a, b, label, task, cfg.max_seq))
    return out


def pretrain(model: BlockEncoder, vocab: Vocabulary, blocks, steps: int, seed: int = 0,
             batch_size: int = 32, lr: float = 1e-3, tasks=(Task.MLM, Task.CWP, Task.DUP)) -> list[float]:
    """Round-robin over ``tasks``, one Adam step per task batch."""
    rng = random.Random(seed)
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    history = []
    for step in range(steps):
        task = tasks[step % len(tasks)]
        batch = sample_task_batch(task, vocab, blocks, rng, model.cfg, batch_size)
        loss = task_loss(model, batch, vocab.pad_id)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    model.eval()
    return history


@torch.no_grad()
def encode_block(model: BlockEncoder, vocab: Vocabulary, block) -> np.ndarray:
    """Mean of the final-layer states over the non-pad positions."""
    token_lists = block.token_lists if hasattr(block, "token_lists") else block
    texts = [[t.text if hasattr(t, "text") else t for t in ins] for ins in token_lists]
    ids, segs = encode_instructions(vocab, texts, model.cfg.max_seq)
    b = PretrainBatch(ids, segs, list(range(len(ids))), Task.MLM)
    tok, seg, pos, pad = collate([b], vocab.pad_id, model.cfg.max_seq)
    was_training = model.training
    model.eval()
    hidden = model(tok, seg, pos, pad)[0]
    model.train(was_training)
    keep = ~pad[0]
    return hidden[keep].mean(dim=0).double().numpy()


def save_encoder(path: str | os.PathLike, model: BlockEncoder, vocab: Vocabulary) -> None:
    header = {"config": asdict(model.cfg), "vocab": vocab.tokens}
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    write_blob(path, ENC_VERSION, header, tensors)


def load_encoder(path: str | os.PathLike) -> tuple[BlockEncoder, Vocabulary]:
    header, tensors = read_blob(path, ENC_VERSION)
    cfg = EncoderConfig(**header["config"])
    model = BlockEncoder(cfg)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return model, Vocabulary(header["vocab"])
