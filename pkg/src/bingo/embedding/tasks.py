"""Vocabulary and sample construction for the MLM, CWP and DUP pretraining tasks."""

from __future__ import annotations

import enum
import os
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from bingo.asm import CLS, LABEL, MASK, PAD, SEP, UNK

FIXED_HEAD = (PAD, UNK, MASK, CLS)


class EmptySequence(ValueError):
    pass


class TooShort(ValueError):
    pass


class Vocabulary:
    """Token <-> id table.  Ids are line numbers of the vocabulary file; the
    first four entries are always [PAD], [UNK], [MASK], [CLS]."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != FIXED_HEAD:
            raise ValueError(f"vocabulary must start with {FIXED_HEAD}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate vocabulary entry")
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.ids.get(token, self.ids[UNK])

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self[t] for t in tokens]

    pad_id = property(lambda self: self.ids[PAD])
    unk_id = property(lambda self: self.ids[UNK])
    mask_id = property(lambda self: self.ids[MASK])
    cls_id = property(lambda self: self.ids[CLS])
    sep_id = property(lambda self: self.ids[SEP])

    @classmethod
    def build(cls, instructions: Iterable[Sequence[str]], min_count: int = 1) -> "Vocabulary":
        counts = Counter(t for ins in instructions for t in ins)
        head = list(FIXED_HEAD) + [SEP, LABEL]
        rest = sorted((t for t, c in counts.items() if c >= min_count and t not in head),
                      key=lambda t: (-counts[t], t))
        return cls(head + rest)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([ln for ln in fh.read().split("\n") if ln])


class Task(enum.Enum):
    MLM = "mlm"
    CWP = "cwp"
    DUP = "dup"


@dataclass
class PretrainBatch:
    token_ids: list[int]
    segment_ids: list[int]
    position_ids: list[int]
    task: Task
    # MLM: list of (position, original id); CWP/DUP: 0/1 label
    targets: list[tuple[int, int]] | int = field(default_factory=list)


def encode_instructions(vocab: Vocabulary, instructions: Sequence[Sequence[str]],
                        max_seq: int | None = None) -> tuple[list[int], list[int]]:
    """[CLS] followed by every instruction's tokens; segment i+1 marks
    instruction i, the [CLS] token is segment 0."""
    ids = [vocab.cls_id]
    segs = [0]
    for i, ins in enumerate(instructions):
        for t in ins:
            ids.append(vocab[t])
            segs.append(i + 1)
    if max_seq is not None:
        ids, segs = ids[:max_seq], segs[:max_seq]
    return ids, segs


def make_mlm_batch(vocab: Vocabulary, instructions: Sequence[Sequence[str]], rng: random.Random,
                   mask_prob: float = 0.15, max_seq: int | None = None) -> PretrainBatch:
    ids, segs = encode_instructions(vocab, instructions, max_seq)
    if len(ids) < 2:
        raise EmptySequence("nothing to mask")
    candidates = range(1, len(ids))  # never the [CLS] slot
    chosen = [p for p in candidates if rng.random() < mask_prob]
    if not chosen:
        chosen = [rng.choice(candidates)]
    targets = [(p, ids[p]) for p in chosen]
    masked = list(ids)
    for p in chosen:
        masked[p] = vocab.mask_id
    return PretrainBatch(masked, segs, list(range(len(ids))), Task.MLM, targets)


def make_cwp_pairs(instructions: Sequence, window: int, rng: random.Random):
    """Co-occurrence pairs: ``(a, b, 1)`` when ``b`` follows ``a`` within
    ``window`` instructions, ``(a, b, 0)`` for farther pairs.

    Negatives are drawn with replacement to match the positive count.
    Returns ``(pairs, balanced)``; ``balanced`` is False when the sequence
    has no pair farther apart than ``window``.
    """
    n = len(instructions)
    if n < 2:
        raise TooShort("context-window pairs need at least two instructions")
    pos = [(i, j) for i in range(n) for j in range(i + 1, n) if j - i <= window]
    if not pos:
        raise TooShort(f"window {window} yields no positive pairs")
    neg = [(i, j) for i in range(n) for j in range(i + 1, n) if j - i > window]
    pairs = [(instructions[i], instructions[j], 1) for i, j in pos]
    if not neg:
        return pairs, False
    for _ in pos:
        i, j = rng.choice(neg)
        pairs.append((instructions[i], instructions[j], 0))
    return pairs, True


def make_dup_pairs(instructions: Sequence, rng: random.Random, num_pairs: int | None = None):
    """Relative-order pairs: label 1 keeps program order, 0 swaps it."""
    n = len(instructions)
    if n < 2:
        raise TooShort("order pairs need at least two instructions")
    out = []
    for _ in range(num_pairs if num_pairs is not None else n):
        i, j = sorted(rng.sample(range(n), 2))
        if rng.random() < 0.5:
            out.append((instructions[i], instructions[j], 1))
        else:
            out.append((instructions[j], instructions[i], 0))
    return out


def pair_batch(vocab: Vocabulary, a: Sequence[str], b: Sequence[str], label: int, task: Task,
               max_seq: int | None = None) -> PretrainBatch:
    ids = [vocab.cls_id] + vocab.encode(a) + [vocab.sep_id] + vocab.encode(b)
    segs = [0] + [1] * (len(a) + 1) + [2] * len(b)
    if max_seq is not None:
        ids, segs = ids[:max_seq], segs[:max_seq]
    return PretrainBatch(ids, segs, list(range(len(ids))), task, int(label))
