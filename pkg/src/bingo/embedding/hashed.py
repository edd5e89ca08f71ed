from __future__ import annotations

from typing import Sequence

import numpy as np

from bingo.asm import BasicBlock, Token
from bingo.hashing import fnv1a64

DEFAULT_DIM = 128
HASH_SEED = 0x5EED


def _token_lists(block) -> Sequence[Sequence[Token]]:
    if isinstance(block, BasicBlock):
        return block.token_lists
    return block


def hashed_embed(block, dim: int = DEFAULT_DIM, seed: int = HASH_SEED) -> np.ndarray:
    """Bag-of-tokens feature hashing, L2-normalised.

    ``block`` is a BasicBlock or a sequence of per-instruction token lists.
    """
    vec = np.zeros(dim, dtype=np.float64)
    for ins in _token_lists(block):
        for tok in ins:
            text = tok.text if isinstance(tok, Token) else str(tok)
            vec[fnv1a64(text.encode("utf-8"), seed) % dim] += 1.0
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise ValueError("block has no tokens")
    return vec / norm


def edge_type_vector(types: Sequence[bool]) -> tuple[bool, bool, bool]:
    """(cfg, cdg, ddg) membership of a merged CPG edge."""
    vec = tuple(bool(t) for t in types)
    if len(vec) != 3 or not any(vec):
        raise ValueError(f"edge type vector must have 3 entries, not all false: {types}")
    return vec
