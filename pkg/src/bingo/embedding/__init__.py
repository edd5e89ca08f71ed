"""Node embeddings (hashed bag-of-tokens or a pretrained encoder) and edge type vectors.

The torch-backed encoder lives in :mod:`bingo.embedding.encoder` and is imported
on demand.
"""

from bingo.embedding.hashed import DEFAULT_DIM, edge_type_vector, hashed_embed
from bingo.embedding.tasks import (
    EmptySequence,
    PretrainBatch,
    Task,
    TooShort,
    Vocabulary,
    make_cwp_pairs,
    make_dup_pairs,
    make_mlm_batch,
)

__all__ = [
    "DEFAULT_DIM",
    "EmptySequence",
    "PretrainBatch",
    "Task",
    "TooShort",
    "Vocabulary",
    "edge_type_vector",
    "hashed_embed",
    "make_cwp_pairs",
    "make_dup_pairs",
    "make_mlm_batch",
]
