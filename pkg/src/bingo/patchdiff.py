"""Patch-related block extraction, twin graph assembly and dataset manifests."""

from __future__ import annotations

import enum
import json
import logging
import os
import random
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable

from bingo.asm import Function, Program, Token, TokenKind, block_fingerprint
from bingo.flowgraphs import (
    Cpg,
    CpgNode,
    NodeKind,
    SliceConfig,
    build_function_cpg,
    slice_cpg,
)

log = logging.getLogger(__name__)

TWIN_VERSION = "bingo-twin/1"
MANIFEST_VERSION = "bingo-manifest/1"


class MissingDebugInfo(ValueError):
    pass


class NoCommonFunctions(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class SingleCommit(ValueError):
    pass


class Provenance(enum.Enum):
    DEBUG_LINES = "debug_lines"
    FINGERPRINT_DIFF = "fingerprint_diff"


class Label(enum.Enum):
    NON_SECURITY = "non_security"
    SECURITY = "security"

    @property
    def index(self) -> int:
        # class index 1 is the positive (security) class
        return 1 if self is Label.SECURITY else 0


@dataclass(frozen=True)
class PatchBlockSet:
    pre_blocks: frozenset[tuple[str, str]]
    post_blocks: frozenset[tuple[str, str]]
    provenance: Provenance

    def is_empty(self) -> bool:
        return not self.pre_blocks and not self.post_blocks

    def blocks_in(self, side: str, function: str) -> set[str]:
        blocks = self.pre_blocks if side == "pre" else self.post_blocks
        return {b for f, b in blocks if f == function}

    def functions(self) -> list[str]:
        return sorted({f for f, _ in self.pre_blocks} | {f for f, _ in self.post_blocks})


@dataclass
class TwinGraph:
    pre_graph: Cpg
    post_graph: Cpg
    label: Label | None
    commit_id: str
    function: str


# ---------------------------------------------------------------- patch blocks


def _debug_blocks(program: Program, changed: set[int]) -> set[tuple[str, str]]:
    found = set()
    touched_functions = set()
    for fn in program.functions:
        for b in fn.blocks:
            if any(ins.src_line in changed for ins in b.instructions):
                found.add((fn.name, b.id))
                touched_functions.add(fn.name)
    if changed:
        # a changed line that cannot be located makes every function suspect
        check = [fn for fn in program.functions if fn.name in touched_functions] or list(program.functions)
        for fn in check:
            instrs = [ins for b in fn.blocks for ins in b.instructions]
            annotated = sum(ins.src_line is not None for ins in instrs)
            if instrs and annotated * 2 < len(instrs):
                raise MissingDebugInfo(
                    f"function {fn.name!r}: only {annotated}/{len(instrs)} instructions carry line info"
                )
    return found


def patch_blocks_from_debug(pre: Program, post: Program, changed_pre_lines: Iterable[int],
                            changed_post_lines: Iterable[int]) -> PatchBlockSet:
    return PatchBlockSet(
        frozenset(_debug_blocks(pre, set(changed_pre_lines))),
        frozenset(_debug_blocks(post, set(changed_post_lines))),
        Provenance.DEBUG_LINES,
    )


def _unmatched_blocks(a: Function, b: Function) -> tuple[list[str], list[str]]:
    """Blocks of ``a`` and ``b`` left over after pairing equal fingerprints
    one-to-one in block order."""
    fa = [(blk.id, block_fingerprint(blk)) for blk in a.blocks]
    fb = [(blk.id, block_fingerprint(blk)) for blk in b.blocks]
    avail_b = Counter(fp for _, fp in fb)
    avail_a = Counter(fp for _, fp in fa)
    left_a = []
    for bid, fp in fa:
        if avail_b[fp] > 0:
            avail_b[fp] -= 1
        else:
            left_a.append(bid)
    left_b = []
    for bid, fp in fb:
        if avail_a[fp] > 0:
            avail_a[fp] -= 1
        else:
            left_b.append(bid)
    return left_a, left_b


def patch_blocks_by_diff(pre: Program, post: Program) -> PatchBlockSet:
    """Pair functions by name, drop functions with identical block fingerprint
    multisets, then report the blocks without a fingerprint partner."""
    common = [n for n in pre.function_names if n in set(post.function_names)]
    if not common:
        raise NoCommonFunctions("pre and post programs share no function names")
    pre_blocks, post_blocks = set(), set()
    for name in common:
        fa, fb = pre.function(name), post.function(name)
        if Counter(map(block_fingerprint, fa.blocks)) == Counter(map(block_fingerprint, fb.blocks)):
            continue
        left_a, left_b = _unmatched_blocks(fa, fb)
        pre_blocks.update((name, b) for b in left_a)
        post_blocks.update((name, b) for b in left_b)
    return PatchBlockSet(frozenset(pre_blocks), frozenset(post_blocks), Provenance.FINGERPRINT_DIFF)


# ---------------------------------------------------------------- twin graphs


def _context_seed(fn: Function, other_side_blocks: set[str]) -> set[str]:
    seed = {b for b in other_side_blocks if b in set(fn.block_ids)}
    return seed or {fn.entry}


def _side_graph(fn: Function, patch: set[str], other_patch: set[str], config: SliceConfig,
                internal_only: bool) -> Cpg:
    if patch:
        cpg = build_function_cpg(fn, patch)
        return slice_cpg(cpg, patch, config, internal_only=internal_only)
    # unchanged side: slice around the counterpart location, all nodes context
    seed = _context_seed(fn, other_patch)
    cpg = build_function_cpg(fn, ())
    sliced = slice_cpg(cpg, seed, config, internal_only=internal_only)
    return Cpg(
        [CpgNode(n.id, NodeKind.CONTEXT, n.tokens, n.block) for n in sliced.nodes],
        sliced.edges,
        sliced.truncated,
    )


def build_twin_graph(pre: Program, post: Program, pbs: PatchBlockSet, config: SliceConfig = SliceConfig(),
                     label: Label | None = None, internal_only: bool = False,
                     commit_id: str | None = None) -> tuple[list[TwinGraph], list[tuple[str, str]]]:
    """One TwinGraph per function touched by the patch.

    Returns ``(twins, warnings)``; ``warnings`` lists ``(function, reason)``
    for functions that were skipped or whose slice hit the time limit.
    """
    if pbs.is_empty():
        raise ValueError("patch block set is empty on both sides")
    commit = commit_id if commit_id is not None else (post.commit_id or pre.commit_id)
    twins: list[TwinGraph] = []
    warnings: list[tuple[str, str]] = []
    for name in pbs.functions():
        try:
            fa, fb = pre.function(name), post.function(name)
        except KeyError:
            warnings.append((name, "function missing on one side"))
            log.warning("skipping %s: function missing on one side", name)
            continue
        pa, pb = pbs.blocks_in("pre", name), pbs.blocks_in("post", name)
        try:
            ga = _side_graph(fa, pa, pb, config, internal_only)
            gb = _side_graph(fb, pb, pa, config, internal_only)
        except (ValueError, KeyError) as exc:
            warnings.append((name, str(exc)))
            log.warning("skipping %s: %s", name, exc)
            continue
        if ga.truncated or gb.truncated:
            warnings.append((name, "slicing truncated by time limit"))
        twins.append(TwinGraph(ga, gb, label, commit, name))
    return twins, warnings


# ---------------------------------------------------------------- JSON


def graph_to_json(cpg: Cpg) -> dict:
    nodes = []
    for n in cpg.nodes:
        nodes.append({
            "id": n.id,
            "kind": n.kind.value,
            "tokens": [[[t.text, t.kind.value] for t in ins] for ins in n.tokens],
        })
    edges = [
        {"src": s, "dst": d, "types": [bool(x) for x in vec]}
        for (s, d), vec in sorted(cpg.edges.items())
    ]
    return {"nodes": nodes, "edges": edges}


def graph_from_json(obj: dict) -> Cpg:
    nodes = []
    for n in obj["nodes"]:
        tokens = tuple(tuple(Token(t, TokenKind(k)) for t, k in ins) for ins in n["tokens"])
        nodes.append(CpgNode(n["id"], NodeKind(n["kind"]), tokens))
    edges = {}
    for e in obj["edges"]:
        key = (e["src"], e["dst"])
        if key in edges:
            raise ValueError(f"duplicate edge record {key}")
        edges[key] = tuple(bool(x) for x in e["types"])
    return Cpg(nodes, edges)


def twin_to_json(twin: TwinGraph) -> dict:
    return {
        "version": TWIN_VERSION,
        "commit_id": twin.commit_id,
        "function": twin.function,
        "label": twin.label.value if twin.label is not None else None,
        "pre": graph_to_json(twin.pre_graph),
        "post": graph_to_json(twin.post_graph),
    }


def twin_from_json(obj: dict) -> TwinGraph:
    if obj.get("version") != TWIN_VERSION:
        raise ValueError(f"unsupported twin graph version {obj.get('version')!r}")
    label = Label(obj["label"]) if obj["label"] is not None else None
    return TwinGraph(graph_from_json(obj["pre"]), graph_from_json(obj["post"]), label,
                     obj["commit_id"], obj["function"])


def dumps_twin(twin: TwinGraph) -> str:
    return json.dumps(twin_to_json(twin), ensure_ascii=False, separators=(",", ":")) + "\n"


def save_twin(twin: TwinGraph, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_twin(twin))


def load_twin(path: str | os.PathLike) -> TwinGraph:
    with open(path, encoding="utf-8") as fh:
        return twin_from_json(json.load(fh))


# ---------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    commit_id: str
    label: Label | None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split_ratio: float = 0.8
    seed: int = 0
    root: str = "."  # directory relative entry paths resolve against

    def __post_init__(self):
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError(f"split_ratio must be in (0, 1), got {self.split_ratio}")

    def resolve(self, entry: ManifestEntry) -> str:
        return os.path.join(self.root, entry.path)

    def to_json(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "split_ratio": self.split_ratio,
            "seed": self.seed,
            "entries": [
                {"path": e.path, "commit_id": e.commit_id,
                 "label": e.label.value if e.label is not None else None}
                for e in self.entries
            ],
        }

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        if obj.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {obj.get('version')!r}")
        entries = [
            ManifestEntry(e["path"], e["commit_id"], Label(e["label"]) if e["label"] else None)
            for e in obj["entries"]
        ]
        return cls(entries, obj.get("split_ratio", 0.8), obj.get("seed", 0),
                   os.path.dirname(os.path.abspath(path)))


def split_dataset(m: DatasetManifest) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Commit-disjoint split.

    Commits are shuffled with the manifest seed; each goes to the training
    side when that moves the training size closer to ``split_ratio`` of all
    entries.  If no commit is left for testing, the training commit whose
    removal lands closest to the target is moved over.
    """
    if not m.entries:
        raise EmptyDataset("empty manifest")
    by_commit: dict[str, list[ManifestEntry]] = defaultdict(list)
    for e in m.entries:
        by_commit[e.commit_id].append(e)
    if len(by_commit) < 2:
        raise SingleCommit("a commit-disjoint split needs at least two commits")
    commits = sorted(by_commit)
    random.Random(m.seed).shuffle(commits)
    target = m.split_ratio * len(m.entries)
    train_c: list[str] = []
    test_c: list[str] = []
    n_train = 0
    for c in commits:
        size = len(by_commit[c])
        if abs(n_train + size - target) < abs(n_train - target):
            train_c.append(c)
            n_train += size
        else:
            test_c.append(c)
    if not test_c:
        move = min(train_c, key=lambda c: abs(n_train - len(by_commit[c]) - target))
        train_c.remove(move)
        test_c.append(move)
    train = [e for c in train_c for e in by_commit[c]]
    test = [e for c in test_c for e in by_commit[c]]
    return train, test
