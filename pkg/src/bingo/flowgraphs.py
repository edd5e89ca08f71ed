"""Block-level control flow, control dependence and data dependence graphs,
their merge into a code property graph, and patch-centred slicing."""

from __future__ import annotations

import enum
import time
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import networkx as nx

from bingo.asm import (
    REGISTER_FAMILY,
    tokenize_instruction,
    BasicBlock,
    Function,
    Instruction,
    Token,
    TokenKind,
)


class EmptyGraph(ValueError):
    pass


class InconsistentUniverse(ValueError):
    pass


class EdgeType(enum.IntEnum):
    CFG = 0
    CDG = 1
    DDG = 2


NUM_EDGE_TYPES = len(EdgeType)
VIRTUAL_EXIT = "<exit>"


@dataclass(frozen=True)
class FlowGraph:
    nodes: tuple[str, ...]
    edges: frozenset[tuple[str, str]]
    type: EdgeType

    def __post_init__(self):
        node_set = set(self.nodes)
        for s, d in self.edges:
            if s not in node_set or d not in node_set:
                raise InconsistentUniverse(f"edge {s}->{d} leaves the node set")
            if self.type is EdgeType.CDG and s == d:
                raise ValueError(f"self-loop {s} in control dependence graph")

    def successors(self) -> dict[str, list[str]]:
        succ = {n: [] for n in self.nodes}
        for s, d in sorted(self.edges):
            succ[s].append(d)
        return succ

    def predecessors(self) -> dict[str, list[str]]:
        pred = {n: [] for n in self.nodes}
        for s, d in sorted(self.edges):
            pred[d].append(s)
        return pred


class NodeKind(enum.Enum):
    PATCH = "patch"
    CONTEXT = "context"


@dataclass(frozen=True)
class CpgNode:
    id: str
    kind: NodeKind
    tokens: tuple[tuple[Token, ...], ...]
    block: BasicBlock | None = None


@dataclass
class Cpg:
    nodes: list[CpgNode]
    edges: dict[tuple[str, str], tuple[bool, bool, bool]]
    truncated: bool = False

    def __post_init__(self):
        ids = {n.id for n in self.nodes}
        for (s, d), vec in self.edges.items():
            if s not in ids or d not in ids:
                raise InconsistentUniverse(f"edge {s}->{d} leaves the node set")
            if len(vec) != NUM_EDGE_TYPES or not any(vec):
                raise ValueError(f"invalid edge type vector {vec} on {s}->{d}")

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    @property
    def patch_ids(self) -> list[str]:
        return [n.id for n in self.nodes if n.kind is NodeKind.PATCH]

    def edges_of_type(self, k: int) -> set[tuple[str, str]]:
        return {e for e, vec in self.edges.items() if vec[k]}

    def node(self, node_id: str) -> CpgNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)


@dataclass(frozen=True)
class SliceConfig:
    stride_n: int = 2
    time_limit_seconds: float = 900

    def __post_init__(self):
        if self.stride_n < 1:
            raise ValueError("stride_n must be >= 1")
        if self.time_limit_seconds <= 0:
            raise ValueError("time_limit_seconds must be positive")


# ---------------------------------------------------------------- CFG


def build_cfg(f: Function) -> FlowGraph:
    edges = set()
    for b in f.blocks:
        for s in b.successors():
            edges.add((b.id, s))
    return FlowGraph(tuple(f.block_ids), frozenset(edges), EdgeType.CFG)


# ---------------------------------------------------------------- post-dominators


def _augment_with_exit(g: FlowGraph) -> tuple[list[str], dict[str, list[str]], str]:
    """Successor map with a single exit.

    A virtual exit is added when there are several exits or when some nodes
    cannot reach any exit; it receives edges from every exit and from one
    representative of every sink SCC that is not an exit.
    """
    succ = g.successors()
    nodes = list(g.nodes)
    exits = [n for n in nodes if not succ[n]]
    order = {n: i for i, n in enumerate(nodes)}

    dg = nx.DiGraph()
    dg.add_nodes_from(nodes)
    dg.add_edges_from(g.edges)
    cond = nx.condensation(dg)
    dead_reps = []
    for c in cond.nodes:
        if cond.out_degree(c) == 0:
            members = cond.nodes[c]["members"]
            if len(members) == 1 and not succ[next(iter(members))]:
                continue  # a real exit
            dead_reps.append(min(members, key=order.__getitem__))
    if len(exits) == 1 and not dead_reps:
        return nodes, succ, exits[0]
    succ = {n: list(v) for n, v in succ.items()}
    for n in sorted(exits + dead_reps, key=order.__getitem__):
        succ[n].append(VIRTUAL_EXIT)
    succ[VIRTUAL_EXIT] = []
    return nodes + [VIRTUAL_EXIT], succ, VIRTUAL_EXIT


def _iterative_idom(nodes: Sequence[str], succ: Mapping[str, list[str]], root: str) -> dict[str, str]:
    """Cooper-Harvey-Kennedy dominators over ``succ`` rooted at ``root``."""
    postorder: list[str] = []
    seen = {root}
    stack = [(root, iter(succ[root]))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for nxt in it:
            if nxt not in seen:
                seen.add(nxt)
                stack.append((nxt, iter(succ[nxt])))
                advanced = True
                break
        if not advanced:
            postorder.append(node)
            stack.pop()
    po_index = {n: i for i, n in enumerate(postorder)}
    preds: dict[str, list[str]] = {n: [] for n in postorder}
    for n in postorder:
        for s in succ[n]:
            if s in preds:
                preds[s].append(n)

    idom = {root: root}

    def intersect(a, b):
        while a != b:
            while po_index[a] < po_index[b]:
                a = idom[a]
            while po_index[b] < po_index[a]:
                b = idom[b]
        return a

    changed = True
    while changed:
        changed = False
        for n in reversed(postorder):
            if n == root:
                continue
            new = None
            for p in preds[n]:
                if p in idom:
                    new = p if new is None else intersect(p, new)
            if new is not None and idom.get(n) != new:
                idom[n] = new
                changed = True
    return idom


def post_dominator_tree(g: FlowGraph) -> dict[str, str]:
    """Immediate post-dominator of every node; the exit maps to itself.

    When a virtual exit is needed it appears in the result as
    ``VIRTUAL_EXIT``.
    """
    if not g.nodes:
        raise EmptyGraph("flow graph has no nodes")
    nodes, succ, exit_node = _augment_with_exit(g)
    return _iterative_idom(nodes, _reverse(nodes, succ), exit_node)


def _control_dependences(g: FlowGraph) -> set[tuple[str, str]]:
    nodes, succ, exit_node = _augment_with_exit(g)
    ipdom = _iterative_idom(nodes, _reverse(nodes, succ), exit_node)
    deps = set()
    for u in g.nodes:
        stop = ipdom[u]
        for s in succ[u]:
            # ipdom(u) post-dominates every successor, so this walk terminates
            runner = s
            while runner != stop:
                if runner != u:
                    deps.add((u, runner))
                runner = ipdom[runner]
    return deps


def _reverse(nodes, succ) -> dict[str, list[str]]:
    rev: dict[str, list[str]] = {n: [] for n in nodes}
    for n in nodes:
        for s in succ[n]:
            rev[s].append(n)
    return rev


def raw_control_dependences(g: FlowGraph) -> FlowGraph:
    """Control dependence edges before removing those duplicated by the CFG."""
    if not g.nodes:
        raise EmptyGraph("flow graph has no nodes")
    return FlowGraph(g.nodes, frozenset(_control_dependences(g)), EdgeType.CDG)


def derive_cdg(g: FlowGraph) -> FlowGraph:
    raw = raw_control_dependences(g)
    return FlowGraph(g.nodes, raw.edges - g.edges, EdgeType.CDG)


# ---------------------------------------------------------------- DDG

CALLER_SAVED = ("rax", "rcx", "rdx", "rsi", "rdi", "r8", "r9", "r10", "r11")

_DEF_ONLY_BINARY = frozenset({"mov", "lea", "movzx", "movsx", "movsxd"})
_USE_ONLY = frozenset({"cmp", "test", "push"})
_NO_DATA = frozenset({"jmp", "je", "jne", "jle", "jl", "jge", "jg", "jz", "jnz", "ret", "nop"})


def _is_memory(operand_tokens: Sequence[Token]) -> bool:
    return any(t.text == "[" for t in operand_tokens)


def _split_token_operands(ins: Instruction) -> list[list[Token]]:
    """Tokens of each operand, re-tokenized per operand so boundaries are kept."""
    return [tokenize_instruction(ins.mnemonic, op)[1:] for op in ins.operands]


def _regs(tokens: Iterable[Token]) -> set[str]:
    return {REGISTER_FAMILY[t.text] for t in tokens if t.kind is TokenKind.REGISTER}


def _mem_loc(tokens: Sequence[Token]) -> str:
    return "mem:" + "".join(t.text for t in tokens if t.kind is not TokenKind.RESERVED_WORD)


def _read(op: Sequence[Token]) -> set[str]:
    # the value of an operand: a register, or a memory cell plus its address registers
    if _is_memory(op):
        return _regs(op) | {_mem_loc(op)}
    return _regs(op)


def _write(op: Sequence[Token]) -> tuple[set[str], set[str]]:
    """(locations defined, locations read) when ``op`` is written."""
    if _is_memory(op):
        return {_mem_loc(op)}, _regs(op)
    return _regs(op), set()


def instruction_def_use(ins: Instruction) -> tuple[set[str], set[str], set[str]]:
    """Return ``(defs, uses, kills)`` for one instruction.

    Locations are register family names (``rax`` for ``eax``/``al``...) or
    ``mem:<operand>`` strings for memory operands, which alias only on exact
    textual equality.  ``kills`` covers clobbers that end a definition's
    lifetime without creating one (caller-saved registers across ``call``).
    """
    m = ins.mnemonic
    ops = _split_token_operands(ins)
    defs: set[str] = set()
    uses: set[str] = set()
    kills: set[str] = set()
    if m in _NO_DATA:
        return defs, uses, kills
    if m == "call":
        for op in ops:
            uses |= _regs(op)
        defs.add("rax")
        kills.update(CALLER_SAVED)
        kills.discard("rax")
        return defs, uses, kills
    if m == "pop":
        for op in ops[:1]:
            d, u = _write(op)
            defs |= d
            uses |= u
        return defs, uses, kills
    if m in _USE_ONLY:
        for op in ops:
            uses |= _read(op)
        return defs, uses, kills
    if not ops:
        return defs, uses, kills
    dst, srcs = ops[0], ops[1:]
    d, u = _write(dst)
    defs |= d
    uses |= u
    for op in srcs:
        uses |= _regs(op) if m == "lea" else _read(op)
    if m not in _DEF_ONLY_BINARY:
        # read-modify-write: arithmetic, unary and unknown mnemonics
        uses |= _read(dst)
        if m == "xor" and len(ops) == 2 and ops[0] == ops[1] and not _is_memory(dst):
            uses -= _regs(dst)  # xor r, r only defines r
    return defs, uses, kills


@dataclass(frozen=True)
class BlockDataFlow:
    upward_uses: frozenset[str]
    gen: frozenset[str]   # locations whose last write in the block is a real definition
    kill: frozenset[str]  # every location written or clobbered in the block


def block_dataflow(block: BasicBlock) -> BlockDataFlow:
    upward: set[str] = set()
    written: set[str] = set()
    last_is_def: dict[str, bool] = {}
    for ins in block.instructions:
        defs, uses, kills = instruction_def_use(ins)
        upward |= uses - written
        for loc in kills:
            last_is_def[loc] = False
            written.add(loc)
        for loc in defs:
            last_is_def[loc] = True
            written.add(loc)
    gen = frozenset(loc for loc, is_def in last_is_def.items() if is_def)
    return BlockDataFlow(frozenset(upward), gen, frozenset(written))


def build_ddg(f: Function, g: FlowGraph) -> FlowGraph:
    """Block-level reaching definitions over registers (and exact-text memory
    operands).  Edge ``A -> B`` when a definition leaving ``A`` reaches an
    upward-exposed use in ``B``."""
    flow = {b.id: block_dataflow(b) for b in f.blocks}
    preds = g.predecessors()
    succ = g.successors()
    out: dict[str, frozenset[tuple[str, str]]] = {
        n: frozenset((n, loc) for loc in flow[n].gen) for n in g.nodes
    }
    reach_in: dict[str, set[tuple[str, str]]] = {n: set() for n in g.nodes}
    work = deque(g.nodes)
    queued = set(g.nodes)
    while work:
        n = work.popleft()
        queued.discard(n)
        new_in = set()
        for p in preds[n]:
            new_in |= out[p]
        reach_in[n] = new_in
        kill = flow[n].kill
        new_out = frozenset((src, loc) for src, loc in new_in if loc not in kill) | frozenset(
            (n, loc) for loc in flow[n].gen
        )
        if new_out != out[n]:
            out[n] = new_out
            for s in succ[n]:
                if s not in queued:
                    work.append(s)
                    queued.add(s)
    edges = set()
    for n in g.nodes:
        uses = flow[n].upward_uses
        for src, loc in reach_in[n]:
            if src != n and loc in uses:
                edges.add((src, n))
    return FlowGraph(g.nodes, frozenset(edges), EdgeType.DDG)


# ---------------------------------------------------------------- CPG


def merge_cpg(cfg: FlowGraph, cdg: FlowGraph, ddg: FlowGraph, patch_blocks: Iterable[str],
              function: Function | None = None) -> Cpg:
    universe = set(cfg.nodes)
    vectors: dict[tuple[str, str], list[bool]] = {}
    for k, graph in enumerate((cfg, cdg, ddg)):
        for s, d in sorted(graph.edges):
            if s not in universe or d not in universe:
                raise InconsistentUniverse(f"{EdgeType(k).name} edge {s}->{d} not in CFG node set")
            vectors.setdefault((s, d), [False, False, False])[k] = True
    patch = set(patch_blocks)
    missing = patch - universe
    if missing:
        raise InconsistentUniverse(f"patch blocks {sorted(missing)} not in CFG node set")
    nodes = []
    for nid in cfg.nodes:
        block = function.block(nid) if function is not None else None
        tokens = block.token_lists if block is not None else ()
        kind = NodeKind.PATCH if nid in patch else NodeKind.CONTEXT
        nodes.append(CpgNode(nid, kind, tokens, block))
    return Cpg(nodes, {e: tuple(v) for e, v in vectors.items()})


def build_function_cpg(f: Function, patch_blocks: Iterable[str] = ()) -> Cpg:
    cfg = build_cfg(f)
    cdg = derive_cdg(cfg)
    ddg = build_ddg(f, cfg)
    return merge_cpg(cfg, cdg, ddg, patch_blocks, f)


def _union_neighbors(cpg: Cpg) -> tuple[dict[str, set[str]], dict[str, set[str]]]:
    succ: dict[str, set[str]] = {n: set() for n in cpg.node_ids}
    pred: dict[str, set[str]] = {n: set() for n in cpg.node_ids}
    for s, d in cpg.edges:
        succ[s].add(d)
        pred[d].add(s)
    return succ, pred


def induced(cpg: Cpg, keep: Iterable[str], patch: Iterable[str], truncated: bool = False,
            edge_filter=None) -> Cpg:
    keep = set(keep)
    patch = set(patch)
    nodes = [
        CpgNode(n.id, NodeKind.PATCH if n.id in patch else NodeKind.CONTEXT, n.tokens, n.block)
        for n in cpg.nodes
        if n.id in keep
    ]
    edges = {}
    for (s, d), vec in cpg.edges.items():
        if s in keep and d in keep:
            if edge_filter is not None:
                vec = edge_filter(vec)
                if not any(vec):
                    continue
            edges[(s, d)] = vec
    return Cpg(nodes, edges, truncated)


def slice_cpg(cpg: Cpg, patch_blocks: Iterable[str], config: SliceConfig = SliceConfig(),
              internal_only: bool = False, clock=time.monotonic) -> Cpg:
    """Keep the patch blocks and every block within ``stride_n`` forward or
    backward hops of them, over all three edge types.

    With ``internal_only`` only the patch blocks and the CFG edges among them
    are kept.  If the time limit expires the partial slice is returned with
    ``truncated`` set.
    """
    patch = set(patch_blocks)
    ids = set(cpg.node_ids)
    if not patch <= ids:
        raise KeyError(f"patch blocks {sorted(patch - ids)} not in graph")
    if internal_only:
        return induced(cpg, patch, patch, edge_filter=lambda v: (v[0], False, False))

    succ, pred = _union_neighbors(cpg)
    deadline = clock() + config.time_limit_seconds
    for_slices: set[str] = set()
    back_slices: set[str] = set()
    fwd_frontier = set(patch)
    back_frontier = set(patch)
    truncated = False
    for _ in range(config.stride_n):
        if clock() > deadline:
            truncated = True
            break
        reached = patch | for_slices | back_slices
        fwd_next = set()
        for n in fwd_frontier | back_frontier:
            fwd_next |= succ[n]
        back_next = set()
        for n in fwd_frontier | back_frontier:
            back_next |= pred[n]
        fwd_next -= reached
        back_next -= reached | fwd_next
        if not fwd_next and not back_next:
            break
        for_slices |= fwd_next
        back_slices |= back_next
        fwd_frontier, back_frontier = fwd_next, back_next
    return induced(cpg, patch | for_slices | back_slices, patch, truncated)


# ---------------------------------------------------------------- DOT

_DOT_EDGE_STYLE = ("solid", "dashed", "dotted")


def _dot_quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def cpg_to_dot(cpg: Cpg, name: str = "cpg") -> str:
    lines = [f"digraph {_dot_quote(name)} {{"]
    for n in cpg.nodes:
        if n.kind is NodeKind.PATCH:
            attrs = 'style=filled, fillcolor="orange", shape=box'
        else:
            attrs = 'style=filled, fillcolor="lightyellow", shape=box'
        label = n.id
        if n.tokens:
            label += "\n" + "\n".join(" ".join(t.text for t in ins) for ins in n.tokens)
        lines.append(f"  {_dot_quote(n.id)} [label={_dot_quote(label)}, {attrs}];")
    for (s, d), vec in sorted(cpg.edges.items()):
        styles = [_DOT_EDGE_STYLE[k] for k in range(NUM_EDGE_TYPES) if vec[k]]
        types = [EdgeType(k).name.lower() for k in range(NUM_EDGE_TYPES) if vec[k]]
        lines.append(
            f"  {_dot_quote(s)} -> {_dot_quote(d)} [style={_dot_quote(','.join(styles))}, "
            f"label={_dot_quote('+'.join(types))}];"
        )
    lines.append("}")
    return "\n".join(lines) + "\n"
