"""Synthetic patch pairs for desk-scale experiments.

Security-like commits insert a small guard (a test + conditional branch and
one or two error-path blocks).  Non-security-like commits grow straight-line
code in several blocks.  Everything is generated as assembly text and runs
through the regular extraction pipeline.  The data is synthetic and says
nothing about real patches.
"""

from __future__ import annotations

import os
import random
from dataclasses import dataclass

from bingo.flowgraphs import SliceConfig
from bingo.patchdiff import DatasetManifest, Label, ManifestEntry, TwinGraph, save_twin
from bingo.pipeline import extract_text

REGS = ("rax", "rbx", "rcx", "rdx", "rsi", "rdi", "r8", "r12", "r13")
CONDS = ("je", "jne", "jle", "jl", "jge", "jg")


def _const(rng: random.Random) -> str:
    return hex(rng.choice((0, 1, 2, 4, 8, 0x10, 0x18, 0x20, 0x28, 0x40, 0x58, 0x100)))


def _straight(rng: random.Random) -> str:
    r, r2 = rng.sample(REGS, 2)
    off = hex(8 * rng.randint(1, 12))
    return rng.choice((
        f"mov {r}, qword [rbp-{off}]",
        f"mov qword [rbp-{off}], {r}",
        f"add {r}, {r2}",
        f"sub {r}, {_const(rng)}",
        f"lea {r}, [{r2}+{_const(rng)}]",
        f"mov {r}, {_const(rng)}",
        f"mov {r}, {r2}",
        f"imul {r}, {r2}",
        f"mov rdi, {r}",
        f"call helper_{rng.randint(0, 5)}",
    ))


@dataclass
class _Block:
    label: str
    body: list[str]
    term: list[str]


def _base_function(rng: random.Random, name: str) -> list[_Block]:
    n = rng.randint(5, 9)
    blocks = []
    for i in range(n):
        body = [_straight(rng) for _ in range(rng.randint(2, 5))]
        term: list[str] = []
        if i == n - 1:
            term = ["ret"]
        elif i < n - 2 and rng.random() < 0.45:
            r = rng.choice(REGS)
            target = rng.randint(i + 2, n - 1)
            term = [f"cmp {r}, {_const(rng)}", f"{rng.choice(CONDS)} b{target}"]
        elif i < n - 2 and rng.random() < 0.15:
            term = [f"jmp b{rng.randint(i + 2, n - 1)}"]
        blocks.append(_Block(f"b{i}", body, term))
    return blocks


def _render(funcs: dict[str, list[_Block]]) -> str:
    out = []
    for name, blocks in funcs.items():
        out.append(f"FUNC {name}")
        for b in blocks:
            out.append(f"{b.label}:")
            out.extend("  " + ins for ins in b.body + b.term)
    return "\n".join(out) + "\n"


def _copy(blocks: list[_Block]) -> list[_Block]:
    return [_Block(b.label, list(b.body), list(b.term)) for b in blocks]


def _security_patch(rng: random.Random, blocks: list[_Block]) -> list[_Block]:
    """Split a block with a null/bounds check that branches to an error path."""
    blocks = _copy(blocks)
    i = rng.randrange(0, len(blocks) - 1)
    victim = blocks[i]
    cut = rng.randint(1, len(victim.body))
    r = rng.choice(REGS)
    check = rng.choice((
        [f"test {r}, {r}", f"{rng.choice(('je', 'jz'))} p_err"],
        [f"cmp {r}, {_const(rng)}", f"{rng.choice(('jg', 'jge', 'jl'))} p_err"],
    ))
    head = _Block(victim.label, victim.body[:cut], check)
    tail = _Block("p_ok", victim.body[cut:] or ["mov rax, rbx"], victim.term)
    exit_label = blocks[-1].label
    err = [_Block("p_err", ["mov eax, 0xffffffea"], [f"jmp {exit_label}"])]
    if rng.random() < 0.5:
        err = [
            _Block("p_err", [f"mov rdi, {rng.choice(REGS)}", "call kfree"], []),
            _Block("p_err2", ["mov eax, 0xfffffff4"], [f"jmp {exit_label}"]),
        ]
    return blocks[:i] + [head, tail] + blocks[i + 1:-1] + err + [blocks[-1]]


def _feature_patch(rng: random.Random, blocks: list[_Block]) -> list[_Block]:
    """Grow straight-line code in several blocks, sometimes adding a block."""
    blocks = _copy(blocks)
    for i in rng.sample(range(len(blocks)), k=min(len(blocks), rng.randint(2, 3))):
        extra = [_straight(rng) for _ in range(rng.randint(3, 7))]
        pos = rng.randint(0, len(blocks[i].body))
        blocks[i].body[pos:pos] = extra
    if rng.random() < 0.5:
        j = rng.randrange(0, len(blocks) - 1)
        if not blocks[j].term:
            new = _Block("p_new", [_straight(rng) for _ in range(rng.randint(4, 8))], [])
            blocks.insert(j + 1, new)
    return blocks


def generate_pair(rng: random.Random, security: bool, functions: int = 1) -> tuple[str, str]:
    pre_funcs, post_funcs = {}, {}
    for f in range(functions + 1):  # one untouched function as well
        name = f"func_{f}"
        base = _base_function(rng, name)
        pre_funcs[name] = base
        if f < functions:
            post_funcs[name] = _security_patch(rng, base) if security else _feature_patch(rng, base)
        else:
            post_funcs[name] = _copy(base)
    return _render(pre_funcs), _render(post_funcs)


def generate_twins(count: int, seed: int = 7, config: SliceConfig = SliceConfig(),
                   multi_function_rate: float = 0.15) -> list[TwinGraph]:
    """At least ``count`` labeled twin graphs (exactly ``count`` are returned),
    about half of them security-like."""
    rng = random.Random(seed)
    twins: list[TwinGraph] = []
    i = 0
    while len(twins) < count:
        security = rng.random() < 0.5
        nfunc = 2 if rng.random() < multi_function_rate else 1
        pre, post = generate_pair(rng, security, nfunc)
        label = Label.SECURITY if security else Label.NON_SECURITY
        commit = f"synth-{seed}-{i:05d}"
        i += 1
        got, _, _ = extract_text(pre, post, None, config, label, commit)
        twins.extend(got[: count - len(twins)])
    return twins


def write_dataset(out_dir: str, count: int = 400, seed: int = 7, split_ratio: float = 0.8,
                  config: SliceConfig = SliceConfig()) -> DatasetManifest:
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for n, twin in enumerate(generate_twins(count, seed, config)):
        fname = f"{twin.commit_id}__{twin.function}.twin.json"
        save_twin(twin, os.path.join(out_dir, fname))
        entries.append(ManifestEntry(fname, twin.commit_id, twin.label))
    manifest = DatasetManifest(entries, split_ratio, seed, out_dir)
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest
