"""Textual assembly model: parsing, printing, tokenization and block fingerprints.

The input format is line oriented::

    FUNC name
    label:
      mnemonic operands ;line=17

Two-space indentation marks an instruction line.  A ``;line=N`` suffix carries
the source line that produced the instruction.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from bingo.hashing import fnv1a64


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        self.message = message
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class TokenizeError(ValueError):
    pass


class TokenKind(enum.Enum):
    OPCODE = "opcode"
    REGISTER = "register"
    CONSTANT = "constant"
    RESERVED_WORD = "reserved"
    OPERATOR = "operator"
    SPECIAL = "special"


class Side(enum.Enum):
    PRE_PATCH = "pre"
    POST_PATCH = "post"


@dataclass(frozen=True)
class Token:
    text: str
    kind: TokenKind

    def __post_init__(self):
        if not self.text:
            raise TokenizeError("empty token")


PAD, UNK, MASK, CLS, SEP = "[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]"
# Stands in for a branch/call target; label names never reach the token stream.
LABEL = "[LABEL]"
SPECIAL_TOKENS = (PAD, UNK, MASK, CLS, SEP, LABEL)

_GPR_FAMILIES = {
    "rax": ("eax", "ax", "al", "ah"),
    "rbx": ("ebx", "bx", "bl", "bh"),
    "rcx": ("ecx", "cx", "cl", "ch"),
    "rdx": ("edx", "dx", "dl", "dh"),
    "rsi": ("esi", "si", "sil"),
    "rdi": ("edi", "di", "dil"),
    "rbp": ("ebp", "bp", "bpl"),
    "rsp": ("esp", "sp", "spl"),
    "rip": ("eip", "ip"),
}
for _i in range(8, 16):
    _GPR_FAMILIES[f"r{_i}"] = (f"r{_i}d", f"r{_i}w", f"r{_i}b")

#: Maps every register name to its 64-bit family name.
REGISTER_FAMILY: dict[str, str] = {}
for _full, _subs in _GPR_FAMILIES.items():
    REGISTER_FAMILY[_full] = _full
    for _s in _subs:
        REGISTER_FAMILY[_s] = _full

RESERVED_WORDS = frozenset({"byte", "word", "dword", "qword", "ptr"})
OPERATORS = frozenset("+-*[]")

JUMP_MNEMONICS = frozenset({"jmp", "je", "jne", "jle", "jl", "jge", "jg", "jz", "jnz"})
BRANCH_MNEMONICS = JUMP_MNEMONICS | {"ret"}
# call targets are tokenized like jump labels but do not end a block
LABEL_OPERAND_MNEMONICS = JUMP_MNEMONICS | {"call"}

_CONST_RE = re.compile(r"0x[0-9a-f]+|[0-9]+")
_WORD_RE = re.compile(r"[a-z0-9_]+")
_ALLOWED_RE = re.compile(r"[a-z0-9_+\-*\[\] ]*")
_IDENT_RE = re.compile(r"[a-z_.][a-z0-9_.]*")


def _classify_word(word: str) -> TokenKind | None:
    if word in REGISTER_FAMILY:
        return TokenKind.REGISTER
    if word in RESERVED_WORDS:
        return TokenKind.RESERVED_WORD
    if _CONST_RE.fullmatch(word):
        return TokenKind.CONSTANT
    return None


def split_operands(operand_text: str) -> list[str]:
    text = operand_text.strip().lower()
    if not text:
        return []
    return [op.strip() for op in text.split(",")]


def tokenize_instruction(mnemonic: str, operand_text: str) -> list[Token]:
    """Split one instruction into opcode, register, constant, reserved-word and
    operator tokens.

    >>> [t.text for t in tokenize_instruction("mov", "rax, qword [rsp+0x58]")]
    ['mov', 'rax', 'qword', '[', 'rsp', '+', '0x58', ']']
    """
    mnemonic = mnemonic.strip().lower()
    if not mnemonic:
        raise TokenizeError("empty mnemonic")
    tokens = [Token(mnemonic, TokenKind.OPCODE)]
    for operand in split_operands(operand_text):
        if not operand:
            raise TokenizeError(f"empty operand in {operand_text!r}")
        if mnemonic in LABEL_OPERAND_MNEMONICS and _IDENT_RE.fullmatch(operand) and operand not in REGISTER_FAMILY:
            tokens.append(Token(LABEL, TokenKind.SPECIAL))
            continue
        if not _ALLOWED_RE.fullmatch(operand):
            bad = sorted(set(re.sub(r"[a-z0-9_+\-*\[\] ]", "", operand)))
            raise TokenizeError(f"illegal character(s) {''.join(bad)!r} in operand {operand!r}")
        pos = 0
        while pos < len(operand):
            ch = operand[pos]
            if ch == " ":
                pos += 1
            elif ch in OPERATORS:
                tokens.append(Token(ch, TokenKind.OPERATOR))
                pos += 1
            else:
                m = _WORD_RE.match(operand, pos)
                word = m.group(0)
                kind = _classify_word(word)
                if kind is None:
                    raise TokenizeError(f"unknown operand word {word!r} in {operand!r}")
                tokens.append(Token(word, kind))
                pos = m.end()
    return tokens


def _hex_word(m: re.Match) -> str:
    word = m.group(0)
    if not _CONST_RE.fullmatch(word):
        return word
    return hex(int(word, 16 if word.startswith("0x") else 10))


def canonical_operands(mnemonic: str, operand_text: str) -> str:
    """Operands joined with ", " and every constant rewritten as lowercase hex
    without leading zeros (``8`` and ``0x08`` both become ``0x8``)."""
    labels = mnemonic.strip().lower() in LABEL_OPERAND_MNEMONICS
    return ", ".join(
        op if labels and _IDENT_RE.fullmatch(op) else _WORD_RE.sub(_hex_word, op)
        for op in split_operands(operand_text)
    )


def branch_target(mnemonic: str, operand_text: str) -> str | None:
    """Label named by a jump instruction, or None for indirect/non-jumps."""
    if mnemonic not in JUMP_MNEMONICS:
        return None
    ops = split_operands(operand_text)
    if len(ops) == 1 and _IDENT_RE.fullmatch(ops[0]) and ops[0] not in REGISTER_FAMILY:
        return ops[0]
    return None


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    operand_text: str = ""
    tokens: tuple[Token, ...] = ()
    src_line: int | None = None
    address: int = 0

    @classmethod
    def make(cls, mnemonic: str, operand_text: str = "", src_line: int | None = None,
             address: int = 0) -> "Instruction":
        mnemonic = mnemonic.strip().lower()
        operand_text = canonical_operands(mnemonic, operand_text)
        toks = tuple(tokenize_instruction(mnemonic, operand_text))
        return cls(mnemonic, operand_text, toks, src_line, address)

    @property
    def operands(self) -> list[str]:
        return split_operands(self.operand_text)

    def text(self) -> str:
        return f"{self.mnemonic} {self.operand_text}".rstrip()


@dataclass(frozen=True)
class BasicBlock:
    id: str
    instructions: tuple[Instruction, ...]
    terminator_targets: tuple[str, ...] = ()
    falls_through_to: str | None = None

    def successors(self) -> list[str]:
        succ = list(self.terminator_targets)
        if self.falls_through_to is not None and self.falls_through_to not in succ:
            succ.append(self.falls_through_to)
        return succ

    @property
    def token_lists(self) -> tuple[tuple[Token, ...], ...]:
        return tuple(ins.tokens for ins in self.instructions)


@dataclass(frozen=True)
class Function:
    name: str
    blocks: tuple[BasicBlock, ...]
    entry: str

    def block(self, block_id: str) -> BasicBlock:
        for b in self.blocks:
            if b.id == block_id:
                return b
        raise KeyError(block_id)

    @property
    def block_ids(self) -> list[str]:
        return [b.id for b in self.blocks]


@dataclass(frozen=True)
class Program:
    functions: tuple[Function, ...]
    commit_id: str = ""
    side: Side = Side.PRE_PATCH

    def function(self, name: str) -> Function:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def function_names(self) -> list[str]:
        return [f.name for f in self.functions]


_LABEL_RE = re.compile(r"([A-Za-z_.][A-Za-z0-9_.]*):")
_LINE_ANN_RE = re.compile(r"(.*?)\s*;line=([0-9]+)")


def _finish_function(name, raw_blocks, pending_targets, lineno) -> Function:
    if not raw_blocks:
        return Function(name, (), "")
    labels = [lbl for lbl, _, _ in raw_blocks]
    known = set(labels)
    for target, tline in pending_targets:
        if target not in known:
            raise ParseError(f"undefined label {target!r}", tline)
    blocks = []
    for idx, (label, instrs, bline) in enumerate(raw_blocks):
        if not instrs:
            raise ParseError(f"empty block {label!r}", bline)
        last = instrs[-1]
        targets = []
        target = branch_target(last.mnemonic, last.operand_text)
        if target is not None:
            targets.append(target)
        falls = None
        if last.mnemonic not in ("jmp", "ret") and idx + 1 < len(raw_blocks):
            falls = labels[idx + 1]
        blocks.append(BasicBlock(label, tuple(instrs), tuple(targets), falls))
    return Function(name, tuple(blocks), labels[0])


def parse_program(text: str, commit_id: str = "", side: Side = Side.PRE_PATCH) -> Program:
    functions: list[Function] = []
    names: set[str] = set()
    cur_name: str | None = None
    raw_blocks: list = []
    pending: list = []
    address = 0

    def close(lineno):
        nonlocal cur_name, raw_blocks, pending
        if cur_name is not None:
            fn = _finish_function(cur_name, raw_blocks, pending, lineno)
            functions.append(fn)
        cur_name, raw_blocks, pending = None, [], []

    lines = text.split("\n")
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if line.startswith("  ") and line[2:3] not in (" ", "\t"):
            if cur_name is None or not raw_blocks:
                raise ParseError("instruction outside of a block", lineno)
            body = line[2:].rstrip()
            src_line = None
            m = _LINE_ANN_RE.fullmatch(body)
            if m:
                body, src_line = m.group(1), int(m.group(2))
                if src_line <= 0:
                    raise ParseError("line annotation must be positive", lineno)
            elif ";" in body:
                raise ParseError(f"malformed annotation in {body!r}", lineno)
            mnemonic, _, operands = body.strip().partition(" ")
            try:
                ins = Instruction.make(mnemonic, operands, src_line, address)
            except TokenizeError as exc:
                raise ParseError(str(exc), lineno) from None
            address += 1
            instrs = raw_blocks[-1][1]
            if instrs and instrs[-1].mnemonic in BRANCH_MNEMONICS:
                raise ParseError(f"instruction after block terminator {instrs[-1].mnemonic!r}", lineno)
            instrs.append(ins)
            target = branch_target(ins.mnemonic, ins.operand_text)
            if target is not None:
                pending.append((target, lineno))
            continue
        stripped = line.rstrip()
        if stripped.startswith("FUNC "):
            close(lineno)
            name = stripped[5:].strip()
            if not name or " " in name:
                raise ParseError(f"bad function name {name!r}", lineno)
            if name in names:
                raise ParseError(f"duplicate function {name!r}", lineno)
            names.add(name)
            cur_name = name
            continue
        m = _LABEL_RE.fullmatch(stripped)
        if m:
            if cur_name is None:
                raise ParseError("block label outside of a function", lineno)
            label = m.group(1).lower()
            if any(label == lbl for lbl, _, _ in raw_blocks):
                raise ParseError(f"duplicate block label {label!r}", lineno)
            raw_blocks.append((label, [], lineno))
            continue
        raise ParseError(f"unknown directive {stripped.split()[0]!r}", lineno)
    close(len(lines))
    for fn in functions:
        if not fn.blocks:
            raise ParseError(f"function {fn.name!r} has no blocks")
    return Program(tuple(functions), commit_id, side)


def print_program(program: Program) -> str:
    out = []
    for fn in program.functions:
        out.append(f"FUNC {fn.name}")
        for block in fn.blocks:
            out.append(f"{block.id}:")
            for ins in block.instructions:
                line = "  " + ins.text()
                if ins.src_line is not None:
                    line += f" ;line={ins.src_line}"
                out.append(line)
    return "\n".join(out) + "\n"


def _abstract_token(tok: Token) -> str:
    if tok.kind is TokenKind.CONSTANT:
        return "<const>"
    return tok.text


def block_fingerprint(block: BasicBlock, seed: int = 0) -> int:
    """64-bit hash of the block's instruction shapes.

    Constant values and branch labels are abstracted away, register names and
    operators are kept.
    """
    parts = []
    for ins in block.instructions:
        parts.append(" ".join(_abstract_token(t) for t in ins.tokens))
    return fnv1a64("\n".join(parts).encode("utf-8"), seed)


def instruction_count(program: Program) -> int:
    return sum(len(b.instructions) for f in program.functions for b in f.blocks)


def make_block(block_id: str, lines: Iterable[str] | str, targets: Sequence[str] = (),
               falls_through_to: str | None = None) -> BasicBlock:
    """Convenience constructor used by generators and tests."""
    if isinstance(lines, str):
        lines = [ln for ln in lines.split("\n") if ln.strip()]
    instrs = []
    for i, ln in enumerate(lines):
        mnemonic, _, ops = ln.strip().partition(" ")
        instrs.append(Instruction.make(mnemonic, ops, address=i))
    return BasicBlock(block_id, tuple(instrs), tuple(targets), falls_through_to)
