"""64-bit instruction set: encoding, binary program files and assembly text.

Word layout (bit ranges inclusive)::

    [63:58] opcode   [57:54] dst   [53:50] src1   [49:46] src2
    [45:42] src3     [41:40] flags [39:0]  imm

General-purpose registers hold 32-bit byte addresses. Compute instructions
name shape descriptors and float constants indirectly: ``imm`` is read as
ten 4-bit constant-register indices (nibble 0 = bits [3:0]).

=========  ============================================================
opcode     operands / imm nibbles
=========  ============================================================
LIN        dst, src1=X, src2=W, [src3=bias]; n0=M n1=K n2=N n3=bias rows
CONV       dst, src1=padded X, src2=taps [K,D]; n0=L n1=D n2=K
NORM       dst, src1=X, src2=gamma, src3=beta; n0=rows n1=cols n2=eps
EWM, EWA   dst, src1, src2; n0=rows n1=cols n2=src2 rows (tiled)
EXP        dst, src1; n0=rows n1=cols n2=a n3=b n4=c
SILU       dst, src1; n0=rows n1=cols
LOAD       dst=buffer addr, src1=HBM addr, imm=bytes
LOAD.2D    dst=buffer, src1=HBM, src2=HBM row stride; imm=rows<<20 | row bytes
LI         dst <- imm (a LOAD with the register-write flag)
STORE      dst=HBM addr, src1=buffer addr, imm=bytes (STORE.2D as LOAD.2D)
=========  ============================================================
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

N_REGS = 16
N_CREGS = 16
IMM_BITS = 40
IMM_MASK = (1 << IMM_BITS) - 1
MAGIC = b"MRCA"
VERSION = 1

FLAG_OUTER = 0b01  # EWM/EWA: src1 is a column vector broadcast across columns
FLAG_ACC = 0b10  # LIN: src3 seeds the accumulator
FLAG_2D = 0b01  # LOAD/STORE: strided rows
FLAG_LI = 0b10  # LOAD: write imm into dst register

ROWS_SHIFT = 20
ROW_BYTES_MASK = (1 << ROWS_SHIFT) - 1


class Opcode(IntEnum):
    LIN = 1
    CONV = 2
    NORM = 3
    EWM = 4
    EWA = 5
    EXP = 6
    SILU = 7
    LOAD = 8
    STORE = 9


COMPUTE_OPCODES = frozenset({Opcode.LIN, Opcode.CONV, Opcode.NORM, Opcode.EWM,
                             Opcode.EWA, Opcode.EXP, Opcode.SILU})
MEMORY_OPCODES = frozenset({Opcode.LOAD, Opcode.STORE})


class EncodingError(ValueError):
    pass


class IllegalInstructionError(ValueError):
    def __init__(self, word: int):
        super().__init__(f"illegal instruction word 0x{word:016x} (opcode {word >> 58})")
        self.word = word


class AssemblyError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    dst: int = 0
    src1: int = 0
    src2: int = 0
    src3: int = 0
    flags: int = 0
    imm: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "opcode", Opcode(self.opcode))
        except ValueError:
            raise EncodingError(f"unknown opcode {self.opcode!r}") from None
        for name in ("dst", "src1", "src2", "src3"):
            v = getattr(self, name)
            if not 0 <= v < N_REGS:
                raise EncodingError(f"{name}={v} out of range 0..{N_REGS - 1}")
        if not 0 <= self.flags < 4:
            raise EncodingError(f"flags={self.flags} does not fit 2 bits")
        if not 0 <= self.imm <= IMM_MASK:
            raise EncodingError(f"imm={self.imm} does not fit {IMM_BITS} bits")

    @property
    def is_li(self) -> bool:
        return self.opcode is Opcode.LOAD and bool(self.flags & FLAG_LI)

    @property
    def is_compute(self) -> bool:
        return self.opcode in COMPUTE_OPCODES

    @property
    def is_memory(self) -> bool:
        return self.opcode in MEMORY_OPCODES and not self.is_li

    def creg(self, nibble: int) -> int:
        return (self.imm >> (4 * nibble)) & 0xF

    def reads(self) -> tuple[int, ...]:
        """Registers this instruction reads."""
        op, f = self.opcode, self.flags
        if op is Opcode.LOAD and f & FLAG_LI:
            return ()
        if op in (Opcode.LOAD, Opcode.STORE):
            return (self.dst, self.src1, self.src2) if f & FLAG_2D else (self.dst, self.src1)
        if op is Opcode.LIN:
            return (self.dst, self.src1, self.src2, self.src3) if f & FLAG_ACC else (self.dst, self.src1, self.src2)
        if op is Opcode.NORM:
            return (self.dst, self.src1, self.src2, self.src3)
        if op in (Opcode.EXP, Opcode.SILU):
            return (self.dst, self.src1)
        return (self.dst, self.src1, self.src2)


def pack_cregs(*indices: int) -> int:
    imm = 0
    for i, c in enumerate(indices):
        if not 0 <= c < N_CREGS:
            raise EncodingError(f"creg index {c} out of range")
        imm |= c << (4 * i)
    return imm


def pack_2d(rows: int, row_bytes: int) -> int:
    if not 0 < row_bytes <= ROW_BYTES_MASK or not 0 < rows < (1 << (IMM_BITS - ROWS_SHIFT)):
        raise EncodingError(f"2-D transfer {rows}x{row_bytes} B does not fit the imm field")
    return (rows << ROWS_SHIFT) | row_bytes


def unpack_2d(imm: int) -> tuple[int, int]:
    return imm >> ROWS_SHIFT, imm & ROW_BYTES_MASK


def transfer_bytes(inst: Instruction) -> int:
    if inst.flags & FLAG_2D:
        rows, row_bytes = unpack_2d(inst.imm)
        return rows * row_bytes
    return inst.imm


def encode(inst: Instruction) -> int:
    return ((int(inst.opcode) << 58) | (inst.dst << 54) | (inst.src1 << 50) | (inst.src2 << 46)
            | (inst.src3 << 42) | (inst.flags << 40) | inst.imm)


def decode(word: int) -> Instruction:
    if not 0 <= word < (1 << 64):
        raise EncodingError(f"word {word!r} is not a 64-bit value")
    op = word >> 58
    if op not in Opcode._value2member_map_:
        raise IllegalInstructionError(word)
    return Instruction(Opcode(op), (word >> 54) & 0xF, (word >> 50) & 0xF, (word >> 46) & 0xF,
                       (word >> 42) & 0xF, (word >> 40) & 0x3, word & IMM_MASK)


# ---------------------------------------------------------------------------
# programs


@dataclass
class Program:
    instructions: list[Instruction] = field(default_factory=list)
    creg_init: list[int] = field(default_factory=lambda: [0] * N_CREGS)
    creg_kinds: list[str | None] = field(default_factory=lambda: [None] * N_CREGS)
    labels: list[str] = field(default_factory=list)
    node_ids: list[int] = field(default_factory=list)
    tensors: list[str | None] = field(default_factory=list)  # HBM tensor touched by each LOAD/STORE

    def __len__(self) -> int:
        return len(self.instructions)

    def words(self) -> list[int]:
        return [encode(i) for i in self.instructions]

    def creg_float(self, idx: int) -> np.float32:
        return np.array([self.creg_init[idx]], dtype=np.uint32).view(np.float32)[0]

    def check_registers(self) -> None:
        """Every register read must follow a write (LI) to that register."""
        written: set[int] = set()
        for i, inst in enumerate(self.instructions):
            for r in inst.reads():
                if r not in written:
                    raise EncodingError(f"instruction {i} ({mnemonic(inst)}) reads r{r} before any write")
            if inst.is_li:
                written.add(inst.dst)

    def to_bytes(self) -> bytes:
        head = MAGIC + struct.pack("<H", VERSION) + struct.pack(f"<{N_CREGS}I", *self.creg_init)
        return head + struct.pack(f"<{len(self.instructions)}Q", *self.words())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Program":
        if data[:4] != MAGIC:
            raise ValueError("not a program file (bad magic)")
        (version,) = struct.unpack_from("<H", data, 4)
        if version != VERSION:
            raise ValueError(f"unsupported program version {version}")
        off = 6
        cregs = list(struct.unpack_from(f"<{N_CREGS}I", data, off))
        off += 4 * N_CREGS
        body = data[off:]
        if len(body) % 8:
            raise ValueError("truncated instruction stream")
        words = struct.unpack(f"<{len(body) // 8}Q", body)
        return cls([decode(w) for w in words], cregs)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Program":
        return cls.from_bytes(Path(path).read_bytes())


def float_bits(v: float) -> int:
    return int(np.array([v], dtype=np.float32).view(np.uint32)[0])


# ---------------------------------------------------------------------------
# assembly text

_BASE_NAMES = {op: op.name for op in Opcode}
_SPECIAL = {
    (Opcode.LIN, FLAG_ACC): "LIN.ACC",
    (Opcode.EWM, FLAG_OUTER): "EWM.OUTER",
    (Opcode.EWA, FLAG_OUTER): "EWA.OUTER",
    (Opcode.LOAD, FLAG_2D): "LOAD.2D",
    (Opcode.LOAD, FLAG_LI): "LI",
    (Opcode.STORE, FLAG_2D): "STORE.2D",
}
_BY_NAME = {name: key for key, name in _SPECIAL.items()}
_BY_NAME.update({name: (op, 0) for op, name in _BASE_NAMES.items()})
_FLAG_SUFFIX = re.compile(r"^([A-Z]+)\.F([0-3])$")
_REG = re.compile(r"^[rc](\d+)$", re.IGNORECASE)
_SYMBOL = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")


def mnemonic(inst: Instruction) -> str:
    key = (inst.opcode, inst.flags)
    if key in _SPECIAL:
        return _SPECIAL[key]
    if inst.flags == 0:
        return _BASE_NAMES[inst.opcode]
    return f"{_BASE_NAMES[inst.opcode]}.F{inst.flags}"


def _parse_mnemonic(text: str, line: int) -> tuple[Opcode, int]:
    name = text.upper()
    if name in _BY_NAME:
        return _BY_NAME[name]
    m = _FLAG_SUFFIX.match(name)
    if m and m.group(1) in Opcode.__members__:
        return Opcode[m.group(1)], int(m.group(2))
    raise AssemblyError(f"unknown mnemonic {text!r}", line)


def _parse_int(text: str) -> int:
    return int(text, 0)


def _eval_imm(expr: str, symbols: dict[str, int], line: int) -> int:
    expr = expr.strip()
    m = re.match(r"^([^+\-]+)(?:([+\-])\s*(\S+))?$", expr) if not expr.startswith("-") else None
    if m is None:
        raise AssemblyError(f"bad immediate {expr!r}", line)
    base, sign, off = m.group(1).strip(), m.group(2), m.group(3)

    def term(t: str) -> int:
        if _SYMBOL.match(t):
            if t not in symbols:
                raise AssemblyError(f"undefined label {t!r}", line)
            return symbols[t]
        try:
            return _parse_int(t)
        except ValueError:
            raise AssemblyError(f"bad immediate {t!r}", line) from None

    value = term(base)
    if sign:
        value = value + term(off) if sign == "+" else value - term(off)
    if not 0 <= value <= IMM_MASK:
        raise AssemblyError(f"immediate {value} does not fit {IMM_BITS} bits", line)
    return value


def _parse_creg_value(text: str, line: int) -> tuple[int, str]:
    t = text.strip()
    try:
        if re.match(r"^-?\d+$", t) or t.lower().startswith("0x"):
            v = _parse_int(t)
            if not -(1 << 31) <= v < (1 << 32):
                raise AssemblyError(f"constant {t} does not fit 32 bits", line)
            return v & 0xFFFFFFFF, "int" if not t.lower().startswith("0x") else "raw"
        return float_bits(float(t)), "float"
    except ValueError:
        raise AssemblyError(f"bad constant {t!r}", line) from None


def assemble(text: str) -> Program:
    """Two-pass assembler. One statement per line, ``;`` comments,
    ``name:`` labels (byte address of the next instruction),
    ``.equ NAME, value`` symbols and ``.creg cN = value`` directives."""
    statements: list[tuple[int, str]] = []
    symbols: dict[str, int] = {}
    prog = Program()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        while True:
            m = re.match(r"^([A-Za-z_][A-Za-z0-9_.]*)\s*:\s*(.*)$", line)
            if not m:
                break
            symbols[m.group(1)] = 8 * len(statements)
            line = m.group(2).strip()
        if not line:
            continue
        if line.startswith("."):
            directive, _, rest = line.partition(" ")
            directive = directive.lower()
            if directive == ".equ":
                parts = re.split(r"\s*[,=]\s*|\s+", rest.strip(), maxsplit=1)
                if len(parts) != 2 or not _SYMBOL.match(parts[0]):
                    raise AssemblyError(f"malformed .equ {rest!r}", lineno)
                symbols[parts[0]] = _eval_imm(parts[1], symbols, lineno)
            elif directive == ".creg":
                m = re.match(r"^c(\d+)\s*=\s*(.+)$", rest.strip(), re.IGNORECASE)
                if not m:
                    raise AssemblyError(f"malformed .creg {rest!r}", lineno)
                idx = int(m.group(1))
                if idx >= N_CREGS:
                    raise AssemblyError(f"constant register c{idx} out of range", lineno)
                prog.creg_init[idx], prog.creg_kinds[idx] = _parse_creg_value(m.group(2), lineno)
            else:
                raise AssemblyError(f"unknown directive {directive}", lineno)
            continue
        statements.append((lineno, line))

    for lineno, line in statements:
        head, _, rest = line.partition(" ")
        opcode, flags = _parse_mnemonic(head, lineno)
        operands = [o.strip() for o in rest.split(",")] if rest.strip() else []
        regs: list[int] = []
        imm = 0
        for i, op in enumerate(operands):
            if op.startswith("#"):
                if i != len(operands) - 1:
                    raise AssemblyError("immediate must be the last operand", lineno)
                imm = _eval_imm(op[1:], symbols, lineno)
                continue
            m = _REG.match(op)
            if not m:
                raise AssemblyError(f"bad operand {op!r}", lineno)
            r = int(m.group(1))
            if r >= N_REGS:
                raise AssemblyError(f"register {op} out of range", lineno)
            regs.append(r)
        if len(regs) > 4:
            raise AssemblyError("too many register operands", lineno)
        regs += [0] * (4 - len(regs))
        prog.instructions.append(Instruction(opcode, *regs, flags=flags, imm=imm))
        prog.labels.append("")
        prog.node_ids.append(-1)
    return prog


def _format_creg(bits: int, kind: str | None) -> str:
    if kind == "int":
        return str(bits)
    if kind == "float":
        v = np.array([bits], dtype=np.uint32).view(np.float32)[0]
        text = repr(float(v))
        if float_bits(float(text)) == bits and np.isfinite(v):
            return text if ("." in text or "e" in text) else text + ".0"
    return f"0x{bits:08x}"


def disassemble(prog: Program, *, annotate: bool = False) -> str:
    out = []
    for i in range(N_CREGS):
        if prog.creg_init[i] or prog.creg_kinds[i]:
            out.append(f".creg c{i} = {_format_creg(prog.creg_init[i], prog.creg_kinds[i])}")
    for idx, inst in enumerate(prog.instructions):
        regs = [inst.dst, inst.src1, inst.src2, inst.src3]
        while len(regs) > 1 and regs[-1] == 0:
            regs.pop()
        ops = ", ".join(f"r{r}" for r in regs) + f", #{inst.imm}"
        line = f"{mnemonic(inst):<10}{ops}"
        if annotate and idx < len(prog.labels) and prog.labels[idx]:
            line = f"{line:<40}; {prog.labels[idx]}"
        out.append(line)
    return "\n".join(out) + "\n"
