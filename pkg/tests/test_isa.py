from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marca.compiler import lower
from marca.core import tiny_config
from marca.isa import (
    FLAG_2D,
    FLAG_ACC,
    FLAG_LI,
    AssemblyError,
    EncodingError,
    IllegalInstructionError,
    Instruction,
    Opcode,
    Program,
    assemble,
    decode,
    disassemble,
    encode,
    pack_2d,
    pack_cregs,
    unpack_2d,
)

CORPUS = sorted((Path(__file__).parent / "corpus").glob("*.s"))

instructions = st.builds(
    Instruction,
    st.sampled_from(list(Opcode)),
    st.integers(0, 15), st.integers(0, 15), st.integers(0, 15), st.integers(0, 15),
    flags=st.integers(0, 3),
    imm=st.integers(0, (1 << 40) - 1),
)


@settings(max_examples=10_000, deadline=None)
@given(instructions)
def test_encode_decode_identity(inst):
    word = encode(inst)
    assert 0 <= word < 1 << 64
    assert decode(word) == inst
    assert encode(decode(word)) == word


def test_field_layout():
    inst = Instruction(Opcode.LIN, dst=1, src1=2, src2=3, src3=4, flags=FLAG_ACC, imm=0xABCDE)
    w = encode(inst)
    assert w >> 58 == 1
    assert (w >> 54) & 0xF == 1 and (w >> 50) & 0xF == 2 and (w >> 46) & 0xF == 3 and (w >> 42) & 0xF == 4
    assert (w >> 40) & 3 == FLAG_ACC and w & ((1 << 40) - 1) == 0xABCDE


def test_illegal_and_invalid():
    with pytest.raises(IllegalInstructionError):
        decode(0)
    with pytest.raises(IllegalInstructionError):
        decode(63 << 58)
    with pytest.raises(EncodingError):
        decode(1 << 64)
    with pytest.raises(EncodingError):
        Instruction(Opcode.EWA, dst=16)
    with pytest.raises(EncodingError):
        Instruction(Opcode.EWA, imm=1 << 40)
    with pytest.raises(EncodingError):
        Instruction(99)
    with pytest.raises(EncodingError):
        pack_cregs(16)


def test_2d_packing():
    imm = pack_2d(300, 4096)
    assert unpack_2d(imm) == (300, 4096)
    with pytest.raises(EncodingError):
        pack_2d(0, 4)


@pytest.mark.parametrize("path", CORPUS, ids=lambda p: p.stem)
def test_corpus_round_trip(path):
    prog = assemble(path.read_text())
    text = disassemble(prog)
    again = assemble(text)
    assert again.to_bytes() == prog.to_bytes()
    assert disassemble(again) == text
    assert Program.from_bytes(prog.to_bytes()).to_bytes() == prog.to_bytes()


def test_assembler_semantics():
    prog = assemble((CORPUS[0].parent / "ew_chain.s").read_text())
    assert prog.instructions[0] == Instruction(Opcode.LOAD, dst=1, flags=FLAG_LI, imm=0)
    assert prog.instructions[-1].imm == 8 * 8  # label "end" is the 9th instruction
    assert prog.creg_init[:3] == [32, 16, 0x3F800000]
    lin = assemble((CORPUS[0].parent / "linear_tile.s").read_text())
    assert lin.creg_float(2) == np.float32(1e-5)
    assert lin.instructions[6].flags == FLAG_2D
    assert lin.instructions[-1].imm == 8 * 14 + 8


def test_compiled_program_round_trip():
    prog = lower(tiny_config()).program
    text = disassemble(prog, annotate=True)
    assert assemble(text).to_bytes() == prog.to_bytes()
    prog.check_registers()


def test_file_io(tmp_path):
    prog = lower(tiny_config(seq_len=2)).program
    prog.save(tmp_path / "p.bin")
    data = (tmp_path / "p.bin").read_bytes()
    assert data[:4] == b"MRCA"
    assert len(data) == 6 + 64 + 8 * len(prog)
    assert Program.load(tmp_path / "p.bin").words() == prog.words()
    with pytest.raises(ValueError):
        Program.from_bytes(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        Program.from_bytes(data[:-3])


@pytest.mark.parametrize("src,line", [
    ("FOO r1, #0", 1),
    ("\nEWA r1, r99, #0", 2),
    ("EWA r1, #0, r2", 1),
    ("LI r1, #missing", 1),
    ("LI r1, #0x10000000000", 1),
    (".creg c16 = 1", 1),
    (".bogus 1", 1),
    ("EWA r1, r2, r3, r4, r5", 1),
    ("EWA x1", 1),
])
def test_assembly_errors(src, line):
    with pytest.raises(AssemblyError) as e:
        assemble(src)
    assert e.value.line == line


def test_register_check():
    prog = assemble("EWA r1, r2, r3, #0")
    with pytest.raises(EncodingError):
        prog.check_registers()
