"""Functional and timing model of the compute engine: 32 reconfigurable
compute units (RCUs), each a 16x16 PE array feeding 16 reduction-tree
slices, plus a separate normalization unit."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .approx import (
    F32,
    ExpParams,
    exp_exact_array,
    fast_exp_array,
    silu_exact_array,
    silu_piecewise_array,
)
from .core import TREE_WIDTH, conv1d_padded, layernorm_ref, tree_matmul, tree_reduce
from .isa import (
    FLAG_2D,
    FLAG_ACC,
    FLAG_OUTER,
    N_REGS,
    Instruction,
    Opcode,
    Program,
    transfer_bytes,
    unpack_2d,
)
from .memory import BUFFER_CAPACITY, BufferPool, HbmChannel, TrafficStats

RPE = 16
MM_TILE_CYCLES = 16  # one output column per cycle through the 16 tree slices
EW_TILE_CYCLES = 1
EXP_TILE_CYCLES = 4
SILU_TILE_CYCLES = 4  # lock-step: every lane waits for the 4-op branch
BASELINE_EW_PENALTY = 16


class RcuMode(str, Enum):
    MM = "mm"
    EW = "ew"
    EXP = "exp"
    SILU = "silu"

    @property
    def reduction_enabled(self) -> bool:
        return self is RcuMode.MM


OPCODE_MODE = {
    Opcode.LIN: RcuMode.MM,
    Opcode.EWA: RcuMode.EW,
    Opcode.EWM: RcuMode.EW,
    Opcode.CONV: RcuMode.EW,
    Opcode.EXP: RcuMode.EXP,
    Opcode.SILU: RcuMode.SILU,
}


class StructuralError(AssertionError):
    """A unit was driven in a mode that contradicts its datapath."""


@dataclass(frozen=True)
class MachineConfig:
    n_rcus: int = 32
    rpe_rows: int = RPE
    rpe_cols: int = RPE
    clock_hz: float = 1e9
    issue_overhead_cycles: int = 2
    reg_write_cycles: int = 1
    buffer_capacity: int = BUFFER_CAPACITY
    hbm: HbmChannel = field(default_factory=HbmChannel)
    overlap: bool = True
    baseline_tensor_core: bool = False

    def __post_init__(self):
        if self.n_rcus < 1 or self.issue_overhead_cycles < 0:
            raise ValueError("n_rcus must be >= 1 and issue overhead >= 0")
        if (self.rpe_rows, self.rpe_cols) != (RPE, TREE_WIDTH):
            raise ValueError("the functional model is fixed to 16x16 PE arrays")


# ---------------------------------------------------------------------------
# unit models


def reduce_tree_slice(inputs, acc=0.0) -> np.float32:
    """16-to-1 pairwise tree; the last level takes the accumulator as a third input."""
    v = np.asarray(inputs, dtype=np.float32)
    left, right = tree_reduce(v)
    return F32((left + right) + F32(acc))


def rcu_mm(tile_a, tile_b, acc=None) -> tuple[np.ndarray, int]:
    a = np.asarray(tile_a, dtype=np.float32)
    b = np.asarray(tile_b, dtype=np.float32)
    if a.shape != (RPE, RPE) or b.shape != (RPE, RPE):
        raise ValueError("rcu_mm works on 16x16 tiles")
    acc = np.zeros((RPE, RPE), np.float32) if acc is None else np.asarray(acc, dtype=np.float32)
    out = np.empty((RPE, RPE), dtype=np.float32)
    for j in range(RPE):  # one output column per cycle
        prod = a * b[:, j][None, :]
        left, right = tree_reduce(prod)
        out[:, j] = (left + right) + acc[:, j]
    return out, MM_TILE_CYCLES


def rcu_ew(op: str, a, b) -> tuple[np.ndarray, int]:
    a, b = np.asarray(a, dtype=np.float32), np.asarray(b, dtype=np.float32)
    if op == "add":
        return a + b, EW_TILE_CYCLES
    if op == "mul":
        return a * b, EW_TILE_CYCLES
    raise ValueError(f"unknown element-wise op {op!r}")


def rcu_exp(tile, params: ExpParams | None = None) -> tuple[np.ndarray, int, int]:
    """Returns (values, cycles, faulting lanes)."""
    out, fault = fast_exp_array(tile, params or ExpParams())
    return out, EXP_TILE_CYCLES, int(fault.sum())


def rcu_silu(tile) -> tuple[np.ndarray, int]:
    return silu_piecewise_array(tile), SILU_TILE_CYCLES


def norm_cycles(d: int) -> int:
    return 3 * -(-d // RPE)


def norm_unit(row, gamma, beta, eps: float) -> tuple[np.ndarray, int]:
    row = np.asarray(row, dtype=np.float32).reshape(1, -1)
    d = row.shape[1]
    if d < 1:
        raise ValueError("norm unit needs D >= 1")
    return layernorm_ref(row, gamma, beta, eps)[0], norm_cycles(d)


def _tiles(rows: int, cols: int) -> int:
    return -(-rows // RPE) * -(-cols // RPE)


def makespan(tiles: int, tile_cycles: int, n_rcus: int) -> int:
    """Round-robin placement: the busiest RCU holds ceil(tiles / n) tiles."""
    return -(-tiles // n_rcus) * tile_cycles


# ---------------------------------------------------------------------------
# instruction execution


@dataclass
class MachineState:
    program: Program
    buffer: BufferPool
    hbm: np.ndarray | None
    stats: TrafficStats = field(default_factory=TrafficStats)
    exact_kernels: bool = False
    regs: list[int] = field(default_factory=lambda: [0] * N_REGS)
    index: int = 0

    @property
    def numeric(self) -> bool:
        return self.buffer.data is not None

    def creg(self, inst: Instruction, nibble: int) -> int:
        return self.program.creg_init[inst.creg(nibble)]

    def creg_f(self, inst: Instruction, nibble: int) -> np.float32:
        return self.program.creg_float(inst.creg(nibble))


@dataclass(frozen=True)
class ExecResult:
    compute_cycles: int = 0
    memory_cycles: int = 0
    busy_cycles: int = 0
    tiles: int = 0
    mode: RcuMode | None = None


class HbmFault(RuntimeError):
    pass


def _hbm_check(state: MachineState, addr: int, nbytes: int) -> None:
    if addr % 4 or nbytes % 4:
        raise HbmFault(f"instruction {state.index}: unaligned HBM access at 0x{addr:x}")
    if state.hbm is not None and (addr < 0 or addr + nbytes > state.hbm.size * 4):
        raise HbmFault(f"instruction {state.index}: HBM access [0x{addr:x}, 0x{addr + nbytes:x}) "
                       "outside the image")


def _transfer(inst: Instruction, state: MachineState, machine: MachineConfig) -> ExecResult:
    regs, buf = state.regs, state.buffer
    nbytes = transfer_bytes(inst)
    load = inst.opcode is Opcode.LOAD
    hbm_addr = regs[inst.src1] if load else regs[inst.dst]
    buf_addr = regs[inst.dst] if load else regs[inst.src1]
    if inst.flags & FLAG_2D:
        rows, row_bytes = unpack_2d(inst.imm)
        stride = regs[inst.src2]
    else:
        rows, row_bytes, stride = 1, nbytes, nbytes
    buf.check(buf_addr, nbytes)
    _hbm_check(state, hbm_addr, (rows - 1) * stride + row_bytes)
    if state.numeric and state.hbm is not None:
        w, s = row_bytes // 4, stride // 4
        base = hbm_addr // 4
        idx = (base + np.arange(rows)[:, None] * s + np.arange(w)[None, :]).reshape(-1)
        if load:
            buf.write(buf_addr, state.hbm[idx])
        else:
            state.hbm[idx] = buf.view(buf_addr, rows * w)
    tensor = state.program.tensors[state.index] if state.index < len(state.program.tensors) else None
    state.stats.record_hbm(nbytes, write=not load, tensor=tensor)
    if load:
        state.stats.record_buffer(written=nbytes)
    else:
        state.stats.record_buffer(read=nbytes)
    return ExecResult(memory_cycles=machine.hbm.transfer_cycles(nbytes))


def execute_instruction(inst: Instruction, state: MachineState,
                        machine: MachineConfig | None = None) -> ExecResult:
    """Run one instruction: numerics into the buffer, cycles out."""
    machine = machine or MachineConfig()
    op = inst.opcode
    if inst.is_li:
        state.regs[inst.dst] = inst.imm & 0xFFFFFFFF
        return ExecResult(compute_cycles=machine.reg_write_cycles)
    if op in (Opcode.LOAD, Opcode.STORE):
        return _transfer(inst, state, machine)

    regs, buf, stats = state.regs, state.buffer, state.stats
    numeric = state.numeric
    dst = regs[inst.dst]
    penalty = BASELINE_EW_PENALTY if machine.baseline_tensor_core else 1
    mode = OPCODE_MODE.get(op)
    if mode is not None and mode.reduction_enabled != (op is Opcode.LIN):
        raise StructuralError(f"{op.name} must not consume reduction-tree outputs")

    def operand(reg: int, count: int, shape) -> np.ndarray | None:
        buf.check(regs[reg], 4 * count)
        return buf.read(regs[reg], shape) if numeric else None

    def result(values, count: int) -> None:
        buf.check(dst, 4 * count)
        if numeric:
            buf.write(dst, values)
        stats.record_buffer(written=4 * count)

    if op is Opcode.LIN:
        m, k, n = state.creg(inst, 0), state.creg(inst, 1), state.creg(inst, 2)
        x = operand(inst.src1, m * k, (m, k))
        w = operand(inst.src2, k * n, (k, n))
        bias = None
        reads = m * k + k * n
        if inst.flags & FLAG_ACC:
            br = state.creg(inst, 3)
            if br not in (1, m):
                raise ValueError(f"LIN bias must have 1 or {m} rows, got {br}")
            bias = operand(inst.src3, br * n, (br, n))
            reads += br * n
        if numeric:
            result(tree_matmul(x, w, bias), m * n)
        else:
            result(None, m * n)
        tiles = _tiles(m, n) * max(1, -(-k // TREE_WIDTH))
        busy = makespan(tiles, MM_TILE_CYCLES, machine.n_rcus)
        stats.pe_ops += 2 * m * k * n
    elif op in (Opcode.EWA, Opcode.EWM):
        r, c, r2 = state.creg(inst, 0), state.creg(inst, 1), state.creg(inst, 2)
        if r2 == 0 or r % r2:
            raise ValueError(f"src2 rows {r2} do not tile {r} rows")
        outer = bool(inst.flags & FLAG_OUTER)
        a = operand(inst.src1, r if outer else r * c, (r, 1) if outer else (r, c))
        b = operand(inst.src2, r2 * c, (r2, c))
        reads = (r if outer else r * c) + r2 * c
        if numeric:
            bt = b if r2 == r else np.tile(b, (r // r2, 1))
            result(rcu_ew("add" if op is Opcode.EWA else "mul", a, bt)[0], r * c)
        else:
            result(None, r * c)
        tiles = _tiles(r, c)
        busy = makespan(tiles, EW_TILE_CYCLES * penalty, machine.n_rcus)
        stats.pe_ops += r * c
    elif op in (Opcode.EXP, Opcode.SILU):
        r, c = state.creg(inst, 0), state.creg(inst, 1)
        x = operand(inst.src1, r * c, (r, c))
        reads = r * c
        if op is Opcode.EXP:
            if numeric:
                if state.exact_kernels:
                    out = exp_exact_array(x)
                else:
                    params = ExpParams.from_f32(state.creg_f(inst, 2), state.creg_f(inst, 3), state.creg_f(inst, 4))
                    out, faults = fast_exp_array(x, params)
                    stats.exp_faults += int(faults.sum())
                result(out, r * c)
            else:
                result(None, r * c)
            tile_cycles, ops = EXP_TILE_CYCLES, 3
        else:
            if numeric:
                result(silu_exact_array(x) if state.exact_kernels else silu_piecewise_array(x), r * c)
            else:
                result(None, r * c)
            tile_cycles, ops = SILU_TILE_CYCLES, 4
        tiles = _tiles(r, c)
        busy = makespan(tiles, tile_cycles * penalty, machine.n_rcus)
        stats.pe_ops += ops * r * c
    elif op is Opcode.CONV:
        length, d, k = state.creg(inst, 0), state.creg(inst, 1), state.creg(inst, 2)
        xp = operand(inst.src1, (length + k - 1) * d, (length + k - 1, d))
        w = operand(inst.src2, k * d, (k, d))
        reads = (length + k - 1) * d + k * d
        result(conv1d_padded(xp, w, length) if numeric else None, length * d)
        tiles = _tiles(length, d)
        busy = makespan(tiles, (2 * k - 1) * penalty, machine.n_rcus)
        stats.pe_ops += (2 * k - 1) * length * d
    elif op is Opcode.NORM:
        rows, cols = state.creg(inst, 0), state.creg(inst, 1)
        eps = float(state.creg_f(inst, 2))
        x = operand(inst.src1, rows * cols, (rows, cols))
        g = operand(inst.src2, cols, (cols,))
        bt = operand(inst.src3, cols, (cols,))
        reads = rows * cols + 2 * cols
        result(layernorm_ref(x, g, bt, eps) if numeric else None, rows * cols)
        tiles = 0
        busy = rows * norm_cycles(cols)  # one dedicated unit, not spread over RCUs
        mode = None
        stats.pe_ops += 8 * rows * cols
    else:  # pragma: no cover - decode rejects unknown opcodes
        raise ValueError(f"cannot execute {op!r}")
    stats.record_buffer(read=4 * reads)
    return ExecResult(compute_cycles=machine.issue_overhead_cycles + busy, busy_cycles=busy,
                      tiles=tiles, mode=mode)


def baseline_tensor_core_mode(machine: MachineConfig | None = None) -> MachineConfig:
    """The same machine with element-wise work forced through the reduction path."""
    return replace(machine or MachineConfig(), baseline_tensor_core=True)
