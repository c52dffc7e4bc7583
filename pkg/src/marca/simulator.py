"""Drive a lowered program through the engine and memory models."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .compiler import NODE_CLASS, Lowered, read_hbm_tensor, stage_hbm
from .core import LayerWeights
from .engine import MachineConfig, MachineState, execute_instruction
from .memory import BufferPool, TrafficStats


@dataclass(frozen=True)
class TraceLine:
    index: int
    opcode: str
    tiles: int
    compute_cycles: int
    memory_cycles: int
    stall: int

    def to_dict(self) -> dict:
        return {"index": self.index, "opcode": self.opcode, "tiles": self.tiles,
                "compute_cycles": self.compute_cycles, "memory_cycles": self.memory_cycles,
                "stall": self.stall}


@dataclass
class SimResult:
    output: np.ndarray | None
    stats: TrafficStats
    trace: list[TraceLine] = field(default_factory=list)
    hbm: np.ndarray | None = None


def _opname(inst) -> str:
    return "LI" if inst.is_li else inst.opcode.name


def simulate(lowered: Lowered, weights: list[LayerWeights] | None = None, x=None, *,
             machine: MachineConfig | None = None, exact_kernels: bool = False,
             numeric: bool = True, trace: bool = False, extra_hbm: dict | None = None) -> SimResult:
    """Execute ``lowered`` in order.

    Timing: instructions issue in order. LOAD/STORE instructions wait in a
    prefetch group that overlaps with the next compute instruction of the
    same graph node (group time = max(compute, sum of transfers)); transfers
    not followed by such a compute run exposed. Register writes are serial.
    """
    machine = machine or MachineConfig()
    prog = lowered.program
    numeric = numeric and (x is not None or extra_hbm is not None)
    hbm = stage_hbm(lowered, weights, x, extra_hbm) if numeric else None
    pool = BufferPool(machine.buffer_capacity, lowered.plan.regions, numeric=numeric)
    state = MachineState(prog, pool, hbm, exact_kernels=exact_kernels)
    stats = state.stats
    classes = {n.id: NODE_CLASS[n.kind] for n in lowered.graph.nodes}
    lines: list[TraceLine] = []
    pending: list[tuple[int, str, str | None, int]] = []  # (index, opcode, class, cycles)

    def flush_exposed() -> None:
        for idx, name, cls, cyc in pending:
            stats.add_cycles(name, cls, cyc)
            if trace:
                lines.append(TraceLine(idx, name, 0, 0, cyc, cyc))
        pending.clear()

    for i, inst in enumerate(prog.instructions):
        state.index = i
        pool.advance(i)
        res = execute_instruction(inst, state, machine)
        stats.instructions += 1
        node = prog.node_ids[i] if i < len(prog.node_ids) else -1
        cls = classes.get(node)
        name = _opname(inst)
        if inst.is_li:
            stats.add_cycles(name, None, res.compute_cycles)
            if trace:
                lines.append(TraceLine(i, name, 0, res.compute_cycles, 0, 0))
            continue
        if inst.is_memory:
            if pending and prog.node_ids[pending[-1][0]] != node:
                flush_exposed()
            pending.append((i, name, cls, res.memory_cycles))
            continue
        if pending and prog.node_ids[pending[-1][0]] != node:
            flush_exposed()
        mem = sum(p[3] for p in pending)
        c = res.compute_cycles
        total = max(c, mem) if machine.overlap else c + mem
        stall = total - c
        stats.rcu_busy_cycles += res.busy_cycles
        stats.add_cycles(name, cls, c)
        # exposed transfer time is charged to the transfers, split in order
        left = stall
        for idx, pname, pcls, cyc in pending:
            part = min(cyc, left)
            left -= part
            stats.add_cycles(pname, pcls, part)
            if trace:
                lines.append(TraceLine(idx, pname, 0, 0, cyc, part))
        pending.clear()
        if trace:
            lines.append(TraceLine(i, name, res.tiles, c, mem, stall))
    flush_exposed()
    if trace:
        lines.sort(key=lambda t: t.index)
    out = read_hbm_tensor(lowered, hbm, lowered.output) if numeric else None
    return SimResult(out, stats, lines, hbm)


def format_trace(lines: list[TraceLine]) -> str:
    rows = ["index,opcode,tiles,compute_cycles,memory_cycles,stall"]
    rows += [f"{t.index},{t.opcode},{t.tiles},{t.compute_cycles},{t.memory_cycles},{t.stall}" for t in lines]
    return "\n".join(rows) + "\n"
