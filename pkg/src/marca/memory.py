"""On-chip buffer pool, flat-bandwidth HBM channel, traffic counters and the
energy model."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

BUFFER_CAPACITY = 24 * 2**20
HBM_BANDWIDTH = 256e9  # bytes/s
CLOCK_HZ = 1e9
HBM_PJ_PER_BIT = 7.0

# not from any measurement; used only for relative comparisons
BUFFER_PJ_PER_BYTE = 1.0
PE_PJ_PER_OP = 0.8

CLASSES = ("linear", "ew1", "ew2", "nonlinear", "norm")


class ResidencyFault(RuntimeError):
    def __init__(self, addr: int, nbytes: int, index: int):
        super().__init__(f"instruction {index}: buffer access [0x{addr:x}, 0x{addr + nbytes:x}) "
                         f"is not inside a live planned region")
        self.addr = addr
        self.index = index


class Residency(str, Enum):
    TRANSIENT = "transient"
    SCAN_RESIDENT = "scan-resident"


@dataclass
class Region:
    offset: int
    size: int
    tensor: str
    residency: Residency = Residency.TRANSIENT
    start: int = 0  # first instruction index at which the region is live
    end: int | None = None  # exclusive; None until released

    @property
    def stop(self) -> int:
        return self.offset + self.size

    def to_dict(self) -> dict:
        return {"offset": self.offset, "size": self.size, "tensor": self.tensor,
                "residency": self.residency.value, "start": self.start, "end": self.end}


@dataclass(frozen=True)
class HbmChannel:
    bandwidth: float = HBM_BANDWIDTH
    clock_hz: float = CLOCK_HZ
    energy_pj_per_bit: float = HBM_PJ_PER_BIT

    @property
    def bytes_per_cycle(self) -> int:
        bpc = self.bandwidth / self.clock_hz
        if bpc != int(bpc):
            raise ValueError(f"bandwidth/clock = {bpc} is not a whole number of bytes per cycle")
        return int(bpc)

    def transfer_cycles(self, nbytes: int) -> int:
        if nbytes < 0:
            raise ValueError("negative transfer size")
        return -(-nbytes // self.bytes_per_cycle)


def hbm_transfer(nbytes: int, channel: HbmChannel | None = None,
                 stats: "TrafficStats | None" = None, *, write: bool = False,
                 tensor: str | None = None) -> int:
    """Cycles to move ``nbytes`` over the channel; updates ``stats`` if given."""
    channel = channel or HbmChannel()
    cycles = channel.transfer_cycles(nbytes)
    if stats is not None:
        stats.record_hbm(nbytes, write=write, tensor=tensor)
    return cycles


def instruction_timing(compute_cycles: int, memory_cycles: int, *, overlap: bool = True) -> int:
    if compute_cycles < 0 or memory_cycles < 0:
        raise ValueError("cycle counts must be non-negative")
    if overlap:
        return max(compute_cycles, memory_cycles)
    return compute_cycles + memory_cycles


@dataclass
class TrafficStats:
    hbm_read_bytes: int = 0
    hbm_write_bytes: int = 0
    buffer_read_bytes: int = 0
    buffer_write_bytes: int = 0
    pe_ops: int = 0
    cycles_total: int = 0
    rcu_busy_cycles: int = 0
    instructions: int = 0
    exp_faults: int = 0
    cycles_by_opcode: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    cycles_by_class: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    hbm_bytes_by_tensor: dict[str, int] = field(default_factory=lambda: defaultdict(int))

    def record_hbm(self, nbytes: int, *, write: bool, tensor: str | None = None) -> None:
        if write:
            self.hbm_write_bytes += nbytes
        else:
            self.hbm_read_bytes += nbytes
        if tensor is not None:
            self.hbm_bytes_by_tensor[tensor] += nbytes

    def record_buffer(self, read: int = 0, written: int = 0) -> None:
        self.buffer_read_bytes += read
        self.buffer_write_bytes += written

    def add_cycles(self, opcode: str, cls: str | None, cycles: int) -> None:
        self.cycles_total += cycles
        self.cycles_by_opcode[opcode] += cycles
        if cls is not None:
            self.cycles_by_class[cls] += cycles

    @property
    def hbm_bytes(self) -> int:
        return self.hbm_read_bytes + self.hbm_write_bytes

    @property
    def buffer_bytes(self) -> int:
        return self.buffer_read_bytes + self.buffer_write_bytes

    def class_shares(self) -> dict[str, float]:
        total = sum(self.cycles_by_class.get(c, 0) for c in CLASSES)
        if total == 0:
            return {c: 0.0 for c in CLASSES}
        return {c: self.cycles_by_class.get(c, 0) / total for c in CLASSES}

    def to_dict(self, energy: "EnergyModel | None" = None) -> dict:
        energy = energy or EnergyModel()
        return {
            "cycles_total": self.cycles_total,
            "cycles_by_opcode": dict(sorted(self.cycles_by_opcode.items())),
            "hbm_read_bytes": self.hbm_read_bytes,
            "hbm_write_bytes": self.hbm_write_bytes,
            "buffer_bytes": self.buffer_bytes,
            "energy_pj": energy.energy(self),
            "breakdown_by_class": {c: self.cycles_by_class.get(c, 0) for c in CLASSES},
        }


@dataclass(frozen=True)
class EnergyModel:
    hbm_pj_per_bit: float = HBM_PJ_PER_BIT
    buffer_pj_per_byte: float = BUFFER_PJ_PER_BYTE
    pe_pj_per_op: float = PE_PJ_PER_OP

    def energy(self, stats: TrafficStats) -> float:
        return (stats.hbm_bytes * 8 * self.hbm_pj_per_bit
                + stats.buffer_bytes * self.buffer_pj_per_byte
                + stats.pe_ops * self.pe_pj_per_op)


def energy(stats: TrafficStats, model: EnergyModel | None = None) -> float:
    return (model or EnergyModel()).energy(stats)


class BufferPool:
    """Byte-addressed on-chip scratchpad backed by float32 words.

    Every access is checked against the regions live at the current
    instruction index.
    """

    def __init__(self, capacity: int = BUFFER_CAPACITY, regions: list[Region] | None = None,
                 *, numeric: bool = True):
        self.capacity = capacity
        self.data = np.zeros(capacity // 4, dtype=np.float32) if numeric else None
        self._by_start: dict[int, list[Region]] = defaultdict(list)
        for r in regions or []:
            if r.stop > capacity:
                raise ValueError(f"region for {r.tensor} ends at {r.stop} beyond capacity {capacity}")
            self._by_start[r.start].append(r)
        self._starts = sorted(self._by_start)
        self._next = 0
        self.active: list[Region] = []
        self.index = -1
        self.enforce = regions is not None

    def advance(self, index: int) -> None:
        self.index = index
        while self._next < len(self._starts) and self._starts[self._next] <= index:
            self.active.extend(self._by_start[self._starts[self._next]])
            self._next += 1
        self.active = [r for r in self.active if r.end is None or r.end > index]

    def check(self, addr: int, nbytes: int) -> None:
        if addr % 4 or addr < 0 or addr + nbytes > self.capacity:
            raise ResidencyFault(addr, nbytes, self.index)
        if not self.enforce:
            return
        for r in self.active:
            if r.offset <= addr and addr + nbytes <= r.stop:
                return
        raise ResidencyFault(addr, nbytes, self.index)

    def view(self, addr: int, count: int) -> np.ndarray:
        self.check(addr, 4 * count)
        return self.data[addr // 4: addr // 4 + count]

    def read(self, addr: int, shape: tuple[int, ...]) -> np.ndarray:
        return self.view(addr, math.prod(shape)).reshape(shape).copy()

    def write(self, addr: int, values: np.ndarray) -> None:
        flat = np.asarray(values, dtype=np.float32).reshape(-1)
        self.view(addr, flat.size)[:] = flat
