"""Lower Mamba blocks to instruction streams plus a buffer plan.

Two buffer-management strategies can be toggled independently:

* intra-operation (``intra_bm``): a linear layer fills the free buffer with
  its weights and streams activations past them; element-wise ops stream
  as many tokens per chunk as fit. Without it every linear op runs as
  16x16 output tiles that reload both operands, and element-wise ops run
  16 tokens at a time.
* inter-operation (``inter_bm``): the scan operands (hidden state, the
  discretized transition, the input term and the post-activation input)
  stay on chip from producer to last consumer instead of round-tripping
  through HBM.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import Discretization, LayerWeights, MambaConfig, as_tensor
from .isa import (
    FLAG_2D,
    FLAG_ACC,
    FLAG_LI,
    FLAG_OUTER,
    N_CREGS,
    N_REGS,
    Instruction,
    Opcode,
    Program,
    float_bits,
    pack_2d,
    pack_cregs,
)
from .memory import BUFFER_CAPACITY, Region, Residency

TILE = 16
ALIGN = 64
HBM_BASE = 0x1000
HBM_ALIGN = 256
EW2_RESERVE_FRACTION = 1 / 16
DEFAULT_MAX_INSTRUCTIONS = 10**7
F = 4  # bytes per element


class PlanningError(RuntimeError):
    pass


class InstructionCapExceeded(PlanningError):
    pass


class NodeKind(str, Enum):
    LINEAR = "linear"
    CONV = "conv"
    NORM = "norm"
    EW1_ADD = "ew1-add"
    EW1_MUL = "ew1-mul"
    EW2_OUTER = "ew2-outer"
    EXP = "exp"
    SILU = "silu"


NODE_CLASS = {
    NodeKind.LINEAR: "linear",
    NodeKind.CONV: "ew1",
    NodeKind.NORM: "norm",
    NodeKind.EW1_ADD: "ew1",
    NodeKind.EW1_MUL: "ew1",
    NodeKind.EW2_OUTER: "ew2",
    NodeKind.EXP: "nonlinear",
    NodeKind.SILU: "nonlinear",
}


@dataclass
class TensorInfo:
    id: str
    shape: tuple[int, ...]
    role: str  # input | weight | activation | state
    pad_rows: int = 0  # zero rows stored ahead of row 0

    @property
    def row_elems(self) -> int:
        return math.prod(self.shape[1:]) if len(self.shape) > 1 else 1

    @property
    def storage_elems(self) -> int:
        return (self.shape[0] + self.pad_rows) * self.row_elems

    @property
    def nbytes(self) -> int:
        return self.storage_elems * F


@dataclass
class OpNode:
    id: int
    kind: NodeKind
    name: str
    inputs: tuple[str, ...]
    output: str
    in_shapes: tuple[tuple[int, ...], ...]
    out_shape: tuple[int, ...]
    layer: int = 0
    token: int | None = None
    attrs: dict = field(default_factory=dict)

    @property
    def op_class(self) -> str:
        return NODE_CLASS[self.kind]


@dataclass
class Graph:
    tensors: dict[str, TensorInfo] = field(default_factory=dict)
    nodes: list[OpNode] = field(default_factory=list)
    outputs: tuple[str, ...] = ()
    config: MambaConfig | None = None

    def tensor(self, tid: str, shape, role: str, pad_rows: int = 0) -> str:
        self.tensors[tid] = TensorInfo(tid, tuple(int(s) for s in shape), role, pad_rows)
        return tid

    def add(self, kind: NodeKind, name: str, inputs, output: str, in_shapes, out_shape,
            layer: int = 0, token: int | None = None, **attrs) -> OpNode:
        node = OpNode(len(self.nodes), kind, name, tuple(inputs), output,
                      tuple(tuple(s) for s in in_shapes), tuple(out_shape), layer, token, attrs)
        self.nodes.append(node)
        return node

    def consumers(self, tid: str) -> list[OpNode]:
        return [n for n in self.nodes if tid in n.inputs]

    def validate(self) -> None:
        """Nodes are topologically ordered and operand sizes fit their tensors."""
        written: set[str] = {t.id for t in self.tensors.values() if t.role in ("input", "weight", "state")}
        for node in self.nodes:
            for tid, shape in zip(node.inputs, node.in_shapes):
                if tid not in self.tensors:
                    raise PlanningError(f"node {node.name} reads unknown tensor {tid}")
                if tid not in written:
                    raise PlanningError(f"node {node.name} reads {tid} before it is produced")
                if math.prod(shape) > self.tensors[tid].storage_elems:
                    raise PlanningError(f"node {node.name}: operand {shape} exceeds tensor {tid}")
            out = self.tensors[node.output]
            if math.prod(node.out_shape) > out.storage_elems:
                raise PlanningError(f"node {node.name}: output {node.out_shape} exceeds tensor {out.id}")
            if node.token is None and node.kind is not NodeKind.EW2_OUTER and node.out_shape != out.shape:
                raise PlanningError(f"node {node.name}: output shape {node.out_shape} != {out.shape}")
            written.add(node.output)


def build_graph(cfg: MambaConfig) -> Graph:
    """Op DAG for every layer, scan unrolled over the sequence."""
    g = Graph(config=cfg)
    L, dm, di, N, K, R = cfg.seq_len, cfg.d_model, cfg.d_inner, cfg.d_state, cfg.d_conv, cfg.dt_rank
    x_in = g.tensor("x", (L, dm), "input")
    for l in range(cfg.n_layers):
        p = f"l{l}."
        t = {}
        for name, shape in [("gamma", (1, dm)), ("beta", (1, dm)), ("w_in_x", (dm, di)), ("w_in_z", (dm, di)),
                            ("conv_wt", (K, di)), ("w_dt_low", (di, R)), ("w_b", (di, N)), ("w_c", (di, N)),
                            ("w_dt", (R, di)), ("dt_bias", (1, di)), ("A", (di, N)), ("D", (1, di)),
                            ("w_out", (di, dm))]:
            t[name] = g.tensor(p + name, shape, "weight")
        if cfg.discretization is Discretization.EULER:
            t["ones"] = g.tensor(p + "ones", (1, N), "weight")
        for name, shape in [("xn", (L, dm)), ("z", (L, di)), ("xc", (L, di)), ("xs", (L, di)),
                            ("dt_low", (L, R)), ("Bm", (L, N)), ("Cm", (L, N)), ("delta", (L, di)),
                            ("dA", (L * di, N)), ("abar", (L * di, N)), ("dB", (L * di, N)),
                            ("u", (di, N)), ("y", (L, di)), ("sk", (L, di)), ("yd", (L, di)),
                            ("zs", (L, di)), ("g", (L, di)), ("out", (L, dm)), ("res", (L, dm))]:
            t[name] = g.tensor(p + name, shape, "activation")
        t["xb"] = g.tensor(p + "xb", (L, di), "activation", pad_rows=K - 1)
        t["h"] = g.tensor(p + "h", (di, N), "state")

        def lin(name, x, w, out, m, k, n, bias=None):
            ins = [x, w] + ([bias] if bias else [])
            shapes = [(m, k), (k, n)] + ([(1, n)] if bias else [])
            return g.add(NodeKind.LINEAR, p + name, ins, out, shapes, (m, n), l, m=m, k=k, n=n, bias=bias is not None)

        g.add(NodeKind.NORM, p + "norm", [x_in, t["gamma"], t["beta"]], t["xn"], [(L, dm), (1, dm), (1, dm)], (L, dm), l)
        lin("in_x", t["xn"], t["w_in_x"], t["xb"], L, dm, di)
        lin("in_z", t["xn"], t["w_in_z"], t["z"], L, dm, di)
        g.add(NodeKind.CONV, p + "conv", [t["xb"], t["conv_wt"]], t["xc"], [(L + K - 1, di), (K, di)], (L, di), l, taps=K)
        g.add(NodeKind.SILU, p + "silu_x", [t["xc"]], t["xs"], [(L, di)], (L, di), l)
        lin("proj_dt", t["xs"], t["w_dt_low"], t["dt_low"], L, di, R)
        lin("proj_b", t["xs"], t["w_b"], t["Bm"], L, di, N)
        lin("proj_c", t["xs"], t["w_c"], t["Cm"], L, di, N)
        lin("dt", t["dt_low"], t["w_dt"], t["delta"], L, R, di, bias=t["dt_bias"])
        g.add(NodeKind.EW2_OUTER, p + "dA", [t["delta"], t["A"]], t["dA"], [(L * di, 1), (di, N)], (L * di, N), l)
        g.add(NodeKind.EW2_OUTER, p + "dB", [t["delta"], t["Bm"]], t["dB"], [(L, di), (L, N)], (L * di, N), l)
        if cfg.discretization is Discretization.ZOH_EXP:
            g.add(NodeKind.EXP, p + "abar", [t["dA"]], t["abar"], [(L * di, N)], (L * di, N), l)
        else:
            g.add(NodeKind.EW1_ADD, p + "abar", [t["dA"], t["ones"]], t["abar"], [(L * di, N), (1, N)], (L * di, N), l)
        for n in range(L):
            g.add(NodeKind.EW1_MUL, f"{p}decay[{n}]", [t["abar"], t["h"]], t["h"], [(di, N), (di, N)], (di, N), l, n)
            g.add(NodeKind.EW1_MUL, f"{p}u[{n}]", [t["xs"], t["dB"]], t["u"], [(di, 1), (di, N)], (di, N), l, n)
            g.add(NodeKind.EW1_ADD, f"{p}update[{n}]", [t["h"], t["u"]], t["h"], [(di, N), (di, N)], (di, N), l, n)
            g.add(NodeKind.LINEAR, f"{p}y[{n}]", [t["h"], t["Cm"]], t["y"], [(di, N), (N, 1)], (di, 1), l, n,
                  m=di, k=N, n=1, bias=False)
        g.add(NodeKind.EW1_MUL, p + "skip_mul", [t["xs"], t["D"]], t["sk"], [(L, di), (1, di)], (L, di), l)
        g.add(NodeKind.EW1_ADD, p + "skip_add", [t["y"], t["sk"]], t["yd"], [(L, di), (L, di)], (L, di), l)
        g.add(NodeKind.SILU, p + "silu_z", [t["z"]], t["zs"], [(L, di)], (L, di), l)
        g.add(NodeKind.EW1_MUL, p + "gate", [t["yd"], t["zs"]], t["g"], [(L, di), (L, di)], (L, di), l)
        lin("out", t["g"], t["w_out"], t["out"], L, di, dm)
        g.add(NodeKind.EW1_ADD, p + "res", [t["out"], x_in], t["res"], [(L, dm), (L, dm)], (L, dm), l)
        x_in = t["res"]
    g.outputs = (x_in,)
    g.validate()
    return g


def linear_graph(m: int, k: int, n: int, *, bias: bool = False) -> Graph:
    """A stand-alone linear layer ``Y = X @ W (+ b)``."""
    g = Graph()
    x = g.tensor("X", (m, k), "input")
    w = g.tensor("W", (k, n), "weight")
    ins, shapes = [x, w], [(m, k), (k, n)]
    if bias:
        ins.append(g.tensor("b", (1, n), "weight"))
        shapes.append((1, n))
    y = g.tensor("Y", (m, n), "activation")
    g.add(NodeKind.LINEAR, "linear", ins, y, shapes, (m, n), m=m, k=k, n=n, bias=bias)
    g.outputs = (y,)
    g.validate()
    return g


@dataclass(frozen=True)
class Traffic:
    read_bytes: int
    write_bytes: int
    flops: int

    @property
    def read_write_ratio(self) -> float:
        return self.read_bytes / self.write_bytes


def classify_traffic(node: OpNode) -> Traffic:
    """Compulsory operand traffic and arithmetic work of one node."""
    reads = sum(math.prod(s) for s in node.in_shapes) * F
    count = math.prod(node.out_shape)
    if node.kind is NodeKind.LINEAR:
        flops = 2 * node.attrs["m"] * node.attrs["k"] * node.attrs["n"]
    elif node.kind is NodeKind.EXP:
        flops = 3 * count  # multiply, add, bias add; the shift is not counted
    elif node.kind is NodeKind.SILU:
        flops = 4 * count  # worst branch
    elif node.kind is NodeKind.CONV:
        flops = (2 * node.attrs["taps"] - 1) * count
    elif node.kind is NodeKind.NORM:
        flops = 8 * count
    else:
        flops = count
    return Traffic(reads, count * F, flops)


# ---------------------------------------------------------------------------
# buffer plan


@dataclass
class LinearTiling:
    mode: str  # naive | whole | panels
    m: int
    k: int
    n: int
    panel_cols: int
    row_chunk: int
    bias: bool = False
    x_resident: bool = False

    @property
    def weight_loads(self) -> int:
        """How many times each weight element crosses the HBM interface."""
        if self.mode == "naive":
            return -(-self.m // TILE)
        return 1

    @property
    def read_buffer_bytes(self) -> int:
        x = 0 if self.x_resident else self.row_chunk * self.k * F
        b = self.panel_cols * F if self.bias else 0
        return self.k * self.panel_cols * F + b + x + self.row_chunk * self.panel_cols * F


def _ceil16(v: int) -> int:
    return -(-v // TILE) * TILE


def plan_intra(node: OpNode, budget: int, *, intra_bm: bool = True, x_resident: bool = False) -> LinearTiling:
    """Choose the tiling of a linear node under a byte budget.

    With intra-BM, weights are kept whole on chip when they fit, otherwise in
    the widest 16-multiple column panels that do; the activation chunk then
    takes as many rows as remain. Without it, 16x16 output tiles are used.
    """
    if node.kind is not NodeKind.LINEAR:
        raise PlanningError(f"plan_intra expects a linear node, got {node.kind.value}")
    m, k, n, bias = node.attrs["m"], node.attrs["k"], node.attrs["n"], node.attrs.get("bias", False)
    slack = 4 * ALIGN
    xrow = 0 if x_resident else k * F

    def need(pc: int, rows: int) -> int:
        return k * pc * F + (pc * F if bias else 0) + rows * (xrow + pc * F) + slack

    if not intra_bm:
        pc, rows = min(TILE, n), min(TILE, m)
        if need(pc, rows) > budget:
            raise PlanningError(f"{node.name}: a {rows}x{pc} tile needs {need(pc, rows)} B, budget {budget} B")
        return LinearTiling("naive", m, k, n, pc, rows, bias, x_resident)
    first_rows = min(TILE, m)
    if need(n, first_rows) <= budget:
        pc, mode = n, "whole"
    else:
        pc = (_ceil16(n) // TILE - 1) * TILE
        while pc >= TILE and need(pc, first_rows) > budget:
            pc -= TILE
        if pc < TILE:
            raise PlanningError(f"{node.name}: budget {budget} B is smaller than one operand row-tile "
                                f"({need(min(TILE, n), first_rows)} B)")
        mode = "panels"
    per_row = xrow + pc * F
    spare = budget - need(pc, 0)
    rows = m if per_row == 0 else min(m, spare // per_row)
    if rows < m:
        rows = max(first_rows, rows // TILE * TILE)
    return LinearTiling(mode, m, k, n, pc, rows, bias, x_resident)


@dataclass
class BufferPlan:
    capacity: int
    regions: list[Region] = field(default_factory=list)
    residency: dict[str, Residency] = field(default_factory=dict)
    read_buffer_extent: int = 0
    tilings: dict[str, LinearTiling] = field(default_factory=dict)

    def validate(self) -> None:
        """Regions stay inside the buffer; regions live at the same time never overlap."""
        for r in self.regions:
            if r.offset < 0 or r.stop > self.capacity:
                raise PlanningError(f"region for {r.tensor} [{r.offset}, {r.stop}) exceeds {self.capacity} B")
        events = sorted(self.regions, key=lambda r: r.offset)
        for i, a in enumerate(events):
            for b in events[i + 1:]:
                if b.offset >= a.stop:
                    break
                a_end = math.inf if a.end is None else a.end
                b_end = math.inf if b.end is None else b.end
                if a.start < b_end and b.start < a_end and a.size and b.size:
                    raise PlanningError(f"regions {a.tensor} and {b.tensor} overlap in space and time")

    def peak_bytes(self) -> int:
        points = sorted({r.start for r in self.regions})
        best = 0
        for p in points:
            live = sum(r.size for r in self.regions if r.start <= p and (r.end is None or r.end > p))
            best = max(best, live)
        return best

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "read_buffer_extent": self.read_buffer_extent,
            "residency": {k: v.value for k, v in sorted(self.residency.items())},
            "tilings": {k: {"mode": t.mode, "panel_cols": t.panel_cols, "row_chunk": t.row_chunk,
                            "weight_loads": t.weight_loads} for k, t in sorted(self.tilings.items())},
            "regions": [r.to_dict() for r in self.regions],
        }

    def summary(self) -> str:
        lines = [f"buffer capacity   {self.capacity} B",
                 f"regions           {len(self.regions)}",
                 f"peak live bytes   {self.peak_bytes()}",
                 f"read buffer       {self.read_buffer_extent} B"]
        res = [k for k, v in sorted(self.residency.items()) if v is Residency.SCAN_RESIDENT]
        lines.append("scan-resident     " + (", ".join(res) if res else "(none)"))
        for name, t in sorted(self.tilings.items()):
            lines.append(f"  {name:<16} {t.mode:<7} panel={t.panel_cols:<5} rows={t.row_chunk:<6} "
                         f"weight loads={t.weight_loads}")
        return "\n".join(lines) + "\n"


class _Allocator:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.free: list[tuple[int, int]] = [(0, capacity)]

    def alloc(self, size: int) -> int:
        size = -(-max(size, 1) // ALIGN) * ALIGN
        for i, (off, sz) in enumerate(self.free):
            if sz >= size:
                if sz == size:
                    self.free.pop(i)
                else:
                    self.free[i] = (off + size, sz - size)
                return off
        raise PlanningError(f"cannot place {size} B in the on-chip buffer (largest free block "
                            f"{self.largest_free()} B)")

    def release(self, off: int, size: int) -> None:
        size = -(-max(size, 1) // ALIGN) * ALIGN
        self.free.append((off, size))
        self.free.sort()
        merged: list[tuple[int, int]] = []
        for o, s in self.free:
            if merged and merged[-1][0] + merged[-1][1] == o:
                merged[-1] = (merged[-1][0], merged[-1][1] + s)
            else:
                merged.append((o, s))
        self.free = merged

    def largest_free(self) -> int:
        return max((s for _, s in self.free), default=0)


@dataclass
class HbmLayout:
    addrs: dict[str, int] = field(default_factory=dict)
    sizes: dict[str, int] = field(default_factory=dict)
    end: int = HBM_BASE

    def place(self, tid: str, nbytes: int) -> int:
        addr = self.end
        self.addrs[tid] = addr
        self.sizes[tid] = nbytes
        self.end = -(-(addr + nbytes) // HBM_ALIGN) * HBM_ALIGN
        if self.end >= 2**32:
            raise PlanningError("HBM image exceeds the 32-bit address registers")
        return addr

    def addr(self, tid: str) -> int:
        return self.addrs[tid]


@dataclass(frozen=True)
class LowerFlags:
    intra_bm: bool = True
    inter_bm: bool = True


@dataclass
class Lowered:
    program: Program
    plan: BufferPlan
    hbm: HbmLayout
    graph: Graph
    flags: LowerFlags
    config: MambaConfig | None = None

    def __iter__(self):
        return iter((self.program, self.plan))

    @property
    def output(self) -> str:
        return self.graph.outputs[0]


def plan_inter(graph: Graph, layer: int, capacity: int = BUFFER_CAPACITY, *,
               enabled: bool = True, reserve: int | None = None) -> dict[str, Residency]:
    """Decide which scan operands of ``layer`` stay on chip.

    Candidates are ranked by HBM bytes saved (then tensor id) and admitted
    greedily while they fit the buffer left after the element-wise reserve
    and the scan loop's own transient slots.
    """
    cfg = graph.config
    p = f"l{layer}."
    names = ["h", "abar", "dB", "xs"]
    if cfg is None or not enabled:
        return {p + n: Residency.TRANSIENT for n in names}
    L, di, N = cfg.seq_len, cfg.d_inner, cfg.d_state
    dn = di * N * F
    saved = {
        "h": (2 * L - 1) * dn,  # L loads + L stores become one final store
        "abar": 4 * L * dn,  # producer store, exp load+store, L slice loads
        "dB": 2 * L * dn,  # producer store, L slice loads
        "xs": 6 * L * di * F,  # producer store, three projections, scan and skip loads
    }
    size = {"h": dn, "abar": L * dn, "dB": L * dn, "xs": L * di * F}
    reserve = int(capacity * EW2_RESERVE_FRACTION) if reserve is None else reserve
    scan_slots = 3 * dn + (N + di) * F + 8 * ALIGN
    budget = capacity - reserve - scan_slots
    out = {}
    for name in sorted(names, key=lambda n: (-saved[n], p + n)):
        sz = -(-size[name] // ALIGN) * ALIGN
        if sz <= budget:
            out[p + name] = Residency.SCAN_RESIDENT
            budget -= sz
        else:
            out[p + name] = Residency.TRANSIENT
    return out


# ---------------------------------------------------------------------------
# lowering


class _Lowerer:
    def __init__(self, graph: Graph, flags: LowerFlags, capacity: int, max_instructions: int):
        self.g = graph
        self.flags = flags
        self.capacity = capacity
        self.max_instructions = max_instructions
        self.prog = Program()
        self.prog.tensors = []
        self.alloc = _Allocator(capacity)
        self.plan = BufferPlan(capacity)
        self.hbm = HbmLayout()
        for t in graph.tensors.values():
            self.hbm.place(t.id, t.nbytes)
        self.reg_val: list[int | None] = [None] * N_REGS
        self.lru: list[int] = list(range(N_REGS))
        self.creg_index: dict[int, int] = {}
        self.node: OpNode | None = None
        self.resident: dict[str, Region] = {}
        self.alias: dict[str, str] = {}
        self.slack = 8 * ALIGN

    # -- emission -----------------------------------------------------------

    def _push(self, inst: Instruction, tensor: str | None = None) -> None:
        if len(self.prog.instructions) >= self.max_instructions:
            raise InstructionCapExceeded(f"program exceeds the cap of {self.max_instructions} instructions")
        self.prog.instructions.append(inst)
        self.prog.labels.append(self.node.name if self.node else "")
        self.prog.node_ids.append(self.node.id if self.node else -1)
        self.prog.tensors.append(tensor)

    def _regs(self, *values: int | None) -> list[int]:
        pinned: set[int] = set()
        out = []
        for v in values:
            if v is None:
                out.append(0)
                continue
            r = next((i for i in self.lru if self.reg_val[i] == v), None)
            if r is None:
                r = next(i for i in self.lru if i not in pinned)
                self._push(Instruction(Opcode.LOAD, dst=r, flags=FLAG_LI, imm=v))
                self.reg_val[r] = v
            self.lru.remove(r)
            self.lru.append(r)
            pinned.add(r)
            out.append(r)
        return out

    def _creg(self, value, kind: str = "int") -> int:
        bits = float_bits(value) if kind == "float" else int(value)
        key = (kind, bits)
        if key not in self.creg_index:
            idx = len(self.creg_index)
            if idx >= N_CREGS:
                raise PlanningError(f"more than {N_CREGS} distinct constants needed")
            self.creg_index[key] = idx
            self.prog.creg_init[idx] = bits
            self.prog.creg_kinds[idx] = kind
        return self.creg_index[key]

    def _cregs(self, *values) -> int:
        idx = []
        for v in values:
            if isinstance(v, tuple):
                idx.append(self._creg(v[0], v[1]))
            else:
                idx.append(self._creg(v))
        return pack_cregs(*idx)

    def _load(self, buf: int, hbm: int, nbytes: int, tensor: str) -> None:
        d, s = self._regs(buf, hbm)
        self._push(Instruction(Opcode.LOAD, dst=d, src1=s, imm=nbytes), tensor)

    def _load2d(self, buf: int, hbm: int, rows: int, row_bytes: int, stride: int, tensor: str) -> None:
        if rows == 1 or stride == row_bytes:
            return self._load(buf, hbm, rows * row_bytes, tensor)
        d, s, st = self._regs(buf, hbm, stride)
        self._push(Instruction(Opcode.LOAD, dst=d, src1=s, src2=st, flags=FLAG_2D,
                               imm=pack_2d(rows, row_bytes)), tensor)

    def _store(self, hbm: int, buf: int, nbytes: int, tensor: str) -> None:
        d, s = self._regs(hbm, buf)
        self._push(Instruction(Opcode.STORE, dst=d, src1=s, imm=nbytes), tensor)

    def _store2d(self, hbm: int, buf: int, rows: int, row_bytes: int, stride: int, tensor: str) -> None:
        if rows == 1 or stride == row_bytes:
            return self._store(hbm, buf, rows * row_bytes, tensor)
        d, s, st = self._regs(hbm, buf, stride)
        self._push(Instruction(Opcode.STORE, dst=d, src1=s, src2=st, flags=FLAG_2D,
                               imm=pack_2d(rows, row_bytes)), tensor)

    def _compute(self, op: Opcode, dst: int, src1: int, src2: int | None = None, src3: int | None = None,
                 *, flags: int = 0, imm: int = 0) -> None:
        regs = self._regs(dst, src1, src2, src3)
        self._push(Instruction(op, *regs, flags=flags, imm=imm))

    def _ew(self, op: Opcode, dst: int, a: int, b: int, rows: int, cols: int, b_rows: int,
            outer: bool = False) -> None:
        self._compute(op, dst, a, b, flags=FLAG_OUTER if outer else 0, imm=self._cregs(rows, cols, b_rows))

    # -- buffer regions -----------------------------------------------------

    def _region(self, tensor: str, size: int, residency: Residency = Residency.TRANSIENT) -> Region:
        off = self.alloc.alloc(size)
        r = Region(off, size, tensor, residency, start=len(self.prog.instructions))
        self.plan.regions.append(r)
        return r

    def _release(self, *regions: Region | None) -> None:
        for r in regions:
            if r is not None and r.end is None:
                r.end = len(self.prog.instructions)
                self.alloc.release(r.offset, r.size)

    def _budget(self) -> int:
        return self.alloc.largest_free() - self.slack

    # -- tensor addressing --------------------------------------------------

    def _res(self, tid: str) -> Region | None:
        return self.resident.get(self.alias.get(tid, tid))

    def _hbm_row(self, tid: str, row: int) -> int:
        t = self.g.tensors[tid]
        return self.hbm.addr(tid) + (row + t.pad_rows) * t.row_elems * F

    def _res_row(self, tid: str, row: int) -> int:
        t = self.g.tensors[tid]
        return self._res(tid).offset + row * t.row_elems * F

    # -- generic chunked element-wise lowering ------------------------------

    def _chunked(self, node: OpNode, units: int, streams: list[tuple[str, int, int]],
                 bcasts: list[str], out_elems: int, emit, *, max_units: int | None = None) -> None:
        """Stream ``units`` tokens through ``emit``.

        ``streams`` holds (tensor, elements per token, extra leading rows);
        a stream with extra rows is read from its padded storage. ``emit``
        receives (t0, count, {tensor: buffer addr}, out addr).
        """
        out_res = self._res(node.output)
        b_bytes = sum(self.g.tensors[b].nbytes for b in bcasts)
        per_unit = sum(e for t, e, _ in streams if self._res(t) is None) * F
        extra = sum(h * e for t, e, h in streams if self._res(t) is None) * F
        per_unit += 0 if out_res else out_elems * F
        budget = self._budget() - b_bytes - extra - (len(streams) + len(bcasts) + 1) * ALIGN
        fit = units if per_unit == 0 else budget // per_unit
        if fit < 1:
            raise PlanningError(f"{node.name}: one token needs {per_unit} B, only {budget} B free")
        chunk = min(units, fit)
        if not self.flags.intra_bm:
            chunk = min(chunk, TILE)
        if max_units:
            chunk = min(chunk, max_units)
        regions = {}
        for b in bcasts:
            regions[b] = self._region(b, self.g.tensors[b].nbytes)
        for t, e, h in streams:
            if self._res(t) is None and t not in regions:
                regions[t] = self._region(t, (chunk + h) * e * F)
        out_region = None if out_res else self._region(node.output, chunk * out_elems * F)
        for i, t0 in enumerate(range(0, units, chunk)):
            cnt = min(chunk, units - t0)
            addrs = {}
            for b in bcasts:
                if i == 0 or not self.flags.intra_bm:
                    self._load(regions[b].offset, self.hbm.addr(b), self.g.tensors[b].nbytes, b)
                addrs[b] = regions[b].offset
            for t, e, h in streams:
                if self._res(t) is not None:
                    addrs[t] = self._res_row(t, t0 * e // self.g.tensors[t].row_elems)
                    continue
                src = self.hbm.addr(t) + t0 * e * F if h else self._hbm_row(t, 0) + t0 * e * F
                self._load(regions[t].offset, src, (cnt + h) * e * F, t)
                addrs[t] = regions[t].offset
            if out_res:
                out_addr = out_res.offset + t0 * out_elems * F
            else:
                out_addr = out_region.offset
            emit(t0, cnt, addrs, out_addr)
            if not out_res:
                dst = self._hbm_row(node.output, 0) + t0 * out_elems * F
                self._store(dst, out_addr, cnt * out_elems * F, node.output)
        self._release(*regions.values(), out_region)

    # -- per-kind lowering --------------------------------------------------

    def lower_linear(self, node: OpNode) -> None:
        x, w = node.inputs[0], node.inputs[1]
        bias = node.inputs[2] if node.attrs.get("bias") else None
        m, k, n = node.attrs["m"], node.attrs["k"], node.attrs["n"]
        x_res = self._res(x) is not None
        tiling = plan_intra(node, self._budget(), intra_bm=self.flags.intra_bm, x_resident=x_res)
        self.plan.tilings[node.name] = tiling
        self.plan.read_buffer_extent = max(self.plan.read_buffer_extent, tiling.read_buffer_bytes)
        pc, rows = tiling.panel_cols, tiling.row_chunk
        w_reg = self._region(w, k * pc * F)
        b_reg = self._region(bias, pc * F) if bias else None
        x_reg = None if x_res else self._region(x, rows * k * F)
        y_reg = self._region(node.output, rows * pc * F)
        naive = tiling.mode == "naive"

        def x_addr(r0: int, cnt: int) -> int:
            if x_res:
                return self._res_row(x, r0)
            self._load(x_reg.offset, self._hbm_row(x, r0), cnt * k * F, x)
            return x_reg.offset

        for c0 in range(0, n, pc):
            cw = min(pc, n - c0)
            if not naive:
                self._load2d(w_reg.offset, self.hbm.addr(w) + c0 * F, k, cw * F, n * F, w)
                if bias:
                    self._load(b_reg.offset, self.hbm.addr(bias) + c0 * F, cw * F, bias)
            for r0 in range(0, m, rows):
                cnt = min(rows, m - r0)
                xa = x_addr(r0, cnt)
                if naive:
                    self._load2d(w_reg.offset, self.hbm.addr(w) + c0 * F, k, cw * F, n * F, w)
                    if bias:
                        self._load(b_reg.offset, self.hbm.addr(bias) + c0 * F, cw * F, bias)
                if bias:
                    self._compute(Opcode.LIN, y_reg.offset, xa, w_reg.offset, b_reg.offset, flags=FLAG_ACC,
                                  imm=self._cregs(cnt, k, cw, 1))
                else:
                    self._compute(Opcode.LIN, y_reg.offset, xa, w_reg.offset, imm=self._cregs(cnt, k, cw))
                self._store2d(self._hbm_row(node.output, r0) + c0 * F, y_reg.offset, cnt, cw * F, n * F,
                              node.output)
        self._release(w_reg, b_reg, x_reg, y_reg)

    def lower_norm(self, node: OpNode, eps: float) -> None:
        x, gamma, beta = node.inputs
        rows, cols = node.out_shape

        def emit(t0, cnt, a, out):
            self._compute(Opcode.NORM, out, a[x], a[gamma], a[beta],
                          imm=self._cregs(cnt, cols, (eps, "float")))

        self._chunked(node, rows, [(x, cols, 0)], [gamma, beta], cols, emit)

    def lower_conv(self, node: OpNode) -> None:
        x, w = node.inputs
        L, D = node.out_shape
        K = node.attrs["taps"]

        def emit(t0, cnt, a, out):
            self._compute(Opcode.CONV, out, a[x], a[w], imm=self._cregs(cnt, D, K))

        self._chunked(node, L, [(x, D, K - 1)], [w], D, emit)

    def lower_unary(self, node: OpNode, exp_consts=None) -> None:
        (x,) = node.inputs
        rows, cols = node.out_shape
        L = self.g.config.seq_len if self.g.config else rows
        per = rows // L if rows % L == 0 else rows
        units = rows // per
        op = Opcode.EXP if node.kind is NodeKind.EXP else Opcode.SILU

        def emit(t0, cnt, a, out):
            if op is Opcode.EXP:
                imm = self._cregs(cnt * per, cols, *[(v, "float") for v in exp_consts])
            else:
                imm = self._cregs(cnt * per, cols)
            self._compute(op, out, a[x], imm=imm)

        self._chunked(node, units, [(x, per * cols, 0)], [], per * cols, emit)

    def lower_binary(self, node: OpNode) -> None:
        """Equal-shape or row-tiled element-wise add/multiply."""
        a_t, b_t = node.inputs
        rows, cols = node.out_shape
        op = Opcode.EWA if node.kind is NodeKind.EW1_ADD else Opcode.EWM
        b_rows = node.in_shapes[1][0]
        L = self.g.config.seq_len if self.g.config else rows
        per = rows // L if rows % L == 0 else rows
        units = rows // per
        b_bcast = b_rows != rows

        def emit(t0, cnt, a, out):
            self._ew(op, out, a[a_t], a[b_t], cnt * per, cols, b_rows if b_bcast else cnt * per)

        streams = [(a_t, per * cols, 0)] + ([] if b_bcast else [(b_t, per * cols, 0)])
        self._chunked(node, units, streams, [b_t] if b_bcast else [], per * cols, emit)

    def lower_outer_a(self, node: OpNode) -> None:
        """Transition product: delta[t, i] * A[i, :] for every token."""
        delta, A = node.inputs
        L, di = self.g.tensors[delta].shape
        N = self.g.tensors[A].shape[1]

        def emit(t0, cnt, a, out):
            self._ew(Opcode.EWM, out, a[delta], a[A], cnt * di, N, di, outer=True)

        self._chunked(node, L, [(delta, di, 0)], [A], di * N, emit)

    def lower_outer_b(self, node: OpNode) -> None:
        """Input product per token: delta[t, :] (x) B[t, :]."""
        delta, B = node.inputs
        L, di = self.g.tensors[delta].shape
        N = self.g.tensors[B].shape[1]

        def emit(t0, cnt, a, out):
            for j in range(cnt):
                self._ew(Opcode.EWM, out + j * di * N * F, a[delta] + j * di * F, a[B] + j * N * F,
                         di, N, 1, outer=True)

        self._chunked(node, L, [(delta, di, 0), (B, N, 0)], [], di * N, emit)

    def lower_scan(self, layer: int, nodes: list[OpNode]) -> None:
        cfg = self.g.config
        L, di, N = cfg.seq_len, cfg.d_inner, cfg.d_state
        p = f"l{layer}."
        h, abar, dB, xs, Cm, y = (p + s for s in ("h", "abar", "dB", "xs", "Cm", "y"))
        dn = di * N * F
        by_token = {}
        for nd in nodes:
            by_token.setdefault(nd.token, []).append(nd)
        self.node = nodes[0]
        h_res = self.plan.residency.get(h) is Residency.SCAN_RESIDENT
        if h_res:
            self.resident[h] = self._region(h, dn, Residency.SCAN_RESIDENT)
        slots = {}
        if not h_res:
            slots[h] = self._region(h, dn)
        for t, size in ((abar, dn), (dB, dn), (xs, di * F)):
            if self._res(t) is None:
                slots[t] = self._region(t, size)
        u_slot = self._region(p + "u", dn)
        c_slot = self._region(Cm, N * F)
        y_slot = self._region(y, di * F)
        h_addr = self.resident[h].offset if h_res else slots[h].offset

        def operand(t: str, n: int, elems: int) -> int:
            if self._res(t) is not None:
                return self._res(t).offset + n * elems * F
            self._load(slots[t].offset, self.hbm.addr(t) + n * elems * F, elems * F, t)
            return slots[t].offset

        for n in range(L):
            decay, u, update, yn = by_token[n]
            first_resident = h_res and n == 0
            self.node = decay
            if not first_resident:
                if not h_res:
                    self._load(h_addr, self.hbm.addr(h), dn, h)
                a_addr = operand(abar, n, di * N)
                self._ew(Opcode.EWM, h_addr, a_addr, h_addr, di, N, di)
            self.node = u
            x_addr = operand(xs, n, di)
            b_addr = operand(dB, n, di * N)
            target = h_addr if first_resident else u_slot.offset
            self._ew(Opcode.EWM, target, x_addr, b_addr, di, N, di, outer=True)
            self.node = update
            if not first_resident:
                self._ew(Opcode.EWA, h_addr, h_addr, u_slot.offset, di, N, di)
            if not h_res:
                self._store(self.hbm.addr(h), h_addr, dn, h)
            self.node = yn
            self._load(c_slot.offset, self._hbm_row(Cm, n), N * F, Cm)
            self._compute(Opcode.LIN, y_slot.offset, h_addr, c_slot.offset, imm=self._cregs(di, N, 1))
            self._store(self._hbm_row(y, n), y_slot.offset, di * F, y)
        if h_res:
            self._store(self.hbm.addr(h), h_addr, dn, h)
        self._release(*slots.values(), u_slot, c_slot, y_slot)
        for t in (h, abar, dB):
            if t in self.resident:
                self._release(self.resident.pop(t))
        self.alias.pop(p + "dA", None)

    # -- driver ---------------------------------------------------------------

    def run(self, exp_consts) -> None:
        cfg = self.g.config
        nodes = self.g.nodes
        i = 0
        while i < len(nodes):
            node = nodes[i]
            self.node = node
            layer = node.layer
            p = f"l{layer}."
            if cfg is not None and node.name == p + "norm":
                self.plan.residency.update(plan_inter(self.g, layer, self.capacity, enabled=self.flags.inter_bm))
            if node.token is not None:
                j = i
                while j < len(nodes) and nodes[j].token is not None and nodes[j].layer == layer:
                    j += 1
                self.lower_scan(layer, nodes[i:j])
                i = j
                continue
            self._maybe_make_resident(node)
            kind = node.kind
            if kind is NodeKind.LINEAR:
                self.lower_linear(node)
            elif kind is NodeKind.NORM:
                self.lower_norm(node, cfg.eps_norm if cfg else 1e-5)
            elif kind is NodeKind.CONV:
                self.lower_conv(node)
            elif kind is NodeKind.SILU:
                self.lower_unary(node)
            elif kind is NodeKind.EXP:
                if self._res(node.output) is None and self._res(node.inputs[0]) is not None:
                    raise PlanningError("exp input resident but output not")
                self.lower_unary(node, exp_consts)
            elif kind is NodeKind.EW2_OUTER:
                if node.name.endswith("dA"):
                    self.lower_outer_a(node)
                else:
                    self.lower_outer_b(node)
            else:
                self.lower_binary(node)
            self._maybe_release_resident(node)
            i += 1

    def _maybe_make_resident(self, node: OpNode) -> None:
        p = f"l{node.layer}."
        res = self.plan.residency
        target = node.output
        if node.name == p + "dA" and res.get(p + "abar") is Residency.SCAN_RESIDENT:
            # the transition product is written straight into its exp'd slot
            self.alias[target] = p + "abar"
            target = p + "abar"
        if res.get(target) is Residency.SCAN_RESIDENT and target not in self.resident:
            self.resident[target] = self._region(target, self.g.tensors[target].nbytes, Residency.SCAN_RESIDENT)

    def _maybe_release_resident(self, node: OpNode) -> None:
        p = f"l{node.layer}."
        if node.name == p + "skip_mul" and (p + "xs") in self.resident:
            self._release(self.resident.pop(p + "xs"))


def lower(cfg: MambaConfig | Graph, flags: LowerFlags | None = None, *,
          capacity: int = BUFFER_CAPACITY, max_instructions: int = DEFAULT_MAX_INSTRUCTIONS,
          exp_params=None) -> Lowered:
    """Compile a config (or a prebuilt graph) into a program and buffer plan."""
    from .approx import default_exp_params

    flags = flags or LowerFlags()
    if isinstance(cfg, Graph):
        graph, config = cfg, cfg.config
    else:
        config = cfg
        if cfg.delta_softplus:
            raise PlanningError("the instruction set has no softplus; delta_softplus is golden-model only")
        graph = build_graph(cfg)
    params = exp_params or default_exp_params()
    lw = _Lowerer(graph, flags, capacity, max_instructions)
    lw.run(params.as_f32())
    lw.plan.validate()
    return Lowered(lw.prog, lw.plan, lw.hbm, graph, flags, config)


def stage_hbm(lowered: Lowered, weights: list[LayerWeights] | None, x, extra: dict | None = None) -> np.ndarray:
    """Initial HBM image (float32 words indexed by byte address / 4)."""
    hbm = np.zeros(lowered.hbm.end // F, dtype=np.float32)

    def put(tid: str, arr) -> None:
        t = lowered.graph.tensors[tid]
        arr = as_tensor(arr).reshape(-1)
        start = (lowered.hbm.addr(tid) + t.pad_rows * t.row_elems * F) // F
        if arr.size != math.prod(t.shape):
            raise ValueError(f"{tid}: got {arr.size} values for shape {t.shape}")
        hbm[start:start + arr.size] = arr

    cfg = lowered.config
    if cfg is not None:
        put("x", x)
        for l, w in enumerate(weights or []):
            p = f"l{l}."
            w_x, w_z = w.split_in_proj(cfg)
            w_dt, w_b, w_c = w.split_x_proj(cfg)
            for name, arr in [("gamma", w.norm_gamma), ("beta", w.norm_beta), ("w_in_x", w_x), ("w_in_z", w_z),
                              ("conv_wt", w.conv_w.T), ("w_dt_low", w_dt), ("w_b", w_b), ("w_c", w_c),
                              ("w_dt", w.dt_proj), ("dt_bias", w.dt_bias), ("A", w.A), ("D", w.D_skip),
                              ("w_out", w.out_proj)]:
                put(p + name, arr)
            if p + "ones" in lowered.graph.tensors:
                put(p + "ones", np.ones(cfg.d_state, dtype=np.float32))
    for tid, arr in (extra or {}).items():
        put(tid, arr)
    return hbm


def read_hbm_tensor(lowered: Lowered, hbm: np.ndarray, tid: str) -> np.ndarray:
    t = lowered.graph.tensors[tid]
    start = (lowered.hbm.addr(tid) + t.pad_rows * t.row_elems * F) // F
    return hbm[start:start + math.prod(t.shape)].reshape(t.shape).copy()


def plan_json(lowered: Lowered) -> str:
    d = lowered.plan.to_dict()
    d["hbm"] = {k: {"addr": lowered.hbm.addrs[k], "bytes": lowered.hbm.sizes[k]} for k in sorted(lowered.hbm.addrs)}
    d["instructions"] = len(lowered.program)
    d["flags"] = {"intra_bm": lowered.flags.intra_bm, "inter_bm": lowered.flags.inter_bm}
    return json.dumps(d, indent=1, sort_keys=True) + "\n"
