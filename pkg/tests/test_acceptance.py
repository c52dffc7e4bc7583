"""End-to-end acceptance checks. Each criterion prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from marca.approx import ExpParams, calibrate_exp_bias, fast_exp_biased, mean_relative_error, silu_piecewise_array
from marca.compiler import LowerFlags, linear_graph, lower
from marca.core import MambaConfig, Nonlinearity, Reduction, make_input, make_weights, mamba_model_ref, tiny_config
from marca.engine import EXP_TILE_CYCLES, MM_TILE_CYCLES, MachineConfig, MachineState, execute_instruction
from marca.isa import Instruction, Opcode, assemble, decode, disassemble, encode
from marca.memory import BufferPool, HbmChannel, TrafficStats, energy
from marca.simulator import simulate

SILU_BOUND = 0.081
SWEEP = (16, 64, 256, 1024, 2048)
CORPUS = sorted((Path(__file__).parent / "corpus").glob("*.s"))


def proxy(L: int) -> MambaConfig:
    return MambaConfig.from_preset("130M", seq_len=L, scale=16, n_layers=1)


def c1():
    a, b = fast_exp_biased(0.0), fast_exp_biased(math.log(2))
    return a == 1.0 and b == 2.0, f"exp(0)={a!r} exp(ln2)={b!r}", 1


def c2():
    p = calibrate_exp_bias()
    e0, e1 = mean_relative_error(ExpParams()), mean_relative_error(p)
    return e1 <= e0, f"uncalibrated={e0:.6f} calibrated={e1:.6f} (bias_b={p.bias_b}, c={p.c})", 10


def c3():
    x = np.linspace(-5, 4, 10_000)
    err = float(np.max(np.abs(silu_piecewise_array(x).astype(np.float64) - x / (1 + np.exp(-x)))))
    return err <= SILU_BOUND, f"max |err| = {err:.5f} <= {SILU_BOUND}", 1


def c4():
    cfg = tiny_config(seq_len=8, seed=5)
    w, x = make_weights(cfg), make_input(cfg)
    ok, rels, exact = True, [], []
    for intra in (True, False):
        for inter in (True, False):
            low = lower(cfg, LowerFlags(intra, inter))
            out = simulate(low, w, x).output
            gold = mamba_model_ref(x, w, cfg)
            rel = float(np.max(np.abs(out - gold) / np.abs(gold)))
            rels.append(rel)
            ex = simulate(low, w, x, exact_kernels=True).output
            ge = mamba_model_ref(x, w, cfg, nonlinearity=Nonlinearity.EXACT, reduction=Reduction.TREE)
            exact.append(bool(np.array_equal(ex, ge)))
    ok = max(rels) <= 1e-4 and all(exact)
    return ok, f"max-rel={max(rels):.2e} (tol 1e-4); exact-kernel tree-order bit-exact={all(exact)}", 10


EW_MICROPROGRAM = """
.creg c0 = 1024
.creg c1 = 16
.creg c2 = 0x3fb8aa3b
.creg c3 = 127.0
.creg c4 = 0.0
    LI   r1, #0
    LI   r2, #65536
    EWA  r2, r1, r1, #0x010
    EWM  r2, r2, r1, #0x010
    EWM.OUTER r2, r1, r2, #0x010
    EXP  r2, r2, #0x43210
    SILU r2, r2, #0x10
"""


def _busy(machine: MachineConfig) -> tuple[int, int]:
    prog = assemble(EW_MICROPROGRAM)
    st = MachineState(prog, BufferPool(1 << 20), None)
    busy = total = 0
    for i, inst in enumerate(prog.instructions):
        st.index = i
        r = execute_instruction(inst, st, machine)
        if inst.is_compute:
            busy += r.busy_cycles
            total += r.compute_cycles
    return busy, total


def c5():
    rb, rt = _busy(MachineConfig())
    bb, bt = _busy(MachineConfig(baseline_tensor_core=True))
    speedups = []
    for L in (16, 256):
        low = lower(proxy(L))
        m = simulate(low, numeric=False).stats.cycles_total
        b = simulate(low, machine=MachineConfig(baseline_tensor_core=True), numeric=False).stats.cycles_total
        speedups.append(b / m)
    ok = bb == 16 * rb and all(1 < s <= 16 for s in speedups)
    return ok, (f"EW busy cycles {bb}/{rb} = {bb / rb:g}x (incl. issue overhead {bt}/{rt} = {bt / rt:.2f}x); "
                f"proxy speedup L=16,256: {', '.join(f'{s:.2f}x' for s in speedups)}"), 60


def c6():
    cfg = proxy(256)
    dn = cfg.d_inner * cfg.d_state * 4
    on = simulate(lower(cfg, LowerFlags(True, True)), numeric=False).stats
    off = simulate(lower(cfg, LowerFlags(True, False)), numeric=False).stats
    h_on, h_off = on.hbm_bytes_by_tensor["l0.h"], off.hbm_bytes_by_tensor["l0.h"]
    ok = h_on == dn and h_off == 2 * cfg.seq_len * dn
    red = 100 * (1 - on.hbm_bytes / off.hbm_bytes)
    return ok, (f"h bytes on={h_on} (= d_inner*N*4 = {dn}), off={h_off} (= 2L*d_inner*N*4); "
                f"total HBM reduction {red:.1f}% (reference figure 49%, config-dependent)"), 60


def c7():
    d = 256
    ok, parts = True, []
    for L in (64, 256, 1024):
        st = simulate(lower(linear_graph(L, d, d)), numeric=False).stats
        ok &= st.hbm_bytes_by_tensor["W"] == d * d * 4
        parts.append(str(st.hbm_bytes_by_tensor["W"]))
    cfg = proxy(256)
    on = simulate(lower(cfg, LowerFlags(True, True)), numeric=False).stats.hbm_bytes
    off = simulate(lower(cfg, LowerFlags(False, True)), numeric=False).stats.hbm_bytes
    red = 100 * (1 - on / off)
    return ok, (f"weight bytes at L=64,256,1024: {'/'.join(parts)} (= d^2*4 = {d * d * 4}); "
                f"proxy total HBM reduction {red:.1f}% (reference figure 73%, context only)"), 60


def c8():
    shares = []
    for L in SWEEP:
        st = simulate(lower(proxy(L)), machine=MachineConfig(baseline_tensor_core=True), numeric=False).stats
        s = st.class_shares()
        shares.append(s["ew1"] + s["ew2"])
    ok = all(b >= a for a, b in zip(shares, shares[1:]))
    return ok, "EW share " + ", ".join(f"L={L}:{s:.3f}" for L, s in zip(SWEEP, shares)), 300


def c9():
    rng = np.random.default_rng(2024)
    ops = list(Opcode)
    ok = True
    for _ in range(10_000):
        inst = Instruction(ops[rng.integers(len(ops))], *(int(v) for v in rng.integers(0, 16, 4)),
                           flags=int(rng.integers(0, 4)), imm=int(rng.integers(0, 1 << 40)))
        w = encode(inst)
        ok &= encode(decode(w)) == w and decode(w) == inst
    corpus_ok = all(assemble(disassemble(assemble(p.read_text()))).to_bytes() == assemble(p.read_text()).to_bytes()
                    for p in CORPUS)
    prog = lower(tiny_config()).program
    corpus_ok &= assemble(disassemble(prog)).to_bytes() == prog.to_bytes()
    return ok and corpus_ok, f"10^4 random words round-trip={ok}; corpus of {len(CORPUS) + 1} programs={corpus_ok}", 10


def c10():
    ch = HbmChannel()
    e = energy(TrafficStats(hbm_read_bytes=1)) / 8
    ok = MM_TILE_CYCLES == 16 and EXP_TILE_CYCLES == 4 and ch.transfer_cycles(256) == 1 and e == 7.0
    return ok, f"MM tile={MM_TILE_CYCLES} EXP tile={EXP_TILE_CYCLES} HBM 256B={ch.transfer_cycles(256)} cyc, {e} pJ/bit", 1


CRITERIA = [c1, c2, c3, c4, c5, c6, c7, c8, c9, c10]


def evaluate(fn):
    t = time.perf_counter()
    ok, detail, limit = fn()
    dt = time.perf_counter() - t
    ok = bool(ok) and dt < limit
    n = CRITERIA.index(fn) + 1
    return ok, f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {detail} ({dt:.2f}s, limit {limit}s)"


@pytest.mark.parametrize("fn", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 11)])
def test_criterion(fn, capsys):
    ok, line = evaluate(fn)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    results = [evaluate(fn) for fn in CRITERIA]
    for _, line in results:
        print(line)
    raise SystemExit(0 if all(ok for ok, _ in results) else 1)
