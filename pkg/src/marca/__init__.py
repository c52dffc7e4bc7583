"""Functional and cycle-level model of a reconfigurable Mamba accelerator:
approximate nonlinear kernels, a 64-bit ISA, a buffer-managing compiler,
and an engine/memory simulator checked against an FP32 golden model."""

from .approx import ExpParams, calibrate_exp_bias, fast_exp_biased, silu_piecewise
from .compiler import LowerFlags, PlanningError, build_graph, classify_traffic, lower, plan_inter, plan_intra
from .core import MambaConfig, make_input, make_weights, mamba_block_ref, mamba_model_ref, tiny_config
from .engine import MachineConfig, execute_instruction
from .isa import Instruction, Opcode, Program, assemble, decode, disassemble, encode
from .simulator import SimResult, simulate

__version__ = "0.1.0"

__all__ = [
    "ExpParams", "calibrate_exp_bias", "fast_exp_biased", "silu_piecewise",
    "LowerFlags", "PlanningError", "build_graph", "classify_traffic", "lower", "plan_inter", "plan_intra",
    "MambaConfig", "make_input", "make_weights", "mamba_block_ref", "mamba_model_ref", "tiny_config",
    "MachineConfig", "execute_instruction",
    "Instruction", "Opcode", "Program", "assemble", "decode", "disassemble", "encode",
    "SimResult", "simulate",
]
