"""Bit-exact nonlinear kernels: fast biased exponential and 4-segment SiLU.

All arithmetic is IEEE-754 binary32. Array kernels are the ones the engine
and the golden model share; scalar wrappers exist for convenience and tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

F32 = np.float32

LOG2E = F32(1.0 / math.log(2.0))
EXPONENT_BIAS = 127
MANTISSA_BITS = 23
UNDERFLOW_X = -87.3
SHIFT_LIMIT_EXP = 9  # x' >= 2**9 overflows a 32-bit shift result
INF_THRESHOLD = 255.0  # x' >= 255 lands on the all-ones exponent field

CALIB_BIAS_STEPS = np.arange(-32, 33) / 64.0
CALIB_C_STEPS = np.arange(-51, 52) / 1024.0


class ApproxDomainError(ValueError):
    """Raised when the linear pre-transform x' is not strictly positive."""


class ShiftSaturationError(OverflowError):
    """Raised when the exponent shift unit cannot represent floor(x' * 2**23)."""


@dataclass(frozen=True)
class ExpParams:
    """Coefficients of ``exp(x) ~ as_float(uint(( a*x + b ) * 2**23)) + c``."""

    bias_b: float = 0.0
    c: float = 0.0
    a: float = float(LOG2E)

    @property
    def b(self) -> float:
        return float(F32(EXPONENT_BIAS) + F32(self.bias_b))

    def as_f32(self) -> tuple[np.float32, np.float32, np.float32]:
        return F32(self.a), F32(self.b), F32(self.c)

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c, "bias_b": self.bias_b}

    @classmethod
    def from_dict(cls, d: dict) -> "ExpParams":
        p = cls(bias_b=float(d["bias_b"]), c=float(d["c"]), a=float(d.get("a", LOG2E)))
        if "b" in d and F32(d["b"]) != F32(p.b):
            raise ValueError(f"inconsistent exp params: b={d['b']} but 127+bias_b={p.b}")
        return p

    @classmethod
    def from_f32(cls, a: float, b: float, c: float) -> "ExpParams":
        """Rebuild params from the three float constants the hardware holds."""
        return cls(bias_b=float(F32(b) - F32(EXPONENT_BIAS)), c=float(F32(c)), a=float(F32(a)))


def _as_f32_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


def exp_shift_unit_array(x_prime: np.ndarray) -> np.ndarray:
    """Vectorised shift unit. Inputs must be positive, finite and < 2**9."""
    bits = _as_f32_array(x_prime).view(np.uint32).astype(np.int64)
    exp_field = (bits >> MANTISSA_BITS) & 0xFF
    mantissa = np.where(exp_field == 0, bits & 0x7FFFFF, (bits & 0x7FFFFF) | (1 << MANTISSA_BITS))
    # value * 2**23 == mantissa * 2**(exp_field - 127); denormals use exponent -126
    shift = np.where(exp_field == 0, 1, exp_field) - EXPONENT_BIAS
    left = mantissa << np.clip(shift, 0, 31)
    right = mantissa >> np.clip(-shift, 0, 40)
    out = np.where(shift >= 0, left, right)
    return out.astype(np.uint32)


def exp_shift_unit(x_prime: float) -> int:
    """floor(x_prime * 2**23) using only exponent extraction, the implicit
    leading one, and a barrel shift."""
    xp = F32(x_prime)
    if not np.isfinite(xp) or xp <= 0:
        raise ApproxDomainError(f"shift unit input must be positive and finite, got {x_prime!r}")
    if xp >= F32(2.0**SHIFT_LIMIT_EXP):
        raise ShiftSaturationError(f"x'={float(xp)} >= 2**{SHIFT_LIMIT_EXP} saturates the shift unit")
    return int(exp_shift_unit_array(np.array([xp]))[0])


def fast_exp_array(x, params: ExpParams) -> tuple[np.ndarray, np.ndarray]:
    """Lane-wise fast biased exp.

    Returns ``(values, domain_fault_mask)``. Faulting lanes hold NaN; lanes
    below the underflow threshold flush to 0; lanes whose exponent field
    would saturate return +inf.
    """
    x = _as_f32_array(x)
    a, b, c = params.as_f32()
    with np.errstate(invalid="ignore", over="ignore"):
        xp = (a * x) + b
        flush = x < F32(UNDERFLOW_X)
        domain = ~flush & ~(xp > 0)
        overflow = ~flush & ~domain & (xp >= F32(INF_THRESHOLD))
        valid = ~(flush | domain | overflow)
        u = exp_shift_unit_array(np.where(valid, xp, F32(1.0)))
        out = u.view(np.float32) + c
    out = np.where(flush, F32(0.0), out)
    out = np.where(overflow, F32(np.inf), out)
    out = np.where(domain, F32(np.nan), out)
    return out.astype(np.float32, copy=False), domain


def fast_exp_biased(x: float, params: ExpParams | None = None) -> float:
    """Scalar fast biased exp; raises on a non-positive linear pre-transform."""
    params = params or ExpParams()
    out, fault = fast_exp_array(np.array([x], dtype=np.float32), params)
    if fault[0]:
        a, b, _ = params.as_f32()
        raise ApproxDomainError(f"x'={float(a * F32(x) + b)} <= 0 for x={x}")
    return float(out[0])


def exp_exact_array(x) -> np.ndarray:
    with np.errstate(over="ignore", under="ignore"):
        return np.exp(_as_f32_array(x)).astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# calibration


def calibration_grid() -> np.ndarray:
    """x = -7/n for n = 1..200, densest near zero."""
    n = np.arange(1, 201, dtype=np.float64)
    return (-7.0 / n).astype(np.float32)


def relative_errors(params: ExpParams, grid: np.ndarray | None = None) -> np.ndarray:
    grid = calibration_grid() if grid is None else _as_f32_array(grid)
    approx, _ = fast_exp_array(grid, params)
    ref = np.exp(grid.astype(np.float64))
    return np.abs(approx.astype(np.float64) - ref) / np.abs(ref)


def mean_relative_error(params: ExpParams, grid: np.ndarray | None = None) -> float:
    return float(np.mean(relative_errors(params, grid)))


def calibrate_exp_bias(grid: np.ndarray | None = None) -> ExpParams:
    """Exhaustive sweep over the (bias_b, c) lattice.

    bias_b runs over [-0.5, 0.5] in steps of 1/64 and c over [-0.05, 0.05]
    in steps of 1/1024. Ties resolve to the lexicographically smallest pair.
    """
    grid = calibration_grid() if grid is None else _as_f32_array(grid)
    ref = np.exp(grid.astype(np.float64))
    # c is added after reinterpretation, so compute the integer path once per bias_b
    base = np.stack([fast_exp_array(grid, ExpParams(bias_b=float(bb)))[0] for bb in CALIB_BIAS_STEPS])
    cs = CALIB_C_STEPS.astype(np.float32)
    approx = base[:, None, :] + cs[None, :, None]  # float32 add, same as the bias unit
    err = np.abs(approx.astype(np.float64) - ref) / ref
    mean_err = err.mean(axis=2)
    i, j = np.unravel_index(np.argmin(mean_err), mean_err.shape)
    return ExpParams(bias_b=float(CALIB_BIAS_STEPS[i]), c=float(CALIB_C_STEPS[j]))


@lru_cache(maxsize=1)
def default_exp_params() -> ExpParams:
    return calibrate_exp_bias()


# ---------------------------------------------------------------------------
# piecewise SiLU


class SiluKind(Enum):
    CONSTANT = "constant"
    LINEAR = "linear"
    QUADRATIC = "quadratic"


@dataclass(frozen=True)
class SiluSegment:
    index: int
    lo: float
    hi: float
    kind: SiluKind
    coefficients: tuple[float, ...]
    lo_closed: bool
    hi_closed: bool

    @property
    def op_count(self) -> int:
        return {SiluKind.CONSTANT: 0, SiluKind.LINEAR: 2, SiluKind.QUADRATIC: 4}[self.kind]

    def contains(self, x: float) -> bool:
        above = x >= self.lo if self.lo_closed else x > self.lo
        below = x <= self.hi if self.hi_closed else x < self.hi
        return bool(above and below)


SILU_SEGMENTS = (
    SiluSegment(0, -math.inf, -5.0, SiluKind.CONSTANT, (-0.0135,), False, False),
    SiluSegment(1, -5.0, -1.5, SiluKind.LINEAR, (-0.06244, -0.3457), True, False),
    # ((x + center)^2) * scale + offset
    SiluSegment(2, -1.5, 0.75, SiluKind.QUADRATIC, (1.181, 0.232, -0.275), True, True),
    SiluSegment(3, 0.75, math.inf, SiluKind.LINEAR, (1.05, -0.2781), False, False),
)

_K0 = F32(SILU_SEGMENTS[0].coefficients[0])
_S1, _O1 = (F32(v) for v in SILU_SEGMENTS[1].coefficients)
_QC, _QS, _QO = (F32(v) for v in SILU_SEGMENTS[2].coefficients)
_S3, _O3 = (F32(v) for v in SILU_SEGMENTS[3].coefficients)


def silu_segment_index_array(x) -> np.ndarray:
    """Range detector: segment index per lane (NaN lanes report -1)."""
    x = _as_f32_array(x)
    idx = np.full(x.shape, -1, dtype=np.int8)
    idx[x < F32(-5.0)] = 0
    idx[(x >= F32(-5.0)) & (x < F32(-1.5))] = 1
    idx[(x >= F32(-1.5)) & (x <= F32(0.75))] = 2
    idx[x > F32(0.75)] = 3
    return idx


def silu_segment(x: float) -> tuple[SiluSegment, int]:
    if math.isnan(x):
        raise ValueError("range detector is undefined for NaN")
    seg = SILU_SEGMENTS[int(silu_segment_index_array(np.array([x]))[0])]
    return seg, seg.op_count


def silu_piecewise_array(x) -> np.ndarray:
    x = _as_f32_array(x)
    idx = silu_segment_index_array(x)
    with np.errstate(over="ignore", invalid="ignore"):
        lin_lo = (_S1 * x) + _O1
        t = x + _QC
        t = t * t
        t = t * _QS
        quad = t + _QO
        lin_hi = (_S3 * x) + _O3
    out = np.select(
        [idx == 0, idx == 1, idx == 2, idx == 3],
        [np.broadcast_to(_K0, x.shape), lin_lo, quad, lin_hi],
        default=F32(np.nan),
    )
    return out.astype(np.float32, copy=False)


def silu_piecewise(x: float) -> float:
    return float(silu_piecewise_array(np.array([x], dtype=np.float32))[0])


def silu_exact_array(x) -> np.ndarray:
    x = _as_f32_array(x)
    one = F32(1.0)
    with np.errstate(over="ignore"):
        return (x / (one + np.exp(-x))).astype(np.float32, copy=False)
