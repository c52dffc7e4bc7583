import math
import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marca.approx import (
    LOG2E,
    SILU_SEGMENTS,
    ApproxDomainError,
    ExpParams,
    ShiftSaturationError,
    calibrate_exp_bias,
    calibration_grid,
    exp_shift_unit,
    exp_shift_unit_array,
    fast_exp_array,
    fast_exp_biased,
    mean_relative_error,
    silu_exact_array,
    silu_piecewise,
    silu_piecewise_array,
    silu_segment,
)

# Frozen from a dense-grid float64 oracle (10^4 points on [-5, 4]).
SILU_MAX_ABS_ERROR = 0.081


def f32_bits(v: float) -> int:
    return struct.unpack("<I", struct.pack("<f", v))[0]


def bits_f32(u: int) -> float:
    return struct.unpack("<f", struct.pack("<I", u))[0]


def f32(v: float) -> float:
    return bits_f32(f32_bits(v))


def oracle_fast_exp(x: float, bias_b: float = 0.0, c: float = 0.0) -> float:
    """Scalar reference built on struct and exact rationals."""
    a = f32(1 / math.log(2))
    b = f32(f32(127.0) + f32(bias_b))
    xp = f32(f32(a * f32(x)) + b)
    u = math.floor(Fraction(xp) * 2**23)
    return f32(bits_f32(u) + f32(c))


def test_anchor_values_bit_exact():
    assert fast_exp_biased(0.0) == 1.0
    assert fast_exp_biased(math.log(2)) == 2.0


def test_exp_params_b():
    p = ExpParams(bias_b=-0.25, c=0.01)
    assert p.b == 126.75
    assert ExpParams.from_dict(p.to_dict()) == p
    with pytest.raises(ValueError):
        ExpParams.from_dict({"bias_b": 0.0, "c": 0.0, "b": 100.0})
    a, b, c = p.as_f32()
    assert ExpParams.from_f32(a, b, c) == ExpParams(bias_b=-0.25, c=float(np.float32(0.01)))


@settings(max_examples=300, deadline=None)
@given(st.floats(-80.0, 80.0, width=32),
       st.sampled_from([-0.5, -0.03125, 0.0, 0.25]),
       st.sampled_from([-0.05, 0.0, 0.0107421875]))
def test_fast_exp_matches_scalar_oracle(x, bias_b, c):
    got, fault = fast_exp_array(np.array([x], np.float32), ExpParams(bias_b=bias_b, c=c))
    assert not fault[0]
    assert got[0] == np.float32(oracle_fast_exp(x, bias_b, c))


@settings(max_examples=300, deadline=None)
@given(st.floats(0.0, 511.5, width=32, exclude_min=True))
def test_shift_unit_is_floor(xp):
    assert exp_shift_unit(xp) == math.floor(Fraction(float(np.float32(xp))) * 2**23)


def test_shift_unit_examples():
    assert exp_shift_unit(127.3) == 1067869824
    assert exp_shift_unit(1.0) == 1 << 23
    tiny = bits_f32(1)  # smallest denormal
    assert exp_shift_unit_array(np.array([tiny], np.float32))[0] == 0


def test_shift_unit_errors():
    with pytest.raises(ApproxDomainError):
        exp_shift_unit(0.0)
    with pytest.raises(ApproxDomainError):
        exp_shift_unit(-1.0)
    with pytest.raises(ShiftSaturationError):
        exp_shift_unit(512.0)


def test_domain_fault_and_flush():
    # a*x + b <= 0 needs x < about -88, which the flush threshold catches first
    assert fast_exp_biased(-100.0) == 0.0
    p = ExpParams(bias_b=-126.5)  # forces a non-positive pre-transform near x=-1
    with pytest.raises(ApproxDomainError):
        fast_exp_biased(-1.0, p)
    out, fault = fast_exp_array(np.array([-1.0, 0.0], np.float32), p)
    assert fault.tolist() == [True, False]
    assert np.isnan(out[0])


def test_overflow_to_inf():
    out, fault = fast_exp_array(np.array([100.0], np.float32), ExpParams())
    assert np.isinf(out[0]) and not fault[0]


def test_calibration_grid():
    g = calibration_grid()
    assert g.shape == (200,)
    assert g[0] == np.float32(-7.0) and g[-1] == np.float32(-0.035)


def test_calibration_improves_and_is_frozen():
    p = calibrate_exp_bias()
    assert p == ExpParams(bias_b=-0.03125, c=0.0)
    e0 = mean_relative_error(ExpParams())
    e1 = mean_relative_error(p)
    assert e1 <= e0
    assert e0 == pytest.approx(0.023690718, rel=1e-6)
    assert e1 == pytest.approx(0.010062594, rel=1e-6)


def test_calibration_is_lattice_minimum_on_sample():
    """Spot-check the sweep against a scalar evaluation at lattice points."""
    grid = [float(v) for v in calibration_grid()]

    def mre(bb, c):
        return sum(abs(oracle_fast_exp(x, bb, c) - math.exp(x)) / math.exp(x) for x in grid) / len(grid)

    best = mre(-0.03125, 0.0)
    rng = np.random.default_rng(1)
    for _ in range(25):
        bb = int(rng.integers(-32, 33)) / 64
        c = int(rng.integers(-51, 52)) / 1024
        assert mre(bb, c) >= best - 1e-12


def test_silu_segments():
    assert [s.op_count for s in SILU_SEGMENTS] == [0, 2, 4, 2]
    assert silu_segment(-6.0)[0].index == 0
    assert silu_segment(-5.0)[0].index == 1
    assert silu_segment(-1.5)[0].index == 2
    assert silu_segment(0.75)[0].index == 2
    assert silu_segment(0.7500001)[0].index == 3
    with pytest.raises(ValueError):
        silu_segment(float("nan"))


def test_silu_branch_values():
    assert silu_piecewise(-10.0) == np.float32(-0.0135)
    assert silu_piecewise(2.0) == np.float32(np.float32(1.05) * np.float32(2.0) - np.float32(0.2781))
    assert silu_piecewise(-5.0) == pytest.approx(-0.06244 * -5 - 0.3457, abs=1e-6)
    assert silu_piecewise(0.0) == pytest.approx(1.181**2 * 0.232 - 0.275, abs=1e-6)
    assert np.isnan(silu_piecewise_array(np.array([np.nan]))[0])


def test_silu_bound():
    x = np.linspace(-5, 4, 10_000)
    approx = silu_piecewise_array(x).astype(np.float64)
    exact = x / (1 + np.exp(-x))
    err = np.max(np.abs(approx - exact))
    assert err <= SILU_MAX_ABS_ERROR
    assert err > 0.08  # the bound is tight, not slack


def test_silu_exact():
    x = np.array([-3.0, 0.0, 2.0], np.float32)
    ref = x.astype(np.float64) / (1 + np.exp(-x.astype(np.float64)))
    np.testing.assert_allclose(silu_exact_array(x), ref, rtol=1e-6)


def test_log2e_constant():
    assert LOG2E == np.float32(1 / math.log(2))
