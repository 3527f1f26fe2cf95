"""Scalar and vectorized codecs for the small float formats used by FP4 block quantization.

E2M1 (4-bit elements), E4M3 (8-bit NVFP4 block scales) and E8M0 (power-of-two
MXFP4 block scales). All rounding is round-to-nearest, ties to even mantissa,
with saturation at the format maximum. Functions accept Python scalars or numpy
arrays; scalar inputs return scalars.
"""

from __future__ import annotations

import enum

import numpy as np

__all__ = [
    "NonFiniteError",
    "RoundingMode",
    "E2M1_MAX",
    "E2M1_GRID",
    "E4M3_MAX",
    "E4M3_MIN_SUBNORMAL",
    "E8M0_MIN_EXP",
    "E8M0_MAX_EXP",
    "e2m1_decode",
    "e2m1_encode",
    "e2m1_round",
    "e4m3_decode",
    "e4m3_encode",
    "e4m3_round",
    "e8m0_decode",
    "e8m0_encode",
    "e8m0_to_bits",
    "e8m0_from_bits",
]


class RoundingMode(enum.Enum):
    NEAREST_EVEN = "nearest_even"


E2M1_MAX = 6.0
E2M1_GRID = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0], dtype=np.float32)

E4M3_MAX = 448.0
E4M3_MIN_SUBNORMAL = 2.0**-9

E8M0_MIN_EXP = -127
E8M0_MAX_EXP = 127

# 16 codes: low three bits index the magnitude grid, bit 3 is the sign.
_E2M1_TABLE = np.concatenate([E2M1_GRID, -E2M1_GRID]).astype(np.float32)


def _build_e4m3_table() -> np.ndarray:
    table = np.empty(256, dtype=np.float32)
    for bits in range(256):
        sign = -1.0 if bits & 0x80 else 1.0
        exp = (bits >> 3) & 0xF
        man = bits & 0x7
        if exp == 0xF and man == 0x7:
            table[bits] = np.nan
        elif exp == 0:
            table[bits] = sign * (man / 8.0) * 2.0**-6
        else:
            table[bits] = sign * (1.0 + man / 8.0) * 2.0 ** (exp - 7)
    return table


_E4M3_TABLE = _build_e4m3_table()


class NonFiniteError(ValueError):
    """Raised when NaN or infinity reaches an encoder or quantizer."""


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite value")


def _round_minifloat(mag: np.ndarray, man_bits: int, min_exp: int, max_val: float) -> np.ndarray:
    """Round non-negative magnitudes to a binary minifloat grid (RNE, saturating).

    Works in float64, which holds every float32 input and every grid point
    exactly, so the only rounding is the explicit ``rint``.
    """
    _, e = np.frexp(mag)
    e = np.maximum(e - 1, min_exp)
    quantum = np.ldexp(1.0, e - man_bits)
    return np.minimum(np.rint(mag / quantum) * quantum, max_val)


def _scalar_or_array(out: np.ndarray, scalar: bool):
    return out.item() if scalar else out


# -- E2M1 ---------------------------------------------------------------------


def e2m1_decode(code):
    """Decode 4-bit E2M1 codes to float32 values."""
    c = np.asarray(code)
    if np.any((c < 0) | (c > 15)):
        raise ValueError("E2M1 code out of range [0, 15]")
    out = _E2M1_TABLE[c.astype(np.intp)]
    return _scalar_or_array(out, c.ndim == 0)


def e2m1_round(x) -> np.ndarray:
    """Round to the nearest signed E2M1 value without producing codes (float32 output).

    Hot path of fake quantization. The quantum is ``2**(clip(exp, 0, 2) - 1)``
    read straight from the float32 exponent field; values above 6 are clamped
    first, which gives the same result as round-then-saturate.
    """
    x = np.asarray(x, dtype=np.float32)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    mag = np.abs(x)
    np.minimum(mag, np.float32(E2M1_MAX), out=mag)
    e = (mag.view(np.int32) >> 23) - 127
    np.clip(e, 0, 2, out=e)
    inv_quantum = ((128 - e) << 23).view(np.float32)
    v = np.rint(mag * inv_quantum)
    v /= inv_quantum
    np.copysign(v, x, out=v)
    return v[0] if scalar else v


def e2m1_encode(x, mode: RoundingMode = RoundingMode.NEAREST_EVEN):
    """Encode floats as E2M1 codes. ``|x| > 6`` saturates, zero keeps its sign."""
    if mode is not RoundingMode.NEAREST_EVEN:
        raise ValueError(f"unsupported rounding mode {mode!r}")
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr)
    mag = _round_minifloat(np.abs(arr), 1, 0, E2M1_MAX)
    # the rounded magnitude is exactly one of the grid points
    idx = np.searchsorted(E2M1_GRID.astype(np.float64), mag).astype(np.uint8)
    codes = idx | (np.signbit(arr).astype(np.uint8) << 3)
    return _scalar_or_array(codes, arr.ndim == 0)


# -- E4M3 ---------------------------------------------------------------------


def e4m3_decode(bits):
    """Decode E4M3 bit patterns to float32. The NaN patterns decode to NaN."""
    b = np.asarray(bits)
    out = _E4M3_TABLE[b.astype(np.intp) & 0xFF]
    return _scalar_or_array(out, b.ndim == 0)


def e4m3_round(x) -> np.ndarray:
    """Round to the nearest signed E4M3 value, saturating at 448 (float64 output)."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(_round_minifloat(np.abs(x), 3, -6, E4M3_MAX), x)


def e4m3_encode(x):
    """Encode floats as E4M3 bit patterns (uint8). Never produces NaN."""
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr)
    mag = _round_minifloat(np.abs(arr), 3, -6, E4M3_MAX)
    _, e = np.frexp(mag)
    e = e - 1
    normal = e >= -6
    exp_field = np.where(normal, e + 7, 0)
    man = np.where(
        normal,
        (np.ldexp(mag, -e) - 1.0) * 8.0,
        np.ldexp(mag, 9),
    )
    exp_field = np.where(mag == 0, 0, exp_field)
    man = np.where(mag == 0, 0, man)
    bits = (exp_field.astype(np.uint8) << 3) | man.astype(np.uint8)
    bits = bits | (np.signbit(arr).astype(np.uint8) << 7)
    return _scalar_or_array(bits.astype(np.uint8), arr.ndim == 0)


# -- E8M0 ---------------------------------------------------------------------


def e8m0_encode(x):
    """Return the power-of-two exponent ``floor(log2(x))`` clamped to [-127, 127]."""
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr)
    if np.any(arr <= 0):
        raise ValueError("E8M0 scale requires a positive value")
    _, e = np.frexp(arr)
    exp = np.clip(e - 1, E8M0_MIN_EXP, E8M0_MAX_EXP).astype(np.int16)
    return _scalar_or_array(exp, arr.ndim == 0)


def e8m0_decode(exponent):
    """Decode an E8M0 exponent to its float32 power of two."""
    e = np.asarray(exponent)
    out = np.ldexp(np.float32(1.0), e.astype(np.int32)).astype(np.float32)
    return _scalar_or_array(out, e.ndim == 0)


def e8m0_to_bits(exponent) -> np.ndarray:
    """Biased byte storage (exponent + 127); 0xFF is the unused NaN pattern."""
    return (np.asarray(exponent, dtype=np.int16) + 127).astype(np.uint8)


def e8m0_from_bits(bits) -> np.ndarray:
    return np.asarray(bits, dtype=np.int16) - 127
