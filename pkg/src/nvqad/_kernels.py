"""Fused NVFP4/MXFP4 fake-quantization kernel (numba).

Bit-identical to the numpy path in :mod:`nvqad.blockquant`; the test suite
checks the two against each other. Import fails softly when numba is absent.
"""

from __future__ import annotations

import math

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

AVAILABLE = numba is not None


_MAGIC = np.float32(2.0**23)

if AVAILABLE:

    @numba.njit(cache=True, inline="always")
    def _round_e4m3(raw):
        # raw: float64 >= 0, same algorithm as codec._round_minifloat(mag, 3, -6, 448)
        if raw == 0.0:
            return 0.0
        m, e = math.frexp(raw)
        e = e - 1
        if e < -6:
            e = -6
        quantum = math.ldexp(1.0, e - 3)
        v = np.rint(raw / quantum) * quantum
        return v if v < 448.0 else 448.0

    @numba.njit(cache=True, inline="always")
    def _round_e2m1(s):
        # s: float32, same algorithm as codec.e2m1_round
        mag = min(abs(s), np.float32(6.0))
        if mag < np.float32(2.0):
            q = np.float32(0.5)
        elif mag < np.float32(4.0):
            q = np.float32(1.0)
        else:
            q = np.float32(2.0)
        # float32 add/sub of 2**23 is an exact round-half-even for |y| < 2**22
        y = mag / q
        v = ((y + _MAGIC) - _MAGIC) * q
        return np.float32(math.copysign(v, s))

    @numba.njit(cache=True)
    def fake_quant_2d(x, block, nvfp4, tensor_scale):
        """x: contiguous float32 (rows, n). Returns (out, in_range_mask)."""
        rows, n = x.shape
        out = np.empty_like(x)
        mask = np.empty(x.shape, dtype=np.bool_)
        ts = np.float32(tensor_scale)
        six = np.float32(6.0)
        for r in range(rows):
            for start in range(0, n, block):
                stop = min(start + block, n)
                amax = np.float32(0.0)
                for j in range(start, stop):
                    a = abs(x[r, j])
                    if a > amax:
                        amax = a
                if nvfp4:
                    raw = amax / six / ts
                    sc = np.float32(_round_e4m3(np.float64(raw)))
                    if sc == 0:
                        sc = np.float32(2.0**-9)
                else:
                    if amax > 0:
                        m, e = math.frexp(np.float64(amax))
                        ex = e - 1 - 2
                        if ex < -127:
                            ex = -127
                        if ex > 127:
                            ex = 127
                    else:
                        ex = -127
                    sc = np.float32(math.ldexp(1.0, ex))
                denom = sc * ts
                limit = (six * sc) * ts
                for j in range(start, stop):
                    v = _round_e2m1(x[r, j] / denom)
                    out[r, j] = (v * sc) * ts
                    mask[r, j] = abs(x[r, j]) <= limit
        return out, mask
