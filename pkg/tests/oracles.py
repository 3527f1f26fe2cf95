"""Independent reference implementations used by the tests.

Grids are built from the bit-field definitions and rounding is done by
exhaustive nearest-value search, so nothing here shares code with the
frexp/rint machinery of the package.
"""

from __future__ import annotations

import math

import numpy as np


def e2m1_grid():
    """(values, codes) for all 16 E2M1 codes from sign/exponent/mantissa fields."""
    vals, codes = [], []
    for code in range(16):
        sign = -1.0 if code & 0b1000 else 1.0
        exp = (code >> 1) & 0b11
        man = code & 1
        mag = man * 0.5 if exp == 0 else 2.0 ** (exp - 1) * (1 + man / 2)
        vals.append(sign * mag)
        codes.append(code)
    return np.array(vals), np.array(codes)


def e4m3_grid():
    """(values, bits) for every finite E4M3 pattern (0x7F and 0xFF are NaN)."""
    vals, bits = [], []
    for b in range(256):
        sign = -1.0 if b & 0x80 else 1.0
        exp = (b >> 3) & 0xF
        man = b & 0x7
        if exp == 15 and man == 7:
            continue
        mag = (man / 8) * 2.0**-6 if exp == 0 else 2.0 ** (exp - 7) * (1 + man / 8)
        vals.append(sign * mag)
        bits.append(b)
    return np.array(vals), np.array(bits)


def _nearest(x: np.ndarray, grid: np.ndarray, lsb: np.ndarray) -> np.ndarray:
    """Index of the nearest grid value; ties go to the even-mantissa candidate."""
    d = np.abs(x[:, None] - grid[None, :])
    dmin = d.min(axis=1, keepdims=True)
    cand = d == dmin
    # among tied candidates prefer lsb == 0, then the lowest index
    score = np.where(cand, lsb[None, :], 2)
    return np.argmin(score, axis=1)


def e2m1_nearest(x) -> np.ndarray:
    """Signed nearest E2M1 value (saturating), by brute force."""
    x = np.asarray(x, dtype=np.float64).ravel()
    vals, codes = e2m1_grid()
    pos = codes < 8
    gv, gc = vals[pos], codes[pos]
    idx = _nearest(np.abs(x), gv, gc & 1)
    return np.copysign(gv[idx], x)


def e2m1_nearest_code(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    vals, codes = e2m1_grid()
    pos = codes < 8
    idx = _nearest(np.abs(x), vals[pos], codes[pos] & 1)
    return codes[pos][idx] | (np.signbit(x).astype(np.int64) << 3)


def e4m3_nearest_bits(x) -> np.ndarray:
    """Bits of the nearest E4M3 value (saturating at 448), by brute force."""
    x = np.asarray(x, dtype=np.float64).ravel()
    vals, bits = e4m3_grid()
    pos = bits < 0x80
    idx = _nearest(np.abs(x), vals[pos], bits[pos] & 1)
    return bits[pos][idx] | (np.signbit(x).astype(np.int64) << 7)


def e4m3_value(bits) -> np.ndarray:
    vals, b = e4m3_grid()
    lut = dict(zip(b.tolist(), vals.tolist()))
    return np.array([lut[int(v)] for v in np.ravel(bits)])


def floor_log2(a: float) -> int:
    e = math.floor(math.log2(a))
    while 2.0**e > a:
        e -= 1
    while 2.0 ** (e + 1) <= a:
        e += 1
    return e


def nvfp4_fake_quant(x, tensor_scale: float | None = None) -> np.ndarray:
    """Scalar-pipeline NVFP4 fake quantization of a 1-D float32 vector.

    tensor scale = amax / (6 * 448); per 16-block: scale = E4M3(block_amax / 6 / ts)
    (minimum 2**-9), element = E2M1(x / (scale * ts)) * scale * ts, all in float32.
    """
    x = np.asarray(x, dtype=np.float32).ravel()
    f32 = np.float32
    if tensor_scale is None:
        amax = f32(np.max(np.abs(x))) if x.size else f32(0)
        ts = f32(1.0) if amax == 0 else f32(amax / f32(2688.0))
    else:
        ts = f32(tensor_scale)
    out = np.empty_like(x)
    for start in range(0, x.size, 16):
        blk = x[start : start + 16]
        bamax = f32(np.max(np.abs(blk)))
        raw = f32(f32(bamax / f32(6.0)) / ts)
        scale = f32(e4m3_value(e4m3_nearest_bits([raw]))[0])
        if scale == 0:
            scale = f32(2.0**-9)
        denom = f32(scale * ts)
        y = (blk / denom).astype(np.float32)
        q = e2m1_nearest(y).astype(np.float32)
        out[start : start + 16] = (q * scale).astype(np.float32) * ts
    return out


def mxfp4_fake_quant(x) -> np.ndarray:
    """Scalar-pipeline MXFP4: 32-blocks, scale 2**(floor(log2 amax) - 2)."""
    x = np.asarray(x, dtype=np.float32).ravel()
    out = np.empty_like(x)
    for start in range(0, x.size, 32):
        blk = x[start : start + 32]
        bamax = float(np.max(np.abs(blk)))
        e = -127 if bamax == 0 else max(-127, min(127, floor_log2(bamax) - 2))
        scale = np.float32(2.0**e)
        q = e2m1_nearest((blk / scale).astype(np.float32)).astype(np.float32)
        out[start : start + 32] = q * scale
    return out


def kl_bruteforce(p_logits, q_logits) -> float:
    """KL(softmax(p) || softmax(q)) for one position by direct summation."""
    p = [math.exp(v) for v in p_logits]
    q = [math.exp(v) for v in q_logits]
    zp, zq = sum(p), sum(q)
    return sum((a / zp) * math.log((a / zp) / (b / zq)) for a, b in zip(p, q) if a > 0)


def markov_stationary_bigrams(cls, succ, probs, vocab_size: int, iters: int = 2000):
    """Stationary P(prev, next) of the class-conditioned order-2 chain by power iteration."""
    V = vocab_size
    n_states = probs.shape[0]
    P = np.zeros((n_states, n_states))
    for s in range(n_states):
        p1 = s % V
        for j in range(succ.shape[1]):
            P[s, cls[p1] * V + succ[s, j]] += probs[s, j]
    pi = np.full(n_states, 1.0 / n_states)
    for _ in range(iters):
        pi = pi @ P
    joint = np.zeros((V, V))
    for s in range(n_states):
        p1 = s % V
        np.add.at(joint[p1], succ[s], pi[s] * probs[s])
    return joint
