"""Counter-based splitmix64 random numbers.

Every draw is a pure function of ``(seed, stream, counter)``::

    z = seed + GOLDEN * (mix(stream) + counter + 1)      (mod 2**64)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

with ``GOLDEN = 0x9E3779B97F4A7C15``. Uniform floats take the top 53 bits.
Because nothing depends on call order, generating sequence ``i`` alone gives
the same numbers as generating it inside a batch.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def mix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def random_bits(seed: int, stream, counter) -> np.ndarray:
    """64-bit draws for broadcast arrays of stream ids and counters."""
    s = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    stream = np.asarray(stream, dtype=np.uint64)
    counter = np.asarray(counter, dtype=np.uint64)
    with np.errstate(over="ignore"):
        base = mix64(stream ^ np.uint64(0xD1B54A32D192ED03)) + counter + np.uint64(1)
        return mix64(s + GOLDEN * base)


def uniform(seed: int, stream, counter) -> np.ndarray:
    """Float64 uniforms in [0, 1)."""
    bits = random_bits(seed, stream, counter)
    return (bits >> np.uint64(11)).astype(np.float64) * (2.0**-53)


def integers(seed: int, stream, counter, high: int) -> np.ndarray:
    """Uniform integers in [0, high) (multiply-shift on 53-bit uniforms)."""
    return np.floor(uniform(seed, stream, counter) * high).astype(np.int64)


def normal(seed: int, stream, counter) -> np.ndarray:
    """Standard normals by Box-Muller over two counter lanes."""
    counter = np.asarray(counter, dtype=np.uint64)
    u1 = uniform(seed, stream, counter * np.uint64(2))
    u2 = uniform(seed, stream, counter * np.uint64(2) + np.uint64(1))
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
