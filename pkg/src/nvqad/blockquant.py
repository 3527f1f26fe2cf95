"""Two-level FP4 block quantization (NVFP4 and MXFP4), max calibration and error statistics.

Blocks always run along the last (contiguous) axis. A ragged last block is
padded with zeros; the padding never contributes to the block amax and is
dropped again on dequantization.

NVFP4 scaling::

    tensor_scale = amax / (6 * 448)
    block_scale  = e4m3(block_amax / 6 / tensor_scale)
    x_hat        = e2m1(x / (block_scale * tensor_scale)) * block_scale * tensor_scale

MXFP4 uses 32-element blocks with a power-of-two block scale and no tensor
scale; the shared exponent follows the OCP MX rule
``floor(log2(block_amax)) - 2`` (2 being the largest E2M1 exponent).
"""

from __future__ import annotations

import enum
import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from nvqad import _kernels, codec

# toggled by tests to compare the fused kernel against the numpy reference
_USE_KERNEL = True

__all__ = [
    "Format",
    "QuantConfig",
    "QuantizedTensor",
    "CalibrationState",
    "ErrorStats",
    "calibrate_update",
    "tensor_scale_from_amax",
    "quantize_tensor",
    "dequantize_tensor",
    "fake_quantize",
    "fake_quantize_with_mask",
    "error_stats",
    "save_quantized",
    "load_quantized",
    "dumps_quantized",
    "loads_quantized",
]


class Format(enum.Enum):
    NVFP4 = "nvfp4"
    MXFP4 = "mxfp4"


_BLOCK_SIZES = {Format.NVFP4: 16, Format.MXFP4: 32}
_FORMAT_TAGS = {Format.NVFP4: 1, Format.MXFP4: 2}


@dataclass(frozen=True)
class QuantConfig:
    format: Format = Format.NVFP4
    block_size: int = 16
    fp4_max: float = codec.E2M1_MAX
    scale_max: float = codec.E4M3_MAX

    def __post_init__(self):
        fmt = Format(self.format)
        object.__setattr__(self, "format", fmt)
        if self.block_size != _BLOCK_SIZES[fmt]:
            raise ValueError(
                f"{fmt.value} requires block_size {_BLOCK_SIZES[fmt]}, got {self.block_size}"
            )
        if self.fp4_max != codec.E2M1_MAX:
            raise ValueError("fp4_max must equal the E2M1 grid maximum (6.0)")

    @classmethod
    def nvfp4(cls) -> "QuantConfig":
        return cls(Format.NVFP4, 16)

    @classmethod
    def mxfp4(cls) -> "QuantConfig":
        return cls(Format.MXFP4, 32)

    @classmethod
    def from_name(cls, name: str) -> "QuantConfig":
        fmt = Format(name.lower())
        return cls(fmt, _BLOCK_SIZES[fmt])

    @property
    def min_block_scale(self) -> float:
        if self.format is Format.NVFP4:
            return codec.E4M3_MIN_SUBNORMAL
        return 2.0**codec.E8M0_MIN_EXP


@dataclass
class QuantizedTensor:
    """FP4 codes and scales for one tensor.

    ``codes`` has shape ``(*lead, n_blocks, block_size)`` and ``block_scales``
    has shape ``(*lead, n_blocks)``. Block scales hold E4M3 bit patterns for
    NVFP4 and signed E8M0 exponents for MXFP4.
    """

    shape: tuple
    codes: np.ndarray
    block_scales: np.ndarray
    tensor_scale: float
    config: QuantConfig

    @property
    def n_blocks(self) -> int:
        return int(np.prod(self.block_scales.shape))

    def block_scale_values(self) -> np.ndarray:
        if self.config.format is Format.NVFP4:
            return codec.e4m3_decode(self.block_scales).astype(np.float32)
        return codec.e8m0_decode(self.block_scales)


@dataclass
class CalibrationState:
    amax: float = 0.0
    samples_seen: int = 0


@dataclass
class ErrorStats:
    mse: float
    sqnr_db: float
    clip_fraction: float
    amax_in: float
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "mse": self.mse,
            "sqnr_db": self.sqnr_db,
            "clip_fraction": self.clip_fraction,
            "amax_in": self.amax_in,
            **self.extra,
        }


def calibrate_update(state: CalibrationState, tensor) -> CalibrationState:
    """Fold ``max(|tensor|)`` into a running max calibration state."""
    x = np.asarray(tensor, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise codec.NonFiniteError("non-finite value in calibration tensor")
    if x.size == 0:
        return CalibrationState(state.amax, state.samples_seen)
    amax = max(state.amax, float(np.max(np.abs(x))))
    return CalibrationState(amax, state.samples_seen + x.size)


def tensor_scale_from_amax(amax: float, config: QuantConfig) -> float:
    if amax < 0:
        raise ValueError("amax must be non-negative")
    if config.format is Format.MXFP4 or amax == 0:
        return 1.0
    return float(np.float32(amax) / np.float32(config.fp4_max * config.scale_max))


def _blocked(x: np.ndarray, block_size: int) -> np.ndarray:
    """Reshape to ``(*lead, n_blocks, block_size)``, zero-padding the last axis."""
    if x.ndim == 0:
        x = x.reshape(1)
    n = x.shape[-1]
    n_blocks = max(1, -(-n // block_size))
    pad = n_blocks * block_size - n
    if pad:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (pad,), dtype=x.dtype)], axis=-1)
    return x.reshape(x.shape[:-1] + (n_blocks, block_size))


def _unblocked(xb: np.ndarray, shape: tuple) -> np.ndarray:
    flat = xb.reshape(xb.shape[:-2] + (-1,))
    n = shape[-1] if len(shape) else 1
    return flat[..., :n].reshape(shape)


def _block_amax(xb: np.ndarray) -> np.ndarray:
    # pairwise halving; much faster than max() along a short trailing axis
    a = np.abs(xb)
    n = a.shape[-1]
    while n > 1 and n % 2 == 0:
        h = n // 2
        a = np.maximum(a[..., :h], a[..., h:n])
        n = h
    return a.max(axis=-1) if n > 1 else a[..., 0]


def _check_input(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise codec.NonFiniteError("non-finite value in tensor to quantize")
    return x


def _block_scales(block_amax: np.ndarray, config: QuantConfig, tensor_scale: float):
    """Return (stored scales, decoded float32 scales) for each block."""
    ts = np.float32(tensor_scale)
    if config.format is Format.NVFP4:
        raw = block_amax / np.float32(config.fp4_max) / ts
        bits = codec.e4m3_encode(raw)
        bits = np.atleast_1d(bits).reshape(block_amax.shape)
        # zero blocks and underflowing scales get the smallest positive scale
        bits = np.where(bits == 0, np.uint8(1), bits).astype(np.uint8)
        return bits, codec.e4m3_decode(bits).astype(np.float32)
    safe = np.where(block_amax > 0, block_amax, np.float32(1.0))
    exp = np.atleast_1d(codec.e8m0_encode(safe)).reshape(block_amax.shape).astype(np.int16)
    exp = np.where(block_amax > 0, exp - 2, codec.E8M0_MIN_EXP)
    exp = np.clip(exp, codec.E8M0_MIN_EXP, codec.E8M0_MAX_EXP).astype(np.int16)
    return exp, np.atleast_1d(codec.e8m0_decode(exp)).reshape(block_amax.shape)


def _quantize_blocks(x: np.ndarray, config: QuantConfig, tensor_scale: float):
    if not tensor_scale > 0:
        raise ValueError("tensor_scale must be positive")
    xb = _blocked(x, config.block_size)
    block_amax = _block_amax(xb)
    stored, scale = _block_scales(block_amax, config, tensor_scale)
    denom = scale * np.float32(tensor_scale)
    scaled = xb / denom[..., None]
    return xb, stored, scale, scaled


def quantize_tensor(x, config: QuantConfig, tensor_scale: float) -> QuantizedTensor:
    x = _check_input(x)
    _, stored, _, scaled = _quantize_blocks(x, config, tensor_scale)
    codes = codec.e2m1_encode(scaled)
    return QuantizedTensor(
        shape=tuple(x.shape),
        codes=np.asarray(codes, dtype=np.uint8),
        block_scales=stored,
        tensor_scale=float(np.float32(tensor_scale)),
        config=config,
    )


def dequantize_tensor(q: QuantizedTensor) -> np.ndarray:
    vals = codec.e2m1_decode(q.codes)
    scale = q.block_scale_values()
    out = (vals * scale[..., None]) * np.float32(q.tensor_scale)
    return _unblocked(out.astype(np.float32), q.shape)


def fake_quantize_with_mask(x, config: QuantConfig, tensor_scale: float | None = None):
    """Quantize-dequantize ``x`` and report which elements stayed in range.

    ``tensor_scale=None`` derives the tensor scale from ``x`` itself (dynamic
    max calibration). The returned mask is True where ``|x|`` does not exceed
    the largest value representable in the element's block.
    """
    x = _check_input(x)
    if tensor_scale is None:
        tensor_scale = tensor_scale_from_amax(float(np.max(np.abs(x))) if x.size else 0.0, config)
    if _kernels.AVAILABLE and x.ndim >= 1 and x.size and _USE_KERNEL:
        if not tensor_scale > 0:
            raise ValueError("tensor_scale must be positive")
        x2 = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
        out, mask = _kernels.fake_quant_2d(
            x2, config.block_size, config.format is Format.NVFP4, float(tensor_scale)
        )
        return out.reshape(x.shape), mask.reshape(x.shape)
    return _fake_quantize_numpy(x, config, tensor_scale)


def _fake_quantize_numpy(x: np.ndarray, config: QuantConfig, tensor_scale: float):
    xb, _, scale, scaled = _quantize_blocks(x, config, tensor_scale)
    # value-domain rounding; identical to encode/decode through codes
    vals = codec.e2m1_round(scaled)
    ts = np.float32(tensor_scale)
    out = _unblocked((vals * scale[..., None]) * ts, x.shape)
    limit = (np.float32(config.fp4_max) * scale) * ts
    mask = _unblocked(np.abs(xb) <= limit[..., None], x.shape)
    return out, mask


def fake_quantize(x, config: QuantConfig, tensor_scale: float | None = None) -> np.ndarray:
    return fake_quantize_with_mask(x, config, tensor_scale)[0]


def error_stats(x, x_hat, config: QuantConfig | None = None, tensor_scale: float | None = None) -> ErrorStats:
    """Quantization error summary.

    ``clip_fraction`` needs the block scales, so it is only computed when
    ``config`` is given; otherwise it is reported as 0.
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    err = np.sum((x - x_hat) ** 2)
    mse = float(err / x.size) if x.size else 0.0
    sig = float(np.sum(x**2))
    if err == 0:
        sqnr = math.inf
    elif sig == 0:
        sqnr = -math.inf
    else:
        sqnr = 10.0 * math.log10(sig / err)
    clip = 0.0
    if config is not None and x.size:
        _, mask = fake_quantize_with_mask(x.astype(np.float32), config, tensor_scale)
        clip = float(1.0 - mask.mean())
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    return ErrorStats(mse=mse, sqnr_db=sqnr, clip_fraction=clip, amax_in=amax)


# -- serialization ------------------------------------------------------------

_MAGIC = b"NVQT"
_VERSION = 1


def dumps_quantized(q: QuantizedTensor) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<HB", _VERSION, _FORMAT_TAGS[q.config.format]))
    buf.write(struct.pack("<I", len(q.shape)))
    buf.write(struct.pack(f"<{len(q.shape)}I", *q.shape))
    buf.write(struct.pack("<f", q.tensor_scale))
    if q.config.format is Format.NVFP4:
        scales = q.block_scales.astype(np.uint8)
    else:
        scales = codec.e8m0_to_bits(q.block_scales)
    buf.write(scales.reshape(-1).tobytes())
    codes = q.codes.reshape(-1).astype(np.uint8)
    packed = codes[0::2] | (codes[1::2] << 4)
    buf.write(packed.astype(np.uint8).tobytes())
    return buf.getvalue()


def loads_quantized(data: bytes) -> QuantizedTensor:
    if data[:4] != _MAGIC:
        raise ValueError("not an NVQT quantized tensor")
    version, tag = struct.unpack_from("<HB", data, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported NVQT version {version}")
    fmt = {v: k for k, v in _FORMAT_TAGS.items()}.get(tag)
    if fmt is None:
        raise ValueError(f"unknown format tag {tag}")
    config = QuantConfig(fmt, _BLOCK_SIZES[fmt])
    off = 7
    (rank,) = struct.unpack_from("<I", data, off)
    off += 4
    shape = struct.unpack_from(f"<{rank}I", data, off)
    off += 4 * rank
    (tensor_scale,) = struct.unpack_from("<f", data, off)
    off += 4
    lead = tuple(shape[:-1]) if rank else ()
    last = shape[-1] if rank else 1
    n_blocks = max(1, -(-last // config.block_size))
    n_scales = int(np.prod(lead, dtype=np.int64)) * n_blocks
    scales = np.frombuffer(data, dtype=np.uint8, count=n_scales, offset=off).copy()
    off += n_scales
    n_codes = n_scales * config.block_size
    packed = np.frombuffer(data, dtype=np.uint8, count=n_codes // 2, offset=off)
    codes = np.empty(n_codes, dtype=np.uint8)
    codes[0::2] = packed & 0x0F
    codes[1::2] = packed >> 4
    if fmt is Format.MXFP4:
        scales = codec.e8m0_from_bits(scales)
    return QuantizedTensor(
        shape=tuple(shape),
        codes=codes.reshape(lead + (n_blocks, config.block_size)),
        block_scales=scales.reshape(lead + (n_blocks,)),
        tensor_scale=float(tensor_scale),
        config=config,
    )


def save_quantized(path, q: QuantizedTensor) -> None:
    with open(path, "wb") as f:
        f.write(dumps_quantized(q))


def load_quantized(path) -> QuantizedTensor:
    with open(path, "rb") as f:
        return loads_quantized(f.read())
