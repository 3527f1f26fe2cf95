"""NVFP4 block quantization, a tape-based autodiff engine and a toy QAD/QAT lab."""

from nvqad.blockquant import (
    ErrorStats,
    Format,
    QuantConfig,
    QuantizedTensor,
    dequantize_tensor,
    error_stats,
    fake_quantize,
    quantize_tensor,
)
from nvqad.distill import MetricsReport, TrainConfig, evaluate, train_qad, train_qat, train_teacher
from nvqad.model import ModelConfig, QuantPolicy, ToyTransformer

__version__ = "0.1.0"

__all__ = [
    "ErrorStats",
    "Format",
    "QuantConfig",
    "QuantizedTensor",
    "dequantize_tensor",
    "error_stats",
    "fake_quantize",
    "quantize_tensor",
    "MetricsReport",
    "TrainConfig",
    "evaluate",
    "train_qad",
    "train_qat",
    "train_teacher",
    "ModelConfig",
    "QuantPolicy",
    "ToyTransformer",
]
