"""scikit-learn style wrappers around the quantizer and the QAD loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from nvqad import blockquant as bq
from nvqad.data import Dataset
from nvqad.distill import TrainConfig, _log_softmax64, evaluate, train_qad
from nvqad.model import QuantPolicy, ToyTransformer

__all__ = ["BlockQuantizer", "QuantizationAwareDistiller"]


class BlockQuantizer(TransformerMixin, BaseEstimator):
    """Max-calibrated NVFP4 / MXFP4 fake quantizer.

    ``fit`` records the absolute maximum of ``X`` (the per-tensor amax);
    ``transform`` fake-quantizes with the tensor scale derived from it.
    Blocks run along the last axis (features).
    """

    def __init__(self, fmt: str = "nvfp4"):
        self.fmt = fmt

    def _config(self) -> bq.QuantConfig:
        return bq.QuantConfig.from_name(self.fmt)

    def fit(self, X, y=None):
        self.amax_ = 0.0
        self.n_seen_ = 0
        return self.partial_fit(X)

    def partial_fit(self, X, y=None):
        X = check_array(X, dtype=np.float32)
        self.config_ = self._config()
        state = bq.CalibrationState(getattr(self, "amax_", 0.0), getattr(self, "n_seen_", 0))
        state = bq.calibrate_update(state, X)
        self.amax_, self.n_seen_ = state.amax, state.samples_seen
        self.tensor_scale_ = bq.tensor_scale_from_amax(self.amax_, self.config_)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "tensor_scale_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return bq.fake_quantize(X, self.config_, self.tensor_scale_)

    def quantize(self, X) -> bq.QuantizedTensor:
        """Packed codes and scales for ``X``."""
        check_is_fitted(self, "tensor_scale_")
        X = check_array(X, dtype=np.float32)
        return bq.quantize_tensor(X, self.config_, self.tensor_scale_)

    def error_stats(self, X) -> bq.ErrorStats:
        X = check_array(X, dtype=np.float32)
        return bq.error_stats(X, self.transform(X), self.config_, self.tensor_scale_)

    def score(self, X, y=None) -> float:
        """SQNR in dB of the round trip (higher is better)."""
        return self.error_stats(X).sqnr_db


class QuantizationAwareDistiller(BaseEstimator):
    """Distill a frozen full-precision teacher into a fake-quantized copy of itself.

    ``X`` is an integer array of token windows ``(n, seq_len)``; each window
    supplies ``seq_len - 1`` next-token positions. ``predict_proba`` returns
    the student's next-token distribution at every position.
    """

    def __init__(
        self,
        teacher: ToyTransformer | None = None,
        fmt: str = "nvfp4",
        loss: str = "kl",
        learning_rate: float = 1e-4,
        steps: int = 200,
        batch_size: int = 32,
        temperature: float = 1.0,
        eval_every: int = 100,
        seed: int = 0,
        policy: QuantPolicy | None = None,
    ):
        self.teacher = teacher
        self.fmt = fmt
        self.loss = loss
        self.learning_rate = learning_rate
        self.steps = steps
        self.batch_size = batch_size
        self.temperature = temperature
        self.eval_every = eval_every
        self.seed = seed
        self.policy = policy

    def _windows(self, X) -> np.ndarray:
        X = check_array(X, dtype=np.int64)
        V = self.teacher.config.vocab_size
        if X.min() < 0 or X.max() >= V:
            raise ValueError(f"token id out of range [0, {V})")
        if X.shape[1] < 2 or X.shape[1] > self.teacher.config.max_seq_len + 1:
            raise ValueError("windows must have between 2 and max_seq_len + 1 tokens")
        return X

    def fit(self, X, y=None, X_val=None):
        if self.teacher is None:
            raise ValueError("a teacher model is required")
        X = self._windows(X)
        heldout = Dataset(self._windows(X_val), self.teacher.config.vocab_size, split="val") if X_val is not None else None
        data = Dataset(X, self.teacher.config.vocab_size)
        student = self.teacher.copy(policy=self.policy or QuantPolicy(), quant=bq.QuantConfig.from_name(self.fmt))
        cfg = TrainConfig(
            mode="qad",
            loss=self.loss,
            learning_rate=self.learning_rate,
            steps=self.steps,
            batch_size=self.batch_size,
            seq_len=X.shape[1] - 1,
            temperature=self.temperature,
            eval_every=self.eval_every,
            seed=self.seed,
        )
        best, report = train_qad(self.teacher, student, data, cfg, heldout=heldout)
        self.student_ = ToyTransformer.from_state_dict(student.config, best, student.policy, student.quant)
        self.report_ = report
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "student_")
        X = self._windows(X)
        return np.exp(_log_softmax64(self.student_.forward(X[:, :-1]).data))

    def predict(self, X) -> np.ndarray:
        """Greedy next-token prediction at every position."""
        return self.predict_proba(X).argmax(axis=-1)

    def score(self, X, y=None) -> float:
        """Negative held-out KL(teacher || student) per token (higher is better)."""
        check_is_fitted(self, "student_")
        X = self._windows(X)
        ev = evaluate(self.student_, self.teacher, Dataset(X, self.teacher.config.vocab_size, split="val"))
        return -ev["kl_vs_teacher"]
