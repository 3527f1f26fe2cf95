"""Distillation and task losses, QAD/QAT training loops and teacher-alignment evaluation.

Losses are registered tape operations with closed-form gradients with
respect to the student logits. Teacher logits never receive a gradient.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from nvqad.codec import NonFiniteError
from nvqad.data import Dataset, iterate_batches
from nvqad.engine import Adam, SGD
from nvqad.engine import tensor as T
from nvqad.engine.tensor import Tensor
from nvqad.model import ToyTransformer

__all__ = [
    "TrainConfig",
    "MetricsReport",
    "TrainingDiverged",
    "kl_loss",
    "ce_loss",
    "mse_logit_loss",
    "evaluate",
    "train",
    "train_qad",
    "train_qat",
    "train_teacher",
    "lr_sweep",
    "params_checksum",
]

log = logging.getLogger(__name__)

LR_GRID = (1e-4, 1e-5, 5e-6, 1e-6)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


@dataclass
class TrainConfig:
    mode: str = "qad"
    loss: str = "kl"
    learning_rate: float = 1e-4
    steps: int = 2000
    batch_size: int = 32
    seq_len: int = 64
    temperature: float = 1.0
    seed: int = 0
    optimizer: str = "adam"
    eval_every: int = 100
    warmup_steps: int = 0
    cosine_decay: bool = False
    min_lr_ratio: float = 0.1
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.mode not in ("qad", "qat", "pretrain"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.loss not in ("kl", "ce", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.mode in ("qat", "pretrain") and self.loss != "ce":
            raise ValueError(f"{self.mode} trains with cross-entropy; got loss={self.loss!r}")
        if self.mode == "qad" and self.loss == "ce":
            raise ValueError("qad uses a distillation loss (kl or mse)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1 or self.seq_len < 1:
            raise ValueError("steps >= 0, batch_size, eval_every and seq_len >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_at(self, step: int) -> float:
        """Learning rate for optimizer step ``step`` (1-based)."""
        lr = self.learning_rate
        if self.warmup_steps and step <= self.warmup_steps:
            return lr * step / self.warmup_steps
        if self.cosine_decay and self.steps > self.warmup_steps:
            frac = (step - self.warmup_steps) / (self.steps - self.warmup_steps)
            floor = lr * self.min_lr_ratio
            return floor + 0.5 * (lr - floor) * (1 + math.cos(math.pi * min(1.0, frac)))
        return lr


@dataclass
class MetricsReport:
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    train_losses: list = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.jsonl"), "w") as f:
            f.write(self.to_jsonl())
        with open(os.path.join(out_dir, "summary.json"), "w") as f:
            json.dump(self.summary, f, indent=2, sort_keys=True)
            f.write("\n")


# -- losses -------------------------------------------------------------------


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _mask_for(shape: tuple, mask) -> np.ndarray:
    if mask is None:
        m = np.ones(shape, dtype=np.float64)
    else:
        m = np.asarray(mask, dtype=np.float64)
        if m.shape != shape:
            raise ValueError(f"mask shape {m.shape} does not match positions {shape}")
    if m.sum() <= 0:
        raise ValueError("all positions are masked")
    return m


def _log_softmax64(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_loss(teacher_logits, student_logits, temperature: float = 1.0, mask=None) -> Tensor:
    """Forward KL ``D(p_teacher || p_student)`` averaged over unmasked positions.

    Both distributions are ``softmax(logits / temperature)``. Computed from
    log-softmax in float64; the gradient flows to the student logits only.
    """
    s = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    t = _as_array(teacher_logits)
    if t.shape != s.shape:
        raise ValueError(f"kl_loss: shape mismatch teacher {t.shape} vs student {s.shape}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    m = _mask_for(s.shape[:-1], mask)
    n = m.sum()
    lt = _log_softmax64(t / temperature)
    ls = _log_softmax64(s.data / temperature)
    pt = np.exp(lt)
    per_pos = (pt * (lt - ls)).sum(axis=-1)
    value = (per_pos * m).sum() / n

    def backward(g):
        grad = (np.exp(ls) - pt) * (m / (n * temperature))[..., None]
        return (np.asarray(g * grad, dtype=s.data.dtype),)

    return T.record(np.asarray(value, dtype=s.data.dtype), (s,), backward)


def ce_loss(logits, labels, mask=None) -> Tensor:
    """Mean next-token negative log-likelihood of ``labels`` over unmasked positions."""
    s = logits if isinstance(logits, Tensor) else Tensor(logits)
    y = np.asarray(labels)
    V = s.shape[-1]
    if y.shape != s.shape[:-1]:
        raise ValueError(f"ce_loss: labels shape {y.shape} vs logits {s.shape}")
    if y.size and (y.min() < 0 or y.max() >= V):
        raise ValueError(f"ce_loss: label out of range [0, {V})")
    m = _mask_for(y.shape, mask)
    n = m.sum()
    ls = _log_softmax64(s.data)
    picked = np.take_along_axis(ls, y[..., None], axis=-1)[..., 0]
    value = -(picked * m).sum() / n

    def backward(g):
        grad = np.exp(ls)
        np.put_along_axis(grad, y[..., None], np.take_along_axis(grad, y[..., None], -1) - 1.0, -1)
        grad *= (m / n)[..., None]
        return (np.asarray(g * grad, dtype=s.data.dtype),)

    return T.record(np.asarray(value, dtype=s.data.dtype), (s,), backward)


def mse_logit_loss(teacher_logits, student_logits, mask=None) -> Tensor:
    """Mean squared logit difference over unmasked positions and the vocabulary."""
    s = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    t = _as_array(teacher_logits)
    if t.shape != s.shape:
        raise ValueError(f"mse_logit_loss: shape mismatch {t.shape} vs {s.shape}")
    m = _mask_for(s.shape[:-1], mask)
    denom = m.sum() * s.shape[-1]
    diff = s.data.astype(np.float64) - t.astype(np.float64)
    value = ((diff * diff).sum(axis=-1) * m).sum() / denom

    def backward(g):
        grad = 2.0 * diff * (m / denom)[..., None]
        return (np.asarray(g * grad, dtype=s.data.dtype),)

    return T.record(np.asarray(value, dtype=s.data.dtype), (s,), backward)


# -- evaluation ---------------------------------------------------------------


def evaluate(student: ToyTransformer, teacher: ToyTransformer | None, heldout: Dataset, batch_size: int = 64, temperature: float = 1.0) -> dict:
    """Held-out cross-entropy vs labels and KL vs the teacher (per-token means).

    Runs without a tape. Batches are taken in dataset order so results are
    deterministic.
    """
    toks = heldout.tokens
    ce_sum = kl_sum = 0.0
    count = 0
    for start in range(0, len(toks), batch_size):
        batch = toks[start : start + batch_size]
        x, y = batch[:, :-1], batch[:, 1:]
        s_logits = student.forward(x).data
        ls = _log_softmax64(s_logits)
        ce_sum += -np.take_along_axis(ls, y[..., None], -1).sum()
        if teacher is not None:
            lt = _log_softmax64(teacher.forward(x).data / temperature)
            ls_t = ls if temperature == 1.0 else _log_softmax64(s_logits / temperature)
            kl_sum += (np.exp(lt) * (lt - ls_t)).sum()
        count += y.size
    ce = float(ce_sum / count)
    return {
        "ce_vs_labels": ce,
        "kl_vs_teacher": float(kl_sum / count) if teacher is not None else 0.0,
        "val_perplexity": float(math.exp(ce)),
    }


def params_checksum(model: ToyTransformer) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# -- training -----------------------------------------------------------------


def _round(x: float) -> float:
    # float32-derived metrics rounded to a stable, readable precision
    return float(f"{x:.9g}")


def train(
    student: ToyTransformer,
    data: Dataset,
    cfg: TrainConfig,
    teacher: ToyTransformer | None = None,
    heldout: Dataset | None = None,
    on_record: Callable[[dict], None] | None = None,
):
    """Shared loop for QAD, QAT and teacher pre-training.

    Returns ``(best_state, report)``: the state dict of the evaluation point
    with the lowest held-out KL (QAD) or CE (QAT / pretrain), and the metrics.
    Step 0 is always evaluated, so ``steps=0`` returns the starting weights.
    """
    if cfg.mode == "qad" and teacher is None:
        raise ValueError("QAD requires a teacher")
    if teacher is not None and teacher.config.vocab_size != student.config.vocab_size:
        raise ValueError(
            f"vocab mismatch: teacher {teacher.config.vocab_size} vs student {student.config.vocab_size}"
        )
    if data.vocab_size != student.config.vocab_size:
        raise ValueError(f"vocab mismatch: data {data.vocab_size} vs model {student.config.vocab_size}")
    heldout = heldout if heldout is not None else data
    if data.seq_len < cfg.seq_len + 1:
        raise ValueError(f"windows of {data.seq_len} tokens are too short for seq_len={cfg.seq_len}")
    if cfg.seq_len > student.config.max_seq_len:
        raise ValueError(f"seq_len={cfg.seq_len} exceeds the model context {student.config.max_seq_len}")
    if teacher is not None:
        teacher.freeze()
    params = student.parameters()
    for p in params:
        p.requires_grad = True
        p.grad = None
    opt_cls = Adam if cfg.optimizer == "adam" else SGD
    opt = opt_cls(params, cfg.learning_rate)
    batches = iterate_batches(data, cfg.batch_size, cfg.seed)
    select_key = "kl_vs_teacher" if cfg.mode == "qad" else "ce_vs_labels"

    report = MetricsReport()
    best_state = None
    best_val = math.inf
    loss_acc, loss_n = 0.0, 0

    def do_eval(step: int):
        nonlocal best_state, best_val, loss_acc, loss_n
        ev = evaluate(student, teacher, heldout, cfg.eval_batch_size, cfg.temperature)
        rec = {"step": step, **{k: _round(v) for k, v in ev.items()}}
        rec["train_loss"] = _round(loss_acc / loss_n) if loss_n else None
        rec["lr"] = cfg.lr_at(max(step, 1))
        rec["provenance"] = data.provenance
        loss_acc, loss_n = 0.0, 0
        report.records.append(rec)
        if on_record is not None:
            on_record(rec)
        log.info("step %d %s", step, {k: rec[k] for k in ("ce_vs_labels", "kl_vs_teacher", "train_loss")})
        if ev[select_key] < best_val:
            best_val = ev[select_key]
            best_state = student.state_dict()

    do_eval(0)
    for step in range(1, cfg.steps + 1):
        batch = next(batches)
        x, y = batch[:, : cfg.seq_len], batch[:, 1 : cfg.seq_len + 1]
        t_logits = teacher.forward(x) if cfg.mode == "qad" else None
        with T.Tape() as tape:
            try:
                s_logits = student.forward(x)
            except NonFiniteError as e:
                raise TrainingDiverged(step, math.nan) from e
            if cfg.loss == "kl":
                loss = kl_loss(t_logits, s_logits, cfg.temperature)
            elif cfg.loss == "mse":
                loss = mse_logit_loss(t_logits, s_logits)
            else:
                loss = ce_loss(s_logits, y)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        tape.backward(loss)
        opt.lr = cfg.lr_at(step)
        opt.step()
        opt.zero_grad()
        report.train_losses.append(value)
        loss_acc += value
        loss_n += 1
        if step % cfg.eval_every == 0 or step == cfg.steps:
            do_eval(step)

    first, last = report.records[0], report.records[-1]
    best = min(report.records, key=lambda r: r[select_key])
    report.summary = {
        "mode": cfg.mode,
        "loss": cfg.loss,
        "learning_rate": cfg.learning_rate,
        "steps": cfg.steps,
        "provenance": data.provenance,
        "start": first,
        "final": last,
        "best": best,
        "selected_by": select_key,
    }
    return best_state, report


def train_qad(teacher: ToyTransformer, student: ToyTransformer, data: Dataset, cfg: TrainConfig, heldout=None, on_record=None):
    """Quantization-aware distillation: fit the quantized student to the frozen teacher."""
    if cfg.mode != "qad":
        cfg = TrainConfig(**{**cfg.to_dict(), "mode": "qad", "loss": cfg.loss if cfg.loss != "ce" else "kl"})
    return train(student, data, cfg, teacher=teacher, heldout=heldout, on_record=on_record)


def train_qat(student: ToyTransformer, data: Dataset, cfg: TrainConfig, teacher=None, heldout=None, on_record=None):
    """Quantization-aware training with cross-entropy on the dataset labels.

    The teacher, if given, is only used to report held-out KL.
    """
    if cfg.mode != "qat":
        cfg = TrainConfig(**{**cfg.to_dict(), "mode": "qat", "loss": "ce"})
    return train(student, data, cfg, teacher=teacher, heldout=heldout, on_record=on_record)


def train_teacher(model: ToyTransformer, data: Dataset, cfg: TrainConfig, heldout=None, on_record=None):
    """Full-precision pre-training with cross-entropy (the teacher)."""
    if cfg.mode != "pretrain":
        cfg = TrainConfig(**{**cfg.to_dict(), "mode": "pretrain", "loss": "ce"})
    return train(model, data, cfg, heldout=heldout, on_record=on_record)


def lr_sweep(runner: Callable[[float], dict], lrs: Iterable[float]) -> list[dict]:
    """Run ``runner(lr)`` for each learning rate; rows sorted by ascending lr.

    ``runner`` returns a run summary (as produced by :func:`train`); each row
    keeps the learning rate plus the final and best held-out metrics.
    """
    rows = []
    for lr in sorted(set(float(x) for x in lrs)):
        summary = runner(lr)
        final = summary["final"]
        rows.append(
            {
                "learning_rate": lr,
                "kl_vs_teacher": final["kl_vs_teacher"],
                "ce_vs_labels": final["ce_vs_labels"],
                "best_kl_vs_teacher": summary["best"]["kl_vs_teacher"],
                "best_ce_vs_labels": summary["best"]["ce_vs_labels"],
            }
        )
    return rows
