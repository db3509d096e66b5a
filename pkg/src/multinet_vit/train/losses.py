"""Classification and distillation losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..nn import functional as F
from ..tensor import ShapeError, Tensor

CLAMP_LO = 1e-12
CLAMP_HI = 1.0 - 1e-12
LOSS_FORMS = ("categorical", "eq3-literal")


def one_hot(labels, num_classes: int, dtype=None) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in 0..{num_classes - 1}")
    out = np.zeros((labels.size, num_classes), dtype=dtype or T.get_default_dtype())
    out[np.arange(labels.size), labels] = 1
    return Tensor(out)


def _check_target(logits: Tensor, target: Tensor) -> None:
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (B,K), got {logits.shape}")
    if target.shape != logits.shape:
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    if logits.shape[1] < 2:
        raise ValueError("need at least two classes")
    t = target.data
    if not (np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=1) == 1)):
        raise ValueError("target must be one-hot: every row a single 1 and zeros elsewhere")


def cross_entropy(logits: Tensor, target: Tensor, form: str = "categorical") -> Tensor:
    """Mean-over-batch cross-entropy on softmax(logits).

    ``categorical``: -sum_i y_i log p_i, with log p taken from a stable log-softmax.
    ``eq3-literal``: -sum_i [y_i log p_i + (1 - y_i) log(1 - p_i)], the
    per-class binary form; p is clamped to [1e-12, 1 - 1e-12] before the logs.
    """
    _check_target(logits, target)
    y = target.astype(logits.dtype)
    if form == "categorical":
        per_sample = -(y * F.log_softmax(logits, axis=-1)).sum(axis=-1)
    elif form == "eq3-literal":
        p = T.clip(F.softmax(logits, axis=-1), CLAMP_LO, CLAMP_HI)
        per_sample = -(y * T.log(p) + (1.0 - y) * T.log(1.0 - p)).sum(axis=-1)
    else:
        raise ValueError(f"unknown loss form {form!r}; choose from {LOSS_FORMS}")
    return per_sample.mean()


def kl_soft(teacher_logits: Tensor | np.ndarray, student_logits: Tensor, temperature: float) -> Tensor:
    """Mean over batch of KL(softmax(teacher/tau) || softmax(student/tau)); teacher is constant."""
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    log_pt = F.log_softmax_np(t.astype(student_logits.dtype) / temperature)
    pt = np.exp(log_pt)
    log_ps = F.log_softmax(student_logits * (1.0 / temperature), axis=-1)
    per_sample = (Tensor(pt * log_pt).sum(axis=-1) - (Tensor(pt) * log_ps).sum(axis=-1))
    return per_sample.mean()


@dataclass(frozen=True)
class DistillMode:
    kind: str = "off"  # off | hard | soft
    temperature: float = 1.0

    @classmethod
    def parse(cls, text: str) -> "DistillMode":
        text = (text or "off").strip().lower()
        if text in ("off", "hard", "soft"):
            return cls(text, 1.0 if text != "soft" else 3.0)
        if text.startswith("soft:") or text.startswith("soft(") and text.endswith(")"):
            raw = text[5:].rstrip(")")
            try:
                tau = float(raw)
            except ValueError:
                raise ValueError(f"bad distillation temperature in {text!r}") from None
            if tau <= 0:
                raise ValueError("distillation temperature must be positive")
            return cls("soft", tau)
        raise ValueError(f"distill must be off, hard, or soft:<temperature>, got {text!r}")

    def __str__(self) -> str:
        return f"soft:{self.temperature:g}" if self.kind == "soft" else self.kind


def distillation_loss(student: dict, target: Tensor, teacher_logits: Tensor | np.ndarray | None,
                      mode: DistillMode | str = "hard", form: str = "categorical") -> Tensor:
    """Class head learns from labels, distillation head from the teacher.

    hard: CE(class, y) + CE(distill, onehot(argmax teacher)).
    soft: CE(class, y) + tau^2 * KL(softmax(teacher/tau) || softmax(distill/tau)).
    """
    if isinstance(mode, str):
        mode = DistillMode.parse(mode)
    if mode.kind == "off":
        raise ValueError("distillation_loss called with distillation off")
    if teacher_logits is None:
        raise ValueError("distillation needs teacher logits")
    class_logits, distill_logits = student["class_logits"], student["distill_logits"]
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t.shape != class_logits.shape:
        raise ShapeError(f"teacher_logits shape {t.shape} != student logits {class_logits.shape}")
    loss = cross_entropy(class_logits, target, form)
    if mode.kind == "hard":
        teacher_target = one_hot(t.argmax(axis=1), t.shape[1], dtype=class_logits.dtype)
        return loss + cross_entropy(distill_logits, teacher_target, form)
    tau = mode.temperature
    return loss + kl_soft(t, distill_logits, tau) * (tau * tau)
