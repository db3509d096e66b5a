"""Training and evaluation loops."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from ..errors import NumericalError
from ..metrics import compute_metrics, confusion
from ..multinet import FusedModel
from ..nn import functional as F
from ..tensor import Tensor, no_grad
from .checkpoint import save_checkpoint
from .losses import DistillMode, cross_entropy, distillation_loss, one_hot
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0
    loss_form: str = "categorical"
    distillation: str = "off"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.loss_form not in ("categorical", "eq3-literal"):
            raise ValueError(f"unknown loss form {self.loss_form!r}")
        DistillMode.parse(self.distillation)

    @property
    def distill(self) -> DistillMode:
        return DistillMode.parse(self.distillation)

    def to_dict(self) -> dict:
        return asdict(self)


def seed_streams(seed: int) -> tuple:
    """Independent generators for (parameter init, shuffling, dropout)."""
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))


# ------------------------------------------------------------------ losses
def _is_distilled(module) -> bool:
    cfg = getattr(module, "cfg", None)
    return bool(getattr(cfg, "distilled", False))


def model_loss(model, out: dict, target: Tensor, cfg: TrainConfig, teacher_logits=None) -> Tensor:
    """Training objective for any supported architecture.

    Single branch: CE on the logits; a DeiT branch trains both heads (against
    labels, or against the teacher when distillation is on).  Fused pair: CE
    on the fused logits; with distillation on and a DeiT branch present, the
    other branch acts as teacher and also gets its own CE term.
    """
    form, mode = cfg.loss_form, cfg.distill
    if isinstance(model, FusedModel):
        loss = cross_entropy(out["logits"], target, form)
        if mode.kind == "off":
            return loss
        outs = [(model.branch_a, out["branch_a"]), (model.branch_b, out["branch_b"])]
        for i, (branch, bout) in enumerate(outs):
            if _is_distilled(branch):
                other = outs[1 - i][1]
                teacher = other["logits"].detach()
                loss = loss + distillation_loss(bout, target, teacher, mode, form)
                loss = loss + cross_entropy(other["logits"], target, form)
                return loss
        return loss
    if _is_distilled(model):
        if mode.kind == "off" or teacher_logits is None:
            if mode.kind != "off":
                raise ValueError("distillation for a standalone DeiT needs a teacher model")
            return cross_entropy(out["class_logits"], target, form) + cross_entropy(out["distill_logits"], target, form)
        return distillation_loss(out, target, teacher_logits, mode, form)
    return cross_entropy(out["logits"], target, form)


def predict_proba(out: dict) -> np.ndarray:
    if "combined" in out:
        return out["combined"]
    return F.softmax_np(out["logits"].data)


# --------------------------------------------------------------- evaluation
@dataclass
class EvalResult:
    loss: float
    accuracy: float
    predictions: np.ndarray
    labels: np.ndarray
    macro_f1: float


def evaluate(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 8, loss_form: str = "categorical",
             num_classes: int = 8, teacher: Optional[Callable] = None) -> EvalResult:
    """Eval-mode pass: mean loss, accuracy and predictions over the whole split."""
    if len(images) == 0:
        raise ValueError("cannot evaluate an empty split")
    cfg = TrainConfig(loss_form=loss_form, batch_size=batch_size)
    was_training = model.training
    model.eval()
    total, preds = 0.0, []
    dtype = model.parameters()[0].dtype
    try:
        with no_grad():
            for lo in range(0, len(images), batch_size):
                xb = Tensor(images[lo:lo + batch_size].astype(dtype, copy=False))
                yb = one_hot(labels[lo:lo + batch_size], num_classes, dtype=dtype)
                out = model(xb)
                loss = model_loss(model, out, yb, cfg)
                total += float(loss.data) * len(xb)
                preds.append(predict_proba(out).argmax(axis=1))
    finally:
        model.train(was_training)
    predictions = np.concatenate(preds)
    cm = confusion(labels, predictions, num_classes)
    metrics = compute_metrics(cm)
    return EvalResult(total / len(images), float(np.mean(predictions == labels)), predictions,
                      np.asarray(labels), metrics.macro["f1"])


# ------------------------------------------------------------------ training
@dataclass
class TrainResult:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = float("-inf")
    best_state: dict | None = None
    epochs_run: int = 0

    def losses(self, split: str = "train") -> list:
        return [r["loss"] for r in self.records if r["split"] == split]


def train(model, train_images: np.ndarray, train_labels: np.ndarray, cfg: TrainConfig,
          val_images: np.ndarray | None = None, val_labels: np.ndarray | None = None,
          log_path=None, checkpoint_path=None, teacher: Optional[Callable] = None,
          on_epoch_end: Optional[Callable] = None, num_classes: int = 8,
          checkpoint_config: dict | None = None, max_steps: int | None = None) -> TrainResult:
    """Mini-batch Adam training.

    Deterministic given (initial parameters, data order, ``cfg.seed``): the
    shuffle order and dropout masks come from generators seeded by
    ``cfg.seed``.  After every epoch the model is evaluated on the validation
    split (if any) and the state with the best macro-F1 is kept and, when
    ``checkpoint_path`` is set, written to disk.  ``on_epoch_end(epoch, model)``
    may return True to stop early.
    """
    n = len(train_images)
    if n == 0:
        raise ValueError("training split is empty")
    has_val = val_images is not None and len(val_images) > 0
    _, shuffle_rng, dropout_rng = seed_streams(cfg.seed)
    model.set_rng(dropout_rng)
    model.train()
    optimizer = Adam(model.named_parameters(), cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.eps)
    dtype = model.parameters()[0].dtype
    result = TrainResult()
    log_file = open(log_path, "w", encoding="utf-8") if log_path is not None else None

    def emit(record):
        result.records.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()

    def keep_best(epoch, metric):
        if metric > result.best_metric:
            result.best_metric, result.best_epoch = metric, epoch
            result.best_state = model.state_dict()
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, optimizer, config=checkpoint_config,
                                extra={"epoch": epoch, "val_macro_f1": metric})

    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = shuffle_rng.permutation(n)
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                xb = Tensor(train_images[idx].astype(dtype, copy=False))
                yb = one_hot(train_labels[idx], num_classes, dtype=dtype)
                teacher_logits = teacher(xb) if teacher is not None else None
                out = model(xb)
                loss = model_loss(model, out, yb, cfg, teacher_logits)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NumericalError(f"non-finite loss {value} at epoch {epoch}, step {step}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                acc = float(np.mean(predict_proba(out).argmax(axis=1) == train_labels[idx]))
                emit({"epoch": epoch, "step": step, "split": "train", "loss": value, "accuracy": acc})
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            result.epochs_run = epoch + 1
            if has_val:
                ev = evaluate(model, val_images, val_labels, cfg.batch_size, cfg.loss_form, num_classes)
                emit({"epoch": epoch, "step": step, "split": "val", "loss": ev.loss, "accuracy": ev.accuracy,
                      "macro_f1": ev.macro_f1})
                keep_best(epoch, ev.macro_f1)
            if max_steps is not None and step >= max_steps:
                break
            if on_epoch_end is not None and on_epoch_end(epoch, model):
                break
        if not has_val:
            # no validation data: the final state is the one kept
            keep_best(result.epochs_run - 1, 0.0)
    finally:
        if log_file is not None:
            log_file.close()
    model.train()
    return result
