"""Confusion matrices, per-class precision/recall/F1 and report rendering."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLASS_NAMES = ("A", "DC", "F", "LC", "MC", "PC", "PT", "TA")
AVERAGE_NOTE = "macro (unweighted mean over classes)"


@dataclass
class ConfusionMatrix:
    """counts[i, j] = number of samples with true class i predicted as j."""

    counts: np.ndarray
    class_names: tuple = CLASS_NAMES

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class ClassMetrics:
    class_names: tuple
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro: dict
    flags: dict = field(default_factory=dict)
    confusion: np.ndarray | None = None

    def row(self, name: str) -> dict:
        k = self.class_names.index(name)
        return {"precision": float(self.precision[k]), "recall": float(self.recall[k]),
                "f1": float(self.f1[k]), "support": int(self.support[k])}

    def to_dict(self) -> dict:
        return {
            "class_order": list(self.class_names),
            "classes": {
                name: {**self.row(name), "flags": list(self.flags.get(name, []))} for name in self.class_names
            },
            "macro": {k: float(v) for k, v in self.macro.items()},
            "average": AVERAGE_NOTE,
            "accuracy": float(self.accuracy),
            "confusion_matrix": self.confusion.tolist() if self.confusion is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassMetrics":
        names = tuple(d["class_order"])
        rows = [d["classes"][n] for n in names]
        cm = d.get("confusion_matrix")
        return cls(
            class_names=names,
            precision=np.array([r["precision"] for r in rows], dtype=np.float64),
            recall=np.array([r["recall"] for r in rows], dtype=np.float64),
            f1=np.array([r["f1"] for r in rows], dtype=np.float64),
            support=np.array([r["support"] for r in rows], dtype=np.int64),
            accuracy=float(d["accuracy"]),
            macro={k: float(v) for k, v in d["macro"].items()},
            flags={n: list(d["classes"][n].get("flags", [])) for n in names if d["classes"][n].get("flags")},
            confusion=np.array(cm, dtype=np.int64) if cm is not None else None,
        )


def confusion(true_labels, predicted_labels, k: int = 8, class_names: tuple | None = None) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(predicted_labels, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValueError(f"label length mismatch: {t.size} true vs {p.size} predicted")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} label out of range 0..{k - 1}")
    counts = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    if class_names is None:
        class_names = CLASS_NAMES if k == len(CLASS_NAMES) else tuple(str(i) for i in range(k))
    return ConfusionMatrix(counts, tuple(class_names))


def _ratio(num: float, den: float) -> tuple:
    return (num / den, False) if den > 0 else (0.0, True)


def compute_metrics(cm: ConfusionMatrix) -> ClassMetrics:
    """precision_k = tp/colsum, recall_k = tp/rowsum, f1 = 2PR/(P+R); 0 plus a flag on empty denominators."""
    counts = np.asarray(cm.counts, dtype=np.int64)
    total = counts.sum()
    if total == 0:
        raise ValueError("confusion matrix is empty")
    k = counts.shape[0]
    precision, recall, f1 = np.zeros(k), np.zeros(k), np.zeros(k)
    flags = {}
    for i, name in enumerate(cm.class_names):
        tp = int(counts[i, i])
        col, row = int(counts[:, i].sum()), int(counts[i, :].sum())
        precision[i], p_flag = _ratio(tp, col)
        recall[i], r_flag = _ratio(tp, row)
        f1[i], f_flag = _ratio(2 * precision[i] * recall[i], precision[i] + recall[i])
        notes = [msg for cond, msg in ((p_flag, "no predictions"), (r_flag, "zero support"),
                                       (f_flag and not (p_flag or r_flag), "precision+recall zero")) if cond]
        if notes:
            flags[name] = notes
    macro = {"precision": float(precision.mean()), "recall": float(recall.mean()), "f1": float(f1.mean())}
    return ClassMetrics(tuple(cm.class_names), precision, recall, f1, counts.sum(axis=1), float(np.trace(counts) / total),
                        macro, flags, counts.copy())


metrics = compute_metrics


def micro_averages(cm: ConfusionMatrix) -> dict:
    counts = np.asarray(cm.counts, dtype=np.int64)
    tp = np.trace(counts)
    return {"precision": tp / counts.sum(axis=0).sum(), "recall": tp / counts.sum(axis=1).sum(),
            "accuracy": tp / counts.sum()}


# ----------------------------------------------------------------- reports
def _render_text(m: ClassMetrics, title: str | None) -> str:
    width = max(5, max(len(n) for n in m.class_names), len("Macro avg"))
    lines = []
    if title:
        lines.append(title)
    header = f"{'Class':<{width}}  {'Precision':>9}  {'Recall':>9}  {'F1-Score':>9}  {'Support':>7}"
    lines += [header, "-" * len(header)]
    for i, name in enumerate(m.class_names):
        mark = " *" if name in m.flags else ""
        lines.append(f"{name:<{width}}  {m.precision[i]:>9.2f}  {m.recall[i]:>9.2f}  {m.f1[i]:>9.2f}  "
                     f"{int(m.support[i]):>7d}{mark}")
    lines.append("-" * len(header))
    lines.append(f"{'Macro avg':<{width}}  {m.macro['precision']:>9.2f}  {m.macro['recall']:>9.2f}  "
                 f"{m.macro['f1']:>9.2f}  {int(m.support.sum()):>7d}")
    lines.append(f"Accuracy: {m.accuracy:.2f}   (average = {AVERAGE_NOTE})")
    for name, notes in m.flags.items():
        lines.append(f"* {name}: {', '.join(notes)} (reported as 0)")
    if m.confusion is not None:
        lines.append("")
        lines.append("Confusion matrix (rows = true, columns = predicted)")
        cw = max(4, len(str(int(m.confusion.max()))) + 1)
        lines.append(" " * (width + 1) + "".join(f"{n:>{cw}}" for n in m.class_names))
        for name, row in zip(m.class_names, m.confusion):
            lines.append(f"{name:<{width}} " + "".join(f"{int(v):>{cw}d}" for v in row))
    return "\n".join(lines) + "\n"


def _render_csv(m: ClassMetrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "precision", "recall", "f1", "support"])
    for i, name in enumerate(m.class_names):
        w.writerow([name, f"{m.precision[i]:.2f}", f"{m.recall[i]:.2f}", f"{m.f1[i]:.2f}", int(m.support[i])])
    w.writerow(["macro", f"{m.macro['precision']:.2f}", f"{m.macro['recall']:.2f}", f"{m.macro['f1']:.2f}",
                int(m.support.sum())])
    return buf.getvalue()


def render_report(m: ClassMetrics, format: str = "text", title: str | None = None) -> str:
    """Render metrics as ``text`` (terminal grid), ``csv`` or ``json``.

    Text and CSV use two decimals; JSON keeps full precision and includes the
    confusion matrix.
    """
    if format == "text":
        return _render_text(m, title)
    if format == "csv":
        return _render_csv(m)
    if format == "json":
        d = m.to_dict()
        if title:
            d["title"] = title
        return json.dumps(d, indent=2) + "\n"
    raise ValueError(f"unknown report format {format!r}; choose text, csv or json")


def write_reports(m: ClassMetrics, out_dir, stem: str = "report", title: str | None = None) -> dict:
    out_dir = Path(out_dir)
    paths = {}
    for fmt, ext in (("text", "txt"), ("csv", "csv"), ("json", "json")):
        path = out_dir / f"{stem}.{ext}"
        path.write_text(render_report(m, fmt, title), encoding="utf-8")
        paths[fmt] = path
    return paths
