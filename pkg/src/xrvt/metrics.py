"""Confusion matrix, accuracy and per-class precision reports.

"Precision" follows the definition used for the implant benchmark: correct
predictions in a class divided by the number of samples *truly* in that
class (row-normalised diagonal; recall in the usual vocabulary).  The
column-normalised quantity is emitted alongside as ``per_class_precision_standard``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # counts[i, j]: true class i predicted as j
    class_names: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *self.class_names])
        for name, row in zip(self.class_names, self.counts):
            w.writerow([name, *(int(v) for v in row)])
        return buf.getvalue()


def confusion_matrix(preds, labels, num_classes: int, class_names=None) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise ContractError(f"{preds.size} predictions vs {labels.size} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ContractError(f"{name} index outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    names = list(class_names) if class_names is not None else [str(i) for i in range(num_classes)]
    return ConfusionMatrix(counts, names)


def _counts(cm) -> np.ndarray:
    return cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)


def accuracy(cm) -> float:
    m = _counts(cm)
    total = m.sum()
    if m.size == 0 or total == 0:
        raise ContractError("accuracy of an empty confusion matrix")
    return float(np.trace(m) / total)


def per_class_precision(cm):
    """Per-class diag / row-sum (None where the class never occurs) and its mean.

    Returns ``(components, macro)``; undefined components are excluded from
    the macro average.
    """
    m = _counts(cm)
    if m.sum() == 0:
        raise ContractError("precision of an empty confusion matrix")
    rows = m.sum(axis=1)
    comps = [float(m[i, i] / rows[i]) if rows[i] else None for i in range(m.shape[0])]
    defined = [c for c in comps if c is not None]
    return comps, float(np.mean(defined))


def standard_precision(cm) -> list:
    """Column-normalised precision (None for classes never predicted)."""
    m = _counts(cm)
    cols = m.sum(axis=0)
    return [float(m[i, i] / cols[i]) if cols[i] else None for i in range(m.shape[0])]


@dataclass
class EvalReport:
    accuracy: float
    per_class_precision_paper: list
    macro_precision: float
    weighted_precision: float
    per_class_precision_standard: list
    confusion: ConfusionMatrix
    n_samples: int

    @property
    def class_names(self) -> list[str]:
        return self.confusion.class_names

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class_precision_paper": self.per_class_precision_paper,
            "macro_precision": self.macro_precision,
            "weighted_precision": self.weighted_precision,
            "per_class_precision_standard": self.per_class_precision_standard,
            "class_names": list(self.class_names),
            "confusion": self.confusion.counts.tolist(),
            "n_samples": self.n_samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        try:
            cm = ConfusionMatrix(np.array(d["confusion"], dtype=np.int64), list(d["class_names"]))
            return cls(d["accuracy"], d["per_class_precision_paper"], d["macro_precision"],
                       d["weighted_precision"], d["per_class_precision_standard"], cm, d["n_samples"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed report: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def to_text(self) -> str:
        def fmt(v):
            return "   n/a" if v is None else f"{v:6.4f}"

        width = max([len("class"), *(len(n) for n in self.class_names)])
        lines = [f"{'class':<{width}}  support  precision  std-precision"]
        support = self.confusion.counts.sum(axis=1)
        for name, n, p, s in zip(self.class_names, support, self.per_class_precision_paper,
                                 self.per_class_precision_standard):
            lines.append(f"{name:<{width}}  {int(n):7d}  {fmt(p):>9}  {fmt(s):>13}")
        lines += [
            "",
            f"samples            {self.n_samples}",
            f"accuracy           {self.accuracy:.4f}",
            f"precision (macro)  {self.macro_precision:.4f}",
            f"precision (weight) {self.weighted_precision:.4f}",
            "",
            "confusion (rows = true, cols = predicted)",
        ]
        cw = max(6, *(len(n) for n in self.class_names))
        lines.append(" " * (width + 2) + " ".join(f"{n:>{cw}}" for n in self.class_names))
        for name, row in zip(self.class_names, self.confusion.counts):
            lines.append(f"{name:<{width}}  " + " ".join(f"{int(v):>{cw}}" for v in row))
        return "\n".join(lines) + "\n"


def report(preds, labels, class_names) -> EvalReport:
    cm = confusion_matrix(preds, labels, len(class_names), class_names)
    comps, macro = per_class_precision(cm)
    rows = cm.counts.sum(axis=1)
    weighted = float(sum(c * r for c, r in zip(comps, rows) if c is not None) / rows.sum())
    return EvalReport(
        accuracy=accuracy(cm),
        per_class_precision_paper=comps,
        macro_precision=macro,
        weighted_precision=weighted,
        per_class_precision_standard=standard_precision(cm),
        confusion=cm,
        n_samples=cm.total,
    )
