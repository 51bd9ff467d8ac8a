"""Confusion-matrix evaluation: one-vs-rest precision/recall/F1 per class,
unweighted macro averages, and trace accuracy, plus JSON/CSV/SVG emitters.

Zero-denominator per-class values are defined as 0 and counted in the
report's ``zero_divisions`` field instead of raising, so absent rare classes
cannot crash an evaluation run.
"""

from __future__ import annotations

import csv
import io
import json
from typing import Optional, Sequence

import numpy as np

from .tensor import ContractError, ShapeError


def confusion(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> np.ndarray:
    """Tally a [K,K] count grid with rows = true class, cols = predicted."""
    t = np.asarray(y_true, dtype=np.int64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise ShapeError(f"label lists disagree in length: {t.size} vs {p.size}")
    if num_classes < 1:
        raise ContractError(f"need at least one class, got {num_classes}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for i in range(t.size):
        if not 0 <= t[i] < num_classes:
            raise ContractError(f"true label {t[i]} at index {i} outside [0,{num_classes})")
        if not 0 <= p[i] < num_classes:
            raise ContractError(f"predicted label {p[i]} at index {i} outside [0,{num_classes})")
        cm[t[i], p[i]] += 1
    return cm


def compute_metrics(cm: np.ndarray) -> dict:
    """One-vs-rest tallies from the count grid; macros are unweighted means."""
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 1:
        raise ShapeError(f"confusion matrix must be square and non-empty, got {cm.shape}")
    if np.any(cm < 0):
        raise ContractError("confusion matrix holds a negative count")
    total = int(cm.sum())
    if total == 0:
        raise ContractError("confusion matrix is all zeros; nothing was evaluated")
    k = cm.shape[0]
    per_class = []
    zero_divisions = 0
    for c in range(k):
        tp = int(cm[c, c])
        fp = int(cm[:, c].sum()) - tp
        fn = int(cm[c, :].sum()) - tp
        if tp + fp > 0:
            precision = tp / (tp + fp)
        else:
            precision, zero_divisions = 0.0, zero_divisions + 1
        if tp + fn > 0:
            recall = tp / (tp + fn)
        else:
            recall, zero_divisions = 0.0, zero_divisions + 1
        if precision + recall > 0:
            f1 = 2 * precision * recall / (precision + recall)
        else:
            f1, zero_divisions = 0.0, zero_divisions + 1
        per_class.append(
            {"precision": precision, "recall": recall, "f1": f1, "support": tp + fn}
        )
    return {
        "per_class": per_class,
        "macro_precision": sum(p["precision"] for p in per_class) / k,
        "macro_recall": sum(p["recall"] for p in per_class) / k,
        "macro_f1": sum(p["f1"] for p in per_class) / k,
        "accuracy": int(np.trace(cm)) / total,
        "zero_divisions": zero_divisions,
    }


def _names_for(k: int, class_names: Optional[Sequence[str]]) -> list:
    if class_names is None:
        return [f"class_{i}" for i in range(k)]
    names = list(class_names)
    if len(names) != k:
        raise ShapeError(f"{len(names)} class names for a {k}-class matrix")
    return names


def report_json(report: dict, class_names: Optional[Sequence[str]] = None) -> str:
    k = len(report["per_class"])
    names = _names_for(k, class_names)
    payload = dict(report)
    payload["per_class"] = [
        dict(entry, name=names[i]) for i, entry in enumerate(report["per_class"])
    ]
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def confusion_csv(cm: np.ndarray, class_names: Optional[Sequence[str]] = None) -> str:
    cm = np.asarray(cm)
    names = _names_for(cm.shape[0], class_names)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true_class"] + names)
    for i, name in enumerate(names):
        writer.writerow([name] + [int(v) for v in cm[i]])
    return buf.getvalue()


def confusion_svg(cm: np.ndarray, class_names: Optional[Sequence[str]] = None) -> str:
    """Heatmap with count labels; darker cells hold larger counts."""
    cm = np.asarray(cm)
    k = cm.shape[0]
    names = _names_for(k, class_names)
    cell, left, top = 34, 90, 70
    width, height = left + k * cell + 10, top + k * cell + 10
    peak = int(cm.max()) if cm.size else 0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="10">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left}" y="14" font-size="12">confusion matrix (rows = true)</text>',
    ]
    for j, name in enumerate(names):
        x = left + j * cell + cell // 2
        parts.append(
            f'<text x="{x}" y="{top - 6}" text-anchor="start" '
            f'transform="rotate(-45 {x} {top - 6})">{name}</text>'
        )
    for i in range(k):
        y = top + i * cell
        parts.append(
            f'<text x="{left - 6}" y="{y + cell // 2 + 4}" text-anchor="end">{names[i]}</text>'
        )
        for j in range(k):
            v = int(cm[i, j])
            frac = v / peak if peak > 0 else 0.0
            # white -> deep blue ramp
            r = round(247 - frac * (247 - 8))
            g = round(251 - frac * (251 - 48))
            b = round(255 - frac * (255 - 107))
            x = left + j * cell
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="rgb({r},{g},{b})" stroke="#ccc"/>'
            )
            text_fill = "white" if frac > 0.5 else "black"
            parts.append(
                f'<text x="{x + cell // 2}" y="{y + cell // 2 + 4}" '
                f'text-anchor="middle" fill="{text_fill}">{v}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
