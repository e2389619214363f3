"""Confusion matrices, per-class and macro precision/recall/F1, improvement tables."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

METRIC_NAMES = ("precision", "recall", "f1")


@dataclass(frozen=True)
class Metrics:
    confusion: np.ndarray
    per_class: np.ndarray  # (K, 3): precision, recall, f1
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float

    @property
    def macro(self) -> dict[str, float]:
        return {"precision": self.macro_precision, "recall": self.macro_recall, "f1": self.macro_f1}

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "per_class": [dict(zip(METRIC_NAMES, map(float, row))) for row in self.per_class],
            "macro": self.macro,
            "weighted": {
                "precision": self.weighted_precision,
                "recall": self.weighted_recall,
                "f1": self.weighted_f1,
            },
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Metrics":
        return precision_recall_f1(np.asarray(obj["confusion"], dtype=np.int64))


def confusion_matrix(truth: Sequence[int], predicted: Sequence[int], num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    truth = np.asarray(truth, dtype=np.int64).ravel()
    predicted = np.asarray(predicted, dtype=np.int64).ravel()
    if truth.shape != predicted.shape:
        raise ValueError(f"length mismatch: {truth.size} truths vs {predicted.size} predictions")
    for name, arr in (("truth", truth), ("predicted", predicted)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} label out of range [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (truth, predicted), 1)
    return counts


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def precision_recall_f1(confusion: np.ndarray) -> Metrics:
    """Per-class metrics with 0/0 treated as 0.

    Macro averages cover only classes that occur in the truth labels.
    """
    confusion = np.asarray(confusion, dtype=np.int64)
    diag = np.diag(confusion).astype(np.float64)
    rows = confusion.sum(axis=1).astype(np.float64)
    cols = confusion.sum(axis=0).astype(np.float64)
    precision = _safe_div(diag, cols)
    recall = _safe_div(diag, rows)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    per_class = np.stack([precision, recall, f1], axis=1)

    present = rows > 0
    if present.any():
        macro = per_class[present].mean(axis=0)
        weighted = (per_class * rows[:, None]).sum(axis=0) / rows.sum()
    else:
        macro = weighted = np.zeros(3)
    return Metrics(
        confusion=confusion,
        per_class=per_class,
        macro_precision=float(macro[0]),
        macro_recall=float(macro[1]),
        macro_f1=float(macro[2]),
        weighted_precision=float(weighted[0]),
        weighted_recall=float(weighted[1]),
        weighted_f1=float(weighted[2]),
    )


def mean_macro(metrics: Sequence[Metrics]) -> dict[str, float]:
    """Arithmetic mean of the macro scores over several evaluations."""
    if not metrics:
        raise ValueError("no metrics to average")
    return {name: float(np.mean([m.macro[name] for m in metrics])) for name in METRIC_NAMES}


def _as_macro(m: "Metrics | Mapping[str, float]") -> Mapping[str, float]:
    return m.macro if isinstance(m, Metrics) else m


def improvement_table(centralized: "Metrics | Mapping[str, float]",
                      federated: Mapping[str, "Metrics | Mapping[str, float]"],
                      mode: str = "points") -> dict[str, dict[str, float]]:
    """Gain of each federated strategy over the centralized baseline.

    ``mode="points"`` gives percentage points, ``100 * (fed - cen)``;
    ``mode="relative"`` gives percent of the baseline, ``100 * (fed - cen) / cen``
    (0 when the baseline is 0). Returns ``{strategy: {"precision", "recall", "f1"}}``
    unrounded; :func:`format_delta` renders two decimals.
    """
    if mode not in ("points", "relative"):
        raise ValueError(f"mode must be 'points' or 'relative', got {mode!r}")
    base = _as_macro(centralized)

    def delta(value: float, ref: float) -> float:
        if mode == "points":
            return 100.0 * (value - ref)
        return 100.0 * (value - ref) / ref if ref else 0.0

    return {
        strategy: {name: delta(_as_macro(m)[name], base[name]) for name in METRIC_NAMES}
        for strategy, m in federated.items()
    }


def format_delta(points: float) -> str:
    text = f"{points:+.2f}"
    return "+0.00" if text == "-0.00" else text


def format_percent(fraction: float) -> str:
    return f"{100.0 * fraction:.2f}%"


def _layout(headers: Sequence[str], body: Sequence[Sequence[str]]) -> str:
    widths = [max(len(r[i]) for r in [headers, *body]) + 2 for i in range(len(headers))]
    lines = ["".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip(), "-" * sum(widths)]
    lines += ["".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in body]
    return "\n".join(lines)


def render_results_table(rows: Sequence[dict], strategies: Sequence[str]) -> str:
    """Fixed-width table: dataset, hidden units, metric rows x (centralized + strategies).

    Each row dict carries ``dataset``, ``hidden_units``, ``centralized`` (macro dict)
    and ``federated`` ({strategy: macro dict}); missing cells render as ``-``.
    """
    headers = ["Dataset", "Hidden Units", "Metrics", "Centralized", *strategies]
    body = []
    for row in rows:
        for i, metric in enumerate(METRIC_NAMES):
            cells = [
                str(row["dataset"]) if i == 0 else "",
                str(row["hidden_units"]) if i == 0 else "",
                "F1" if metric == "f1" else metric.capitalize(),
                format_percent(row["centralized"][metric]) if row.get("centralized") else "-",
            ]
            for strategy in strategies:
                cell = row.get("federated", {}).get(strategy)
                cells.append(format_percent(cell[metric]) if cell else "-")
            body.append(cells)
    return _layout(headers, body)


def render_improvement_table(table: Mapping[str, Mapping[str, float]]) -> str:
    """Metric rows x strategy columns of signed two-decimal deltas."""
    strategies = list(table)
    body = [["F1" if m == "f1" else m.capitalize()] + [format_delta(table[s][m]) for s in strategies]
            for m in METRIC_NAMES]
    return _layout(["Metrics", *strategies], body)
