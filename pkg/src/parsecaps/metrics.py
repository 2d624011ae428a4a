"""Confusion-matrix metrics and the CSV row format shared by the harness."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricsReport:
    """Accuracy plus per-class precision/recall/specificity/F1 and their
    unweighted macro averages. ``flagged`` lists (class, metric) pairs whose
    denominator was zero and were reported as 0."""

    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    specificity: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_specificity: float
    macro_f1: float
    flagged: list = field(default_factory=list)


def confusion_matrix(predictions: np.ndarray, labels: np.ndarray,
                     n_class: int) -> np.ndarray:
    """counts[t, p] = number of samples of true class t predicted as p."""
    counts = np.zeros((n_class, n_class), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return counts


def metrics(predictions: np.ndarray, labels: np.ndarray,
            n_class: int) -> MetricsReport:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ValueError(
            f"predictions {predictions.shape} vs labels {labels.shape}")
    cm = confusion_matrix(predictions, labels, n_class)
    total = cm.sum()
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = total - tp - fp - fn
    flagged = []

    def safe_div(num, den, name):
        out = np.zeros(n_class)
        for k in range(n_class):
            if den[k] == 0:
                flagged.append((k, name))
            else:
                out[k] = num[k] / den[k]
        return out

    precision = safe_div(tp, tp + fp, "precision")
    recall = safe_div(tp, tp + fn, "recall")
    specificity = safe_div(tn, tn + fp, "specificity")
    f1 = safe_div(2 * precision * recall, precision + recall, "f1")
    return MetricsReport(
        accuracy=float(tp.sum() / total),
        precision=precision,
        recall=recall,
        specificity=specificity,
        f1=f1,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_specificity=float(specificity.mean()),
        macro_f1=float(f1.mean()),
        flagged=flagged,
    )


METRICS_CSV_HEADER = ("epoch,split,loss_total,loss_class,loss_presentation,"
                      "loss_triplet,loss_reconstruction,accuracy,"
                      "macro_precision,macro_recall,macro_f1,"
                      "macro_specificity,explanation_error")


def format_metrics_row(epoch: int, split: str, losses: dict,
                       report: "MetricsReport | None",
                       explanation_error: "float | None") -> str:
    """One byte-stable CSV row; absent values render as empty fields."""

    def num(x):
        return "" if x is None else f"{x:.6f}"

    fields = [str(epoch), split]
    fields += [num(losses.get(k)) for k in
               ("total", "class", "presentation", "triplet", "reconstruction")]
    if report is None:
        fields += ["", "", "", "", ""]
    else:
        fields += [num(report.accuracy), num(report.macro_precision),
                   num(report.macro_recall), num(report.macro_f1),
                   num(report.macro_specificity)]
    fields.append(num(explanation_error))
    return ",".join(fields)
