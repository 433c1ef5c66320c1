"""Confusion matrices, classification metrics, reports, and curve export.

Metrics follow the usual per-class definitions: precision TP/(TP+FP),
recall TP/(TP+FN), F1 the harmonic mean of the two, accuracy the trace
over the total. A zero denominator yields 0 and the class is flagged in
the report footnote. Summary rows are macro (unweighted) averages, and
weighted averages are available behind a flag.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import DatasetError


@dataclass
class ConfusionMatrix:
    """counts[true][predicted], true classes in rows."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(preds, labels, class_names) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise DatasetError(
            f"predictions {preds.shape} and labels {labels.shape} must be equal-length vectors"
        )
    c = len(class_names)
    if preds.size and (preds.min() < 0 or preds.max() >= c
                       or labels.min() < 0 or labels.max() >= c):
        raise DatasetError(f"class index out of range for {c} classes")
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts=counts, class_names=tuple(class_names))


@dataclass
class MetricsReport:
    class_names: tuple[str, ...]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    zero_division_classes: tuple[int, ...]


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise DatasetError("cannot compute metrics of an empty confusion matrix")
    tp = np.diag(counts)
    predicted = counts.sum(axis=0)
    actual = counts.sum(axis=1)

    flagged: list[int] = []
    c = len(cm.class_names)
    precision = np.zeros(c)
    recall = np.zeros(c)
    f1 = np.zeros(c)
    for k in range(c):
        degenerate = False
        if predicted[k] > 0:
            precision[k] = tp[k] / predicted[k]
        else:
            degenerate = True
        if actual[k] > 0:
            recall[k] = tp[k] / actual[k]
        else:
            degenerate = True
        if precision[k] + recall[k] > 0:
            f1[k] = 2.0 * precision[k] * recall[k] / (precision[k] + recall[k])
        else:
            degenerate = True
        if degenerate:
            flagged.append(k)

    weights = actual / total
    return MetricsReport(
        class_names=cm.class_names,
        precision=precision,
        recall=recall,
        f1=f1,
        support=actual.astype(np.int64),
        accuracy=float(tp.sum() / total),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        weighted_precision=float((precision * weights).sum()),
        weighted_recall=float((recall * weights).sum()),
        weighted_f1=float((f1 * weights).sum()),
        zero_division_classes=tuple(flagged),
    )


def classification_report(report: MetricsReport, weighted: bool = False) -> str:
    """Fixed-width table with percentages at two decimals."""
    name_w = max(12, max(len(n) for n in report.class_names) + 2)
    header = f"{'Class':<{name_w}}{'Precision':>11}{'Recall':>11}{'F1-score':>11}{'Support':>9}"
    lines = [header, "-" * len(header)]
    for k, name in enumerate(report.class_names):
        lines.append(
            f"{name:<{name_w}}{report.precision[k] * 100:>11.2f}"
            f"{report.recall[k] * 100:>11.2f}{report.f1[k] * 100:>11.2f}"
            f"{int(report.support[k]):>9d}"
        )
    lines.append("-" * len(header))
    avg_name = "Weighted avg" if weighted else "Macro avg"
    p, r, f = ((report.weighted_precision, report.weighted_recall, report.weighted_f1)
               if weighted else
               (report.macro_precision, report.macro_recall, report.macro_f1))
    lines.append(f"{avg_name:<{name_w}}{p * 100:>11.2f}{r * 100:>11.2f}{f * 100:>11.2f}"
                 f"{int(report.support.sum()):>9d}")
    lines.append(f"{'Accuracy':<{name_w}}{report.accuracy * 100:>11.2f}")
    if report.zero_division_classes:
        names = ", ".join(report.class_names[k] for k in report.zero_division_classes)
        lines.append(f"note: zero-denominator metrics reported as 0 for: {names}")
    return "\n".join(lines) + "\n"


def write_confusion_csv(cm: ConfusionMatrix, path: str) -> None:
    """Header row of predicted classes, then one row per true class."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred", *cm.class_names])
        for name, row in zip(cm.class_names, cm.counts):
            writer.writerow([name, *row.tolist()])


CURVE_COLUMNS = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc", "wall_time_s")


def export_curves(history, out_dir: str) -> list[str]:
    """Write curves.csv (one row per epoch); add PNG charts when matplotlib is present.

    The CSV is the contractual artifact; charts are best-effort.
    """
    if not history:
        raise DatasetError("cannot export an empty history")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "curves.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for row in history:
            epoch, tl, ta, vl, va, wall = row
            writer.writerow([epoch, f"{tl:.9g}", f"{vl:.9g}", f"{ta:.9g}", f"{va:.9g}",
                             f"{wall:.9g}"])
    written = [csv_path]
    written.extend(_plot_curves(history, out_dir))
    return written


def _plot_curves(history, out_dir: str) -> list[str]:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except Exception:
        return []
    epochs = [row[0] for row in history]
    paths = []
    for title, a_idx, b_idx, fname in (
        ("Accuracy", 2, 4, "accuracy_curve.png"),
        ("Loss", 1, 3, "loss_curve.png"),
    ):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(epochs, [row[a_idx] for row in history], label=f"train {title.lower()}")
        ax.plot(epochs, [row[b_idx] for row in history], label=f"validation {title.lower()}")
        ax.set_xlabel("epoch")
        ax.set_ylabel(title.lower())
        ax.set_title(f"Training and Validation {title}")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, fname)
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def read_curves_csv(path: str) -> list[tuple]:
    """Rebuild history rows (epoch, train_loss, train_acc, val_loss, val_acc, wall)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CURVE_COLUMNS:
            raise DatasetError(f"unexpected curves.csv header {header}")
        for row in reader:
            epoch, tl, vl, ta, va, wall = row
            rows.append((int(epoch), float(tl), float(ta), float(vl), float(va), float(wall)))
    return rows
