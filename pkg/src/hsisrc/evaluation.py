"""Confusion matrix and the standard accuracy metrics (OA, AA, Cohen's kappa)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LabelMap


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """K x K counts (rows = truth, cols = prediction).

    Unpredicted test pixels (prediction 0, i.e. solver rejections) are kept
    in a separate per-truth-class tally and excluded from the K x K counts.
    """

    counts: np.ndarray
    rejections: np.ndarray
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        rej = np.asarray(self.rejections, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError("counts must be a square matrix")
        if rej.shape != (counts.shape[0],):
            raise ValueError("need one rejection tally per class")
        if counts.min(initial=0) < 0 or rej.min(initial=0) < 0:
            raise ValueError("counts must be nonnegative")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "rejections", rej)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.n_classes != other.n_classes:
            raise ValueError("cannot merge matrices of different sizes")
        return ConfusionMatrix(
            self.counts + other.counts,
            self.rejections + other.rejections,
            self.class_names or other.class_names,
        )


@dataclass(frozen=True)
class Metrics:
    """Percent accuracies plus Cohen's kappa; per_class holds NaN for classes
    without test pixels (excluded from AA)."""

    oa: float
    aa: float
    kappa: float
    per_class: np.ndarray


def confusion_matrix(truth: LabelMap, predicted: LabelMap, test_pixels) -> ConfusionMatrix:
    """Tally truth vs prediction over the test pixels."""
    if (truth.height, truth.width) != (predicted.height, predicted.width):
        raise ValueError(
            f"map sizes differ: {truth.height}x{truth.width} "
            f"vs {predicted.height}x{predicted.width}"
        )
    k = truth.n_classes
    counts = np.zeros((k, k), dtype=np.int64)
    rejections = np.zeros(k, dtype=np.int64)
    for item in test_pixels:
        (row, col) = item[0] if isinstance(item[0], tuple) else item
        t = int(truth.labels[row, col])
        if t == 0:
            raise ValueError(f"test pixel {(row, col)} has no ground-truth label")
        p = int(predicted.labels[row, col])
        if p == 0:
            rejections[t - 1] += 1
        else:
            counts[t - 1, p - 1] += 1
    return ConfusionMatrix(counts, rejections)


def metrics(cm: ConfusionMatrix) -> Metrics:
    """OA = trace/total, AA = mean of defined per-class accuracies, and
    Cohen's kappa (p_o - p_e) / (1 - p_e) with chance agreement from the
    row/column marginals."""
    total = cm.total
    if total < 1:
        raise ValueError("confusion matrix is empty")
    counts = cm.counts.astype(np.float64)
    row_sums = counts.sum(axis=1)
    col_sums = counts.sum(axis=0)
    p_o = float(np.trace(counts)) / total
    per_class = np.full(cm.n_classes, np.nan)
    defined = row_sums > 0
    per_class[defined] = 100.0 * np.diag(counts)[defined] / row_sums[defined]
    p_e = float(np.sum(row_sums * col_sums)) / (total * total)
    kappa = 1.0 if p_e >= 1.0 else (p_o - p_e) / (1.0 - p_e)
    return Metrics(
        oa=100.0 * p_o,
        aa=float(np.nanmean(per_class)),
        kappa=float(kappa),
        per_class=per_class,
    )


def format_metrics_table(m: Metrics, class_names=None) -> str:
    """Flat text table: one per-class accuracy row, then OA / AA / kappa."""
    lines = [f"{'Class':<10}{'Accuracy[%]':>12}"]
    for g, acc in enumerate(m.per_class, start=1):
        name = class_names[g - 1] if class_names else str(g)
        value = "n/a" if np.isnan(acc) else f"{acc:.2f}"
        lines.append(f"{name:<10}{value:>12}")
    lines.append(f"{'OA[%]':<10}{m.oa:>12.2f}")
    lines.append(f"{'AA[%]':<10}{m.aa:>12.2f}")
    lines.append(f"{'kappa':<10}{m.kappa:>12.3f}")
    return "\n".join(lines) + "\n"


def format_metrics_kv(m: Metrics) -> str:
    """Machine-readable key = value lines with full float precision."""
    lines = [f"oa = {m.oa!r}", f"aa = {m.aa!r}", f"kappa = {m.kappa!r}"]
    for g, acc in enumerate(m.per_class, start=1):
        lines.append(f"class_{g} = {'nan' if np.isnan(acc) else repr(acc)}")
    return "\n".join(lines) + "\n"


def parse_metrics_kv(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = float(value.strip())
    return out


def format_confusion(cm: ConfusionMatrix) -> str:
    """Counts as text: one row per truth class, rejections as a final column."""
    width = max(6, len(str(int(cm.counts.max(initial=0)))) + 2)
    header = "truth\\pred" + "".join(f"{g:>{width}}" for g in range(1, cm.n_classes + 1))
    lines = [header + f"{'rej':>{width}}"]
    for g in range(cm.n_classes):
        row = "".join(f"{int(v):>{width}}" for v in cm.counts[g])
        lines.append(f"{g + 1:<10}" + row + f"{int(cm.rejections[g]):>{width}}")
    return "\n".join(lines) + "\n"
