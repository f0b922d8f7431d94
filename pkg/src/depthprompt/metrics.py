"""Streaming confusion-matrix accumulation and segmentation metrics.

The confusion matrix is the sole input to every metric: entry ``(g, p)``
counts pixels whose ground truth is class ``g`` and prediction is class
``p``. Pixels whose ground truth equals the ignore index are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, UndefinedMetricError

IGNORE_INDEX = 255

# Metrics whose per-class denominator can be empty.
_PER_CLASS_METRICS = ("precision", "recall", "f1", "iou")


class ConfusionMatrix:
    """N x N integer counts, additive across batches and tiles."""

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise InputError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add(self, pred, gt) -> "ConfusionMatrix":
        """Accumulate one prediction/ground-truth mask pair."""
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise InputError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
        pred = pred.reshape(-1).astype(np.int64)
        gt = gt.reshape(-1).astype(np.int64)
        n = self.num_classes
        bad_gt = (gt != IGNORE_INDEX) & ((gt < 0) | (gt >= n))
        if bad_gt.any():
            raise InputError(f"ground truth contains class value {int(gt[bad_gt][0])} outside 0..{n - 1}")
        keep = gt != IGNORE_INDEX
        pred, gt = pred[keep], gt[keep]
        if ((pred < 0) | (pred >= n)).any():
            bad = pred[(pred < 0) | (pred >= n)][0]
            raise InputError(f"prediction contains class value {int(bad)} outside 0..{n - 1}")
        self.counts += np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise InputError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self

    @classmethod
    def from_counts(cls, counts) -> "ConfusionMatrix":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise InputError(f"counts must be square, got shape {counts.shape}")
        if (counts < 0).any():
            raise InputError("counts must be non-negative")
        cm = cls(counts.shape[0])
        cm.counts = counts.copy()
        return cm


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    """Add one mask pair into ``cm`` (pixels with gt == 255 are skipped)."""
    return cm.add(pred, gt)


@dataclass
class MetricReport:
    """Macro metrics plus per-class values derived from one confusion matrix.

    ``oa`` follows the macro form (1/N) sum (TP+TN)/total; the conventional
    trace/total figure is reported separately as ``pixel_accuracy``.
    Per-class entries with an empty denominator are 0 and listed in
    ``undefined`` under their metric name.
    """

    m_pre: float
    m_recall: float
    m_f1: float
    m_iou: float
    oa: float
    kappa: float
    pixel_accuracy: float
    per_class: dict[str, list[float]]
    undefined: dict[str, list[int]]
    num_classes: int
    total_pixels: int
    class_names: list[str] = field(default_factory=list)

    def macro(self) -> dict[str, float]:
        return {
            "mPre": self.m_pre,
            "mRecall": self.m_recall,
            "mF1": self.m_f1,
            "mIoU": self.m_iou,
            "OA": self.oa,
            "Kappa": self.kappa,
        }


def compute_report(cm: ConfusionMatrix, class_names=None) -> MetricReport:
    """Compute the six macro metrics and per-class values from ``cm``."""
    total = cm.total
    if total == 0:
        raise UndefinedMetricError("confusion matrix is empty")
    counts = cm.counts.astype(np.float64)
    n = cm.num_classes
    tp = np.diag(counts)
    fn = counts.sum(axis=1) - tp
    fp = counts.sum(axis=0) - tp
    tn = total - tp - fp - fn

    per_class: dict[str, list[float]] = {m: [] for m in _PER_CLASS_METRICS}
    undefined: dict[str, list[int]] = {m: [] for m in _PER_CLASS_METRICS}

    def ratio(metric, i, num, den):
        if den == 0:
            undefined[metric].append(i)
            per_class[metric].append(0.0)
        else:
            per_class[metric].append(float(num / den))

    for i in range(n):
        ratio("precision", i, tp[i], tp[i] + fp[i])
        ratio("recall", i, tp[i], tp[i] + fn[i])
        ratio("f1", i, 2 * tp[i], 2 * tp[i] + fp[i] + fn[i])
        ratio("iou", i, tp[i], tp[i] + fp[i] + fn[i])

    oa = float(np.mean((tp + tn) / total))
    pixel_accuracy = float(tp.sum() / total)

    # Cohen's kappa over the full matrix; p_e == 1 only when everything sits
    # in a single diagonal cell, which is perfect agreement.
    p_o = tp.sum() / total
    p_e = float((counts.sum(axis=1) * counts.sum(axis=0)).sum()) / (total * total)
    kappa = 1.0 if p_e == 1.0 else float((p_o - p_e) / (1.0 - p_e))

    names = list(class_names) if class_names else []
    if names and len(names) != n:
        raise InputError(f"got {len(names)} class names for {n} classes")

    return MetricReport(
        m_pre=float(np.mean(per_class["precision"])),
        m_recall=float(np.mean(per_class["recall"])),
        m_f1=float(np.mean(per_class["f1"])),
        m_iou=float(np.mean(per_class["iou"])),
        oa=oa,
        kappa=kappa,
        pixel_accuracy=pixel_accuracy,
        per_class=per_class,
        undefined=undefined,
        num_classes=n,
        total_pixels=total,
        class_names=names,
    )


def binary_kappa(tp: float, fn: float, fp: float, tn: float) -> float:
    """Closed-form two-class kappa: 2(TP*TN - FN*FP) / ((TP+FP)(FP+TN) + (TP+FN)(FN+TN))."""
    den = (tp + fp) * (fp + tn) + (tp + fn) * (fn + tn)
    if den == 0:
        return 1.0
    return 2.0 * (tp * tn - fn * fp) / den


def report_to_text(report: MetricReport) -> str:
    """Serialize a report as stable tab-separated key/value lines."""
    lines = [
        f"num_classes\t{report.num_classes}",
        f"total_pixels\t{report.total_pixels}",
    ]
    for key, value in report.macro().items():
        lines.append(f"{key}\t{value!r}")
    lines.append(f"pixel_accuracy\t{report.pixel_accuracy!r}")
    for i in range(report.num_classes):
        name = report.class_names[i] if report.class_names else str(i)
        lines.append(f"class.{i}.name\t{name}")
        for metric in _PER_CLASS_METRICS:
            lines.append(f"class.{i}.{metric}\t{report.per_class[metric][i]!r}")
        flagged = [m for m in _PER_CLASS_METRICS if i in report.undefined[m]]
        lines.append(f"class.{i}.undefined\t{','.join(flagged) if flagged else '-'}")
    return "\n".join(lines) + "\n"


def report_from_text(text: str) -> MetricReport:
    """Parse the output of :func:`report_to_text`."""
    kv: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("\t")
        kv[key] = value
    try:
        n = int(kv["num_classes"])
        per_class = {m: [float(kv[f"class.{i}.{m}"]) for i in range(n)] for m in _PER_CLASS_METRICS}
        undefined: dict[str, list[int]] = {m: [] for m in _PER_CLASS_METRICS}
        names = []
        for i in range(n):
            names.append(kv[f"class.{i}.name"])
            flagged = kv[f"class.{i}.undefined"]
            if flagged != "-":
                for m in flagged.split(","):
                    undefined[m].append(i)
        return MetricReport(
            m_pre=float(kv["mPre"]),
            m_recall=float(kv["mRecall"]),
            m_f1=float(kv["mF1"]),
            m_iou=float(kv["mIoU"]),
            oa=float(kv["OA"]),
            kappa=float(kv["Kappa"]),
            pixel_accuracy=float(kv["pixel_accuracy"]),
            per_class=per_class,
            undefined=undefined,
            num_classes=n,
            total_pixels=int(kv["total_pixels"]),
            class_names=names,
        )
    except KeyError as exc:
        raise InputError(f"metric report text is missing key {exc}") from exc
