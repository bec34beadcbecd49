"""Binary-classification evaluation built from first principles.

Confusion counts, accuracy/precision/recall/F1, threshold-swept ROC with
trapezoidal AUC, and side-by-side arm comparisons. No sklearn.metrics here:
every number is recomputable by hand, and the AUC is tested against the
pairwise ranking statistic which it must equal exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

ARM_REAL = "RealData"
ARM_AUGMENTED = "AugmentedData"
METRIC_FIELDS = ("accuracy", "precision", "recall", "f1", "roc_auc")


def classify_scores(scores, threshold: float):
    """Inclusive decision rule: score >= threshold predicts defective (1)."""
    return [1 if s >= threshold else 0 for s in scores]


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"{name} must be a nonnegative integer, got {v!r}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


@dataclass(frozen=True)
class RocCurve:
    thresholds: tuple  # strictly descending, leading +inf
    points: tuple      # (fpr, tpr) pairs, same length

    def __post_init__(self):
        if len(self.thresholds) != len(self.points):
            raise ValueError("thresholds and points must align")
        if len(self.points) < 2:
            raise ValueError("a curve needs at least the two endpoint points")
        for a, b in zip(self.thresholds, self.thresholds[1:]):
            if not b < a:
                raise ValueError("thresholds must be strictly descending")
        for (f0, t0), (f1, t1) in zip(self.points, self.points[1:]):
            if f1 < f0 or t1 < t0:
                raise ValueError("FPR and TPR must be non-decreasing along the sweep")
        if self.points[0] != (0.0, 0.0) or self.points[-1] != (1.0, 1.0):
            raise ValueError("curve must span (0,0) to (1,1)")

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "fpr", "tpr"])
            for thr, (fpr, tpr) in zip(self.thresholds, self.points):
                writer.writerow([thr, fpr, tpr])
        return path


def _validate_scores_labels(scores, labels):
    if len(scores) != len(labels):
        raise ValueError(f"length mismatch: {len(scores)} scores vs {len(labels)} labels")
    if len(scores) == 0:
        raise ValueError("empty input")
    for y in labels:
        if y not in (0, 1):
            raise ValueError(f"labels must be 0 or 1, got {y!r}")


def confusion(scores, labels, threshold: float) -> ConfusionMatrix:
    """Count tp/fp/tn/fn under the inclusive-threshold rule."""
    _validate_scores_labels(scores, labels)
    tp = fp = tn = fn = 0
    for s, y in zip(scores, labels):
        pred = 1 if s >= threshold else 0
        if pred == 1 and y == 1:
            tp += 1
        elif pred == 1 and y == 0:
            fp += 1
        elif pred == 0 and y == 0:
            tn += 1
        else:
            fn += 1
    return ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)


def accuracy(cm: ConfusionMatrix) -> float:
    return (cm.tp + cm.tn) / cm.total


def precision(cm: ConfusionMatrix) -> float:
    denom = cm.tp + cm.fp
    return cm.tp / denom if denom else 0.0


def recall(cm: ConfusionMatrix) -> float:
    denom = cm.tp + cm.fn
    return cm.tp / denom if denom else 0.0


def f1_from_precision_recall(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if (p + r) else 0.0


def f1(cm: ConfusionMatrix) -> float:
    return f1_from_precision_recall(precision(cm), recall(cm))


def build_roc_curve(scores, labels) -> RocCurve:
    """Threshold sweep over the distinct scores, ties grouped into one step.

    Grouping equal scores into a single threshold makes the trapezoidal area
    equal the pairwise statistic P(s+ > s-) + 0.5 P(tie) exactly.
    """
    _validate_scores_labels(scores, labels)
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC requires both classes present")

    pairs = sorted(zip(scores, labels), key=lambda p: -p[0])
    thresholds = [math.inf]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(pairs):
        thr = pairs[i][0]
        while i < len(pairs) and pairs[i][0] == thr:
            if pairs[i][1] == 1:
                tp += 1
            else:
                fp += 1
            i += 1
        thresholds.append(thr)
        points.append((fp / n_neg, tp / n_pos))
    return RocCurve(thresholds=tuple(thresholds), points=tuple(points))


def roc_auc(scores, labels) -> float:
    """Trapezoidal area under the tie-grouped empirical ROC."""
    curve = build_roc_curve(scores, labels)
    area = 0.0
    for (f0, t0), (f1_, t1) in zip(curve.points, curve.points[1:]):
        area += (f1_ - f0) * (t0 + t1) / 2.0
    return area


@dataclass(frozen=True)
class EvalReport:
    arm: str
    backbone: str
    confusion: ConfusionMatrix
    accuracy: float
    precision: float
    recall: float
    f1: float
    roc_auc: float

    def __post_init__(self):
        if self.arm not in (ARM_REAL, ARM_AUGMENTED):
            raise ValueError(f"arm must be {ARM_REAL!r} or {ARM_AUGMENTED!r}, got {self.arm!r}")
        if not self.backbone:
            raise ValueError("backbone must be a nonempty name")
        for name in METRIC_FIELDS:
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0,1], got {v}")

    def verify_consistency(self, tol: float = 1e-12) -> None:
        """Check the stored metrics against their confusion-matrix formulas."""
        expected = {
            "accuracy": accuracy(self.confusion),
            "precision": precision(self.confusion),
            "recall": recall(self.confusion),
            "f1": f1(self.confusion),
        }
        for name, want in expected.items():
            got = getattr(self, name)
            if abs(got - want) > tol:
                raise ValueError(f"{name}={got} inconsistent with confusion matrix ({want})")

    def to_dict(self) -> dict:
        return {
            "arm": self.arm,
            "backbone": self.backbone,
            "confusion": self.confusion.to_dict(),
            **{name: getattr(self, name) for name in METRIC_FIELDS},
        }


def evaluate_scores(scores, labels, threshold: float, arm: str, backbone: str) -> EvalReport:
    """Full report for one (arm, backbone) run; metrics stored at full precision."""
    cm = confusion(scores, labels, threshold)
    report = EvalReport(
        arm=arm,
        backbone=backbone,
        confusion=cm,
        accuracy=accuracy(cm),
        precision=precision(cm),
        recall=recall(cm),
        f1=f1(cm),
        roc_auc=roc_auc(scores, labels),
    )
    report.verify_consistency()
    return report


@dataclass(frozen=True)
class ArmComparison:
    backbone: str
    real: EvalReport
    augmented: EvalReport
    deltas: dict
    regressions: tuple  # precision/recall metrics the augmented arm made worse

    def to_markdown(self) -> str:
        lines = [
            f"## {self.backbone}: {ARM_REAL} vs {ARM_AUGMENTED}",
            "",
            "| Metric | RealData | AugmentedData | Delta |",
            "| --- | --- | --- | --- |",
        ]
        for name in METRIC_FIELDS:
            flag = " (regression)" if name in self.regressions else ""
            lines.append(
                f"| {name} | {getattr(self.real, name):.4f} "
                f"| {getattr(self.augmented, name):.4f} "
                f"| {self.deltas[name]:+.4f}{flag} |"
            )
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "real", "augmented", "delta", "regression"])
            for name in METRIC_FIELDS:
                writer.writerow([
                    name,
                    getattr(self.real, name),
                    getattr(self.augmented, name),
                    self.deltas[name],
                    name in self.regressions,
                ])
        return path


def compare_arms(real: EvalReport, augmented: EvalReport) -> ArmComparison:
    """Side-by-side deltas for one backbone; flags precision/recall regressions."""
    if real.backbone != augmented.backbone:
        raise ValueError(
            f"backbone mismatch: {real.backbone!r} vs {augmented.backbone!r}"
        )
    deltas = {
        name: getattr(augmented, name) - getattr(real, name) for name in METRIC_FIELDS
    }
    regressions = tuple(
        name for name in ("precision", "recall") if deltas[name] < 0
    )
    return ArmComparison(
        backbone=real.backbone,
        real=real,
        augmented=augmented,
        deltas=deltas,
        regressions=regressions,
    )
