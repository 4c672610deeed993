"""ROC construction, AUROC, threshold selection, and stream accuracy.

Scores are oriented so that higher means more adversarial; a frame is flagged
when its score strictly exceeds the threshold, matching the detectors.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    tpr: float
    fpr: float


@dataclass(frozen=True)
class RocCurve:
    points: tuple  # RocPoint, threshold descending
    auroc: float
    n_clean: int
    n_adversarial: int


def roc_curve(clean_scores, adversarial_scores) -> RocCurve:
    """Sweep every distinct score (plus +-inf sentinels) as a threshold.

    TPR = fraction of adversarial scores strictly above the threshold, FPR the
    same for clean scores; AUROC by trapezoid over FPR.
    """
    clean = np.asarray(list(clean_scores), dtype=np.float64)
    adv = np.asarray(list(adversarial_scores), dtype=np.float64)
    if clean.size == 0 or adv.size == 0:
        raise CalibrationError("both clean and adversarial score sets must be non-empty")
    thresholds = np.concatenate(
        ([math.inf], np.unique(np.concatenate([clean, adv]))[::-1], [-math.inf])
    )
    points = []
    for t in thresholds:
        tpr = float(np.mean(adv > t))
        fpr = float(np.mean(clean > t))
        points.append(RocPoint(float(t), tpr, fpr))
    xs = np.array([p.fpr for p in points])
    ys = np.array([p.tpr for p in points])
    auroc = float(np.trapezoid(ys, xs))
    return RocCurve(tuple(points), auroc, clean.size, adv.size)


@dataclass(frozen=True)
class ThresholdPolicy:
    """How to pick an operating point from a ROC curve.

    kind: "fpr_cap" (max TPR with FPR <= parameter), "tpr_floor" (min FPR with
    TPR >= parameter), or "youden" (max TPR - FPR; parameter ignored).
    """

    kind: str
    parameter: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fpr_cap", "tpr_floor", "youden"):
            raise CalibrationError(f"unknown policy kind {self.kind!r}")
        if not 0.0 <= self.parameter <= 1.0:
            raise CalibrationError("policy parameter must lie in [0, 1]")

    @classmethod
    def parse(cls, text: str) -> "ThresholdPolicy":
        """Parse "youden", "fpr<=0.1" or "tpr>=0.8"."""
        text = text.strip().lower()
        if text == "youden":
            return cls("youden")
        if text.startswith("fpr<="):
            return cls("fpr_cap", float(text[5:]))
        if text.startswith("tpr>="):
            return cls("tpr_floor", float(text[5:]))
        raise CalibrationError(f"cannot parse policy {text!r}")


@dataclass(frozen=True)
class SelectedPoint:
    threshold: float
    tpr: float
    fpr: float
    feasible: bool = True


def select_threshold(curve: RocCurve, policy: ThresholdPolicy) -> SelectedPoint:
    """Pick the policy optimum; ties break toward lower FPR, then higher threshold.

    When a constrained policy admits only the all-reject sentinel, that
    sentinel is returned flagged infeasible.
    """
    pts = curve.points

    def best(candidates, key):
        # max by key; ties -> lower fpr -> higher threshold
        return max(candidates, key=lambda p: (key(p), -p.fpr, p.threshold))

    if policy.kind == "youden":
        chosen = best(pts, lambda p: p.tpr - p.fpr)
        return SelectedPoint(chosen.threshold, chosen.tpr, chosen.fpr)
    if policy.kind == "fpr_cap":
        ok = [p for p in pts if p.fpr <= policy.parameter]
        chosen = best(ok, lambda p: p.tpr)
        return SelectedPoint(chosen.threshold, chosen.tpr, chosen.fpr,
                             feasible=chosen.tpr > 0)
    ok = [p for p in pts if p.tpr >= policy.parameter]
    if not ok:  # cannot happen: the -inf sentinel has tpr = 1
        raise CalibrationError("no point satisfies the TPR floor")
    chosen = max(ok, key=lambda p: (-p.fpr, p.threshold))
    return SelectedPoint(chosen.threshold, chosen.tpr, chosen.fpr)


def accuracy(stream_verdicts, ground_truth: str) -> float:
    """Fraction of present frames whose stream verdict matches the truth."""
    if ground_truth not in ("clean", "adversarial"):
        raise CalibrationError(f"ground truth must be clean or adversarial, got {ground_truth!r}")
    present = [sv for sv in stream_verdicts if sv.value != "absent"]
    if not present:
        raise CalibrationError("accuracy undefined on an all-absent stream")
    hits = sum(1 for sv in present if sv.value == ground_truth)
    return hits / len(present)


def roc_csv(curve: RocCurve) -> str:
    out = io.StringIO()
    out.write("threshold,tpr,fpr\n")
    for p in curve.points:
        out.write(f"{p.threshold:.6g},{p.tpr:.6g},{p.fpr:.6g}\n")
    out.write(f"# auroc={curve.auroc:.6g}\n")
    return out.getvalue()
