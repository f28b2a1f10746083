"""Metrics and tuning: P/R/F1, ROC and F1-threshold curves, box matching,
per-category false-positive breakdowns, and threshold search.

Conventions: prf1 reports percentages (matching how detector comparisons are
usually tabulated); curve values stay fractional for plotting. Any 0/0 is 0.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .catalog import BoundingBox
from .errors import DegenerateRoc, InvalidConfig
from .pipeline import DEFAULT_T_BLOCK, DEFAULT_T_REVIEW, ThresholdPolicy

ScorePair = tuple[float, bool]  # (confidence, truth is positive)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def prf1(c: ConfusionCounts) -> tuple[float, float, float]:
    """(precision, recall, f1) as percentages; empty denominators give 0."""
    precision = 100.0 * c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = 100.0 * c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return (precision, recall, f1)


def confusion_at_threshold(scores: Sequence[ScorePair], threshold: float) -> ConfusionCounts:
    """Positive prediction iff confidence >= threshold."""
    tp = fp = tn = fn = 0
    for s, truth in scores:
        if s >= threshold:
            if truth:
                tp += 1
            else:
                fp += 1
        else:
            if truth:
                fn += 1
            else:
                tn += 1
    return ConfusionCounts(tp, fp, tn, fn)


# -------------------------------------------------------------------- curves

@dataclass(frozen=True)
class RocCurve:
    points: tuple[tuple[float, float, float], ...]  # (fpr, tpr, threshold)

    def auc(self) -> float:
        """Trapezoid area under (fpr, tpr)."""
        area = 0.0
        for (f0, t0, _), (f1, t1, _) in zip(self.points, self.points[1:]):
            area += (f1 - f0) * (t0 + t1) / 2.0
        return area


def _sweep(scores: Sequence[ScorePair]):
    """Cumulative tp/fp at every distinct threshold, descending."""
    order = sorted(((float(s), bool(t)) for s, t in scores), key=lambda p: -p[0])
    pos = sum(1 for _, t in order if t)
    neg = len(order) - pos
    out = []
    tp = fp = 0
    i = 0
    while i < len(order):
        t = order[i][0]
        while i < len(order) and order[i][0] == t:
            if order[i][1]:
                tp += 1
            else:
                fp += 1
            i += 1
        out.append((t, tp, fp))
    return out, pos, neg


def roc(scores: Sequence[ScorePair]) -> RocCurve:
    """ROC over distinct-score thresholds, (0,0) and (1,1) endpoints included."""
    sweep, pos, neg = _sweep(scores)
    if pos == 0 or neg == 0:
        raise DegenerateRoc("ROC needs both truth classes present")
    points = [(0.0, 0.0, math.inf)]
    for t, tp, fp in sweep:
        points.append((fp / neg, tp / pos, t))
    return RocCurve(tuple(points))


def f1_curve(scores: Sequence[ScorePair]) -> list[tuple[float, float]]:
    """(threshold, f1 as a fraction) at the same distinct-score sweep points."""
    sweep, pos, neg = _sweep(scores)
    out = []
    for t, tp, fp in sweep:
        fn = pos - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        out.append((t, f1))
    return out


# -------------------------------------------------------------- box matching

def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    ix0 = max(a.x_min, b.x_min)
    iy0 = max(a.y_min, b.y_min)
    ix1 = min(a.x_max, b.x_max)
    iy1 = min(a.y_max, b.y_max)
    inter = max(0, ix1 - ix0) * max(0, iy1 - iy0)
    union = a.area() + b.area() - inter
    return inter / union if union else 0.0


def match_boxes(predicted: Sequence[tuple[BoundingBox, float]],
                truth: Sequence[BoundingBox],
                iou_min: float = 0.5) -> ConfusionCounts:
    """Greedy matching by descending score: a prediction is tp iff it overlaps
    a still-unmatched truth box at IoU >= iou_min. Leftover predictions are fp,
    leftover truths fn. No tn exists at box level."""
    if not (0.0 < iou_min <= 1.0):
        raise InvalidConfig(f"iou_min {iou_min} outside (0, 1]")
    order = sorted(range(len(predicted)), key=lambda i: -predicted[i][1])
    matched = [False] * len(truth)
    tp = fp = 0
    for i in order:
        box, _ = predicted[i]
        best_j = -1
        best_iou = 0.0
        for j, tbox in enumerate(truth):
            if matched[j]:
                continue
            iou = box_iou(box, tbox)
            if iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0 and best_iou >= iou_min:
            matched[best_j] = True
            tp += 1
        else:
            fp += 1
    fn = matched.count(False)
    return ConfusionCounts(tp=tp, fp=fp, tn=0, fn=fn)


# ------------------------------------------------------- per-category errors

@dataclass(frozen=True)
class FprBreakdown:
    per_category: dict[str, float | None]  # None marks Undefined (no negatives)
    overall: float | None


def per_category_fpr(verdicts: Sequence[bool], truths: Sequence[bool],
                     categories: Sequence[str]) -> FprBreakdown:
    """False-positive rate per category; overall is the pooled rate, which
    equals the negative-count-weighted mean of the defined per-category rates."""
    if not (len(verdicts) == len(truths) == len(categories)):
        raise InvalidConfig("verdicts, truths, categories must be parallel")
    fp: dict[str, int] = {}
    neg: dict[str, int] = {}
    for flagged, truth, cat in zip(verdicts, truths, categories):
        fp.setdefault(cat, 0)
        neg.setdefault(cat, 0)
        if not truth:
            neg[cat] += 1
            if flagged:
                fp[cat] += 1
    per = {cat: (fp[cat] / neg[cat] if neg[cat] else None) for cat in sorted(fp)}
    total_neg = sum(neg.values())
    overall = sum(fp.values()) / total_neg if total_neg else None
    return FprBreakdown(per_category=per, overall=overall)


# ------------------------------------------------------------------- tuning

@dataclass(frozen=True)
class MaxF1:
    pass


@dataclass(frozen=True)
class RecallAtPrecision:
    precision: float  # floor, as a fraction in [0, 1]

    def __post_init__(self):
        if not (0.0 <= self.precision <= 1.0):
            raise InvalidConfig(f"precision floor {self.precision} outside [0, 1]")


Objective = MaxF1 | RecallAtPrecision


@dataclass(frozen=True)
class TuningResult:
    policy: ThresholdPolicy
    warnings: tuple[str, ...] = ()


def _pick_block(scores: list[ScorePair], objective: Objective) -> float | None:
    """Best t_block over the distinct-score sweep, or None if unattainable.
    Ties go to the highest threshold (block as little as possible)."""
    sweep, pos, neg = _sweep(scores)
    best_t = None
    best_key = None
    for t, tp, fp in sweep:
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / pos if pos else 0.0
        if isinstance(objective, MaxF1):
            f1 = 2 * p * r / (p + r) if p + r else 0.0
            key = f1
        else:
            if p < objective.precision:
                continue
            key = r
        if best_key is None or key > best_key:
            best_key, best_t = key, t
    return best_t


def _review_floor(scores: list[ScorePair], t_block: float,
                  review_budget: int | None, default_review: float) -> float:
    """Lowest threshold whose review band [t, t_block) holds at most the
    budget; without a budget the global default applies, clamped to t_block."""
    if review_budget is None:
        return min(default_review, t_block)
    below = sorted({s for s, _ in scores if s < t_block})
    for cand in below:
        band = sum(1 for s, _ in scores if cand <= s < t_block)
        if band <= review_budget:
            return cand
    return t_block


def tune_thresholds(scores: dict[tuple[str, str], list[ScorePair]],
                    objective: Objective = MaxF1(),
                    *,
                    default_review: float = DEFAULT_T_REVIEW,
                    default_block: float = DEFAULT_T_BLOCK,
                    review_budget: int | None = None,
                    min_positives: int = 5) -> TuningResult:
    """Search a per-(detector, category) t_block maximizing the objective on
    held-out scores. Groups with too few positives, or where the objective is
    unattainable, keep the global thresholds and flag a warning."""
    overrides: dict[tuple[str, str], tuple[float, float]] = {}
    warnings: list[str] = []
    for key in sorted(scores):
        det, cat = key
        group = scores[key]
        positives = sum(1 for _, truth in group if truth)
        if positives < min_positives:
            warnings.append(f"{det}|{cat}: {positives} positives < {min_positives}, "
                            f"keeping global thresholds")
            continue
        t_block = _pick_block(group, objective)
        if t_block is None:
            warnings.append(f"{det}|{cat}: objective unattainable, "
                            f"keeping global thresholds")
            continue
        t_review = min(_review_floor(group, t_block, review_budget, default_review),
                       t_block)
        overrides[key] = (t_review, t_block)
    policy = ThresholdPolicy(t_review=default_review, t_block=default_block,
                             per_detector_category=overrides)
    return TuningResult(policy=policy, warnings=tuple(warnings))


# ------------------------------------------------------------------- outputs

def write_eval_outputs(outdir: str | Path, report: dict,
                       roc_curve: RocCurve | None = None,
                       f1_points: Sequence[tuple[float, float]] | None = None) -> None:
    """report.json plus optional roc.csv / f1_curve.csv for external plotting."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with (outdir / "report.json").open("w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if roc_curve is not None:
        with (outdir / "roc.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            for fpr, tpr, t in roc_curve.points:
                w.writerow([repr(t) if math.isfinite(t) else "inf", repr(fpr), repr(tpr)])
    if f1_points is not None:
        with (outdir / "f1_curve.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "f1"])
            for t, f1 in f1_points:
                w.writerow([repr(t), repr(f1)])
