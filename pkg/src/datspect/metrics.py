"""Evaluation maths: confusion counts, threshold metrics, ROC/PR curves, fold aggregation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from datspect.labels import Label


class UndefinedMetricError(ValueError):
    """A metric whose denominator is zero for the given predictions."""


class PredictionsFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredPrediction:
    subject_id: str
    score: float
    truth: Label

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0) or math.isnan(self.score):
            raise ValueError(f"score {self.score!r} for {self.subject_id} outside [0, 1]")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


@dataclass(frozen=True)
class Curve:
    """Points of a ROC (x=FPR, y=TPR) or PR (x=recall, y=precision) curve.

    ``thresholds[i]`` is the score cut-off producing point ``i``; the leading
    sentinel point uses ``inf`` (nothing predicted positive).
    """

    kind: str
    x: np.ndarray
    y: np.ndarray
    thresholds: np.ndarray

    def rows(self):
        return zip(self.thresholds.tolist(), self.x.tolist(), self.y.tolist())


def _arrays(preds: Sequence[ScoredPrediction]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([p.score for p in preds], dtype=np.float64)
    truth = np.array([p.truth.positive for p in preds], dtype=bool)
    return scores, truth


def confusion(preds: Sequence[ScoredPrediction], threshold: float = 0.5) -> ConfusionMatrix:
    """Tally predictions; ``score >= threshold`` counts as a PD call."""
    if len(preds) == 0:
        raise ValueError("cannot build a confusion matrix from zero predictions")
    scores, truth = _arrays(preds)
    called = scores >= threshold
    return ConfusionMatrix(
        tp=int(np.sum(called & truth)),
        fp=int(np.sum(called & ~truth)),
        tn=int(np.sum(~called & ~truth)),
        fn=int(np.sum(~called & truth)),
    )


def _ratio(num: int, den: int, name: str) -> float:
    if den == 0:
        raise UndefinedMetricError(f"{name} undefined: zero denominator")
    return num / den


def sensitivity(cm: ConfusionMatrix) -> float:
    return _ratio(cm.tp, cm.tp + cm.fn, "sensitivity")


def specificity(cm: ConfusionMatrix) -> float:
    return _ratio(cm.tn, cm.tn + cm.fp, "specificity")


def precision(cm: ConfusionMatrix) -> float:
    return _ratio(cm.tp, cm.tp + cm.fp, "precision")


def accuracy(cm: ConfusionMatrix) -> float:
    return _ratio(cm.tp + cm.tn, cm.total, "accuracy")


def _sweep(scores: np.ndarray, truth: np.ndarray):
    """Cumulative (tp, fp) after admitting each distinct score, highest first."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    t = truth[order]
    tps = np.cumsum(t)
    fps = np.cumsum(~t)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    return s[ends], tps[ends], fps[ends]


def roc_curve(preds: Sequence[ScoredPrediction]) -> Curve:
    scores, truth = _arrays(preds)
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both classes present")
    thr, tps, fps = _sweep(scores, truth)
    return Curve(
        kind="ROC",
        x=np.r_[0.0, fps / n_neg],
        y=np.r_[0.0, tps / n_pos],
        thresholds=np.r_[np.inf, thr],
    )


def roc_auc(preds: Sequence[ScoredPrediction]) -> float:
    """Trapezoidal ROC area; tied scores contribute diagonal segments (half credit)."""
    c = roc_curve(preds)
    return float(np.sum(np.diff(c.x) * (c.y[1:] + c.y[:-1]) / 2.0))


def pr_curve(preds: Sequence[ScoredPrediction]) -> Curve:
    scores, truth = _arrays(preds)
    n_pos = int(truth.sum())
    if n_pos == 0:
        raise UndefinedMetricError("PR curve needs at least one positive")
    thr, tps, fps = _sweep(scores, truth)
    return Curve(
        kind="PR",
        x=np.r_[0.0, tps / n_pos],
        y=np.r_[1.0, tps / (tps + fps)],
        thresholds=np.r_[np.inf, thr],
    )


def pr_auc(preds: Sequence[ScoredPrediction]) -> float:
    """Average precision: sum of recall increments times precision at each step."""
    c = pr_curve(preds)
    return float(np.sum(np.diff(c.x) * c.y[1:]))


average_precision = pr_auc


def weighted_mean(values: Sequence[float], weights: Sequence[float]) -> float:
    if len(values) != len(weights):
        raise ValueError(f"{len(values)} values but {len(weights)} weights")
    if len(values) == 0:
        raise ValueError("weighted mean of nothing")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    return float(np.dot(np.asarray(values, dtype=np.float64), w) / w.sum())


def sample_stddev(values: Sequence[float]) -> float:
    """Standard deviation with the n-1 denominator."""
    if len(values) < 2:
        raise ValueError("need at least two values")
    return float(np.std(np.asarray(values, dtype=np.float64), ddof=1))


def population_stddev(values: Sequence[float]) -> float:
    if len(values) < 1:
        raise ValueError("need at least one value")
    return float(np.std(np.asarray(values, dtype=np.float64), ddof=0))


def summarize(preds: Sequence[ScoredPrediction], threshold: float = 0.5) -> dict:
    """Every holdout metric that can be computed from scores alone.

    Metrics with a zero denominator are reported as ``None``.
    """
    cm = confusion(preds, threshold)
    out: dict = {"n": cm.total, "threshold": threshold, **cm.as_dict()}
    for name, fn in (
        ("accuracy", accuracy),
        ("sensitivity", sensitivity),
        ("specificity", specificity),
        ("precision", precision),
    ):
        try:
            out[name] = fn(cm)
        except UndefinedMetricError:
            out[name] = None
    for name, fn in (("roc_auc", roc_auc), ("pr_auc", pr_auc)):
        try:
            out[name] = fn(preds)
        except UndefinedMetricError:
            out[name] = None
    return out


def bce(preds: Sequence[ScoredPrediction], eps: float = 1e-7) -> float:
    """Mean binary cross-entropy of the scores, probabilities clipped to [eps, 1-eps]."""
    scores, truth = _arrays(preds)
    p = np.clip(scores, eps, 1.0 - eps)
    return float(-np.mean(np.where(truth, np.log(p), np.log1p(-p))))


# -- files ------------------------------------------------------------------

PREDICTION_FIELDS = ("subject_id", "score", "truth")


def write_predictions(preds: Iterable[ScoredPrediction], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PREDICTION_FIELDS)
        for p in preds:
            w.writerow([p.subject_id, repr(float(p.score)), p.truth.value])


def read_predictions(path: Path) -> list[ScoredPrediction]:
    """Parse a predictions file; problems are reported with 1-based line numbers."""
    preds = []
    errors = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and row[0].strip() == "subject_id":
                continue
            if len(row) != 3:
                errors.append(f"line {lineno}: expected 3 fields, got {len(row)}")
                continue
            sid, score, truth = (c.strip() for c in row)
            try:
                preds.append(ScoredPrediction(sid, float(score), Label.parse(truth)))
            except ValueError as exc:
                errors.append(f"line {lineno}: {exc}")
    if errors:
        raise PredictionsFormatError("; ".join(errors))
    if not preds:
        raise PredictionsFormatError(f"{path}: no predictions")
    return preds


def write_curve(curve: Curve, path: Path) -> None:
    x_name, y_name = ("fpr", "tpr") if curve.kind == "ROC" else ("recall", "precision")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", x_name, y_name])
        for t, x, y in curve.rows():
            w.writerow([repr(t), repr(x), repr(y)])


def read_curve(path: Path, kind: str) -> Curve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    arr = np.array([[float(v) for v in r] for r in rows], dtype=np.float64).reshape(-1, 3)
    return Curve(kind=kind, x=arr[:, 1], y=arr[:, 2], thresholds=arr[:, 0])
