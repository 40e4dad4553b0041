"""Evaluation metrics for the binary harmful/benign task: accuracy,
rank-based AUROC, macro-averaged F1, and multi-seed aggregation.

AUROC uses the Mann-Whitney rank form, P(score_pos > score_neg) plus
half the tie probability, which equals the area under the empirical ROC
step function and is exactly checkable against a pairwise count.
Zero-denominator precision/recall terms count as 0 and bump a module
warning counter.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DataError


class UndefinedMetricWarning(UserWarning):
    """A metric had an undefined term (single-class truth, empty denominator)."""


_zero_division_count = 0


def zero_division_count() -> int:
    """How many zero-denominator precision/recall/F1 terms were coerced to 0."""
    return _zero_division_count


def reset_zero_division_count() -> None:
    global _zero_division_count
    _zero_division_count = 0


def _as_labels(x, name: str) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise DataError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


def _check_pair(preds, truth) -> tuple[np.ndarray, np.ndarray]:
    p = _as_labels(preds, "preds")
    t = _as_labels(truth, "truth")
    if p.shape[0] != t.shape[0]:
        raise DataError(f"length mismatch: {p.shape[0]} preds vs {t.shape[0]} truth")
    if p.shape[0] < 1:
        raise DataError("empty inputs")
    return p, t


def confusion(preds, truth) -> tuple[int, int, int, int]:
    """(TP, TN, FP, FN) counts with class 1 as the positive class."""
    p, t = _check_pair(preds, truth)
    tp = int(np.sum((p == 1) & (t == 1)))
    tn = int(np.sum((p == 0) & (t == 0)))
    fp = int(np.sum((p == 1) & (t == 0)))
    fn = int(np.sum((p == 0) & (t == 1)))
    return tp, tn, fp, fn


def accuracy(preds, truth) -> float:
    """Fraction of samples whose predicted label equals the true one."""
    p, t = _check_pair(preds, truth)
    return float(np.mean(p == t))


def auroc(scores, truth) -> float:
    """Probability a random positive outscores a random negative, ties at 1/2.

    Computed from average ranks of the class-1 scores.  Single-class
    truth leaves the metric undefined: returns NaN and warns.
    """
    s = _as_labels(scores, "scores")
    t = _as_labels(truth, "truth")
    if s.shape[0] != t.shape[0]:
        raise DataError(f"length mismatch: {s.shape[0]} scores vs {t.shape[0]} truth")
    if s.shape[0] < 1:
        raise DataError("empty inputs")
    pos = t == 1
    n_pos = int(pos.sum())
    n_neg = int(t.shape[0] - n_pos)
    if n_pos == 0 or n_neg == 0:
        warnings.warn(
            f"AUROC undefined: truth contains a single class "
            f"({n_pos} positive, {n_neg} negative)",
            UndefinedMetricWarning,
            stacklevel=2,
        )
        return float("nan")
    ranks = rankdata(s, method="average")
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _f1_for_class(p, t, cls: int) -> float:
    global _zero_division_count
    tp = int(np.sum((p == cls) & (t == cls)))
    pred_pos = int(np.sum(p == cls))
    actual_pos = int(np.sum(t == cls))
    if pred_pos == 0 or actual_pos == 0 or tp == 0:
        if pred_pos == 0 or actual_pos == 0:
            _zero_division_count += 1
            warnings.warn(
                f"F1 for class {cls} has an empty denominator; counted as 0",
                UndefinedMetricWarning,
                stacklevel=3,
            )
        return 0.0
    precision = tp / pred_pos
    recall = tp / actual_pos
    return 2.0 * precision * recall / (precision + recall)


def macro_f1(preds, truth) -> float:
    """Unweighted mean of per-class F1, each class treated as positive in turn."""
    p, t = _check_pair(preds, truth)
    return 0.5 * (_f1_for_class(p, t, 0) + _f1_for_class(p, t, 1))


@dataclass(frozen=True)
class EvalReport:
    """One evaluation pass: the three headline metrics plus raw counts.

    balanced_accuracy (mean per-class recall) rides along for the debug
    outputs; it is not a headline metric.
    """

    accuracy: float
    auroc: float
    macro_f1: float
    tp: int
    tn: int
    fp: int
    fn: int
    n: int

    def __post_init__(self):
        if self.tp + self.tn + self.fp + self.fn != self.n:
            raise DataError(
                f"confusion counts sum to {self.tp + self.tn + self.fp + self.fn}, "
                f"expected n={self.n}"
            )

    @property
    def balanced_accuracy(self) -> float:
        global _zero_division_count
        terms = []
        for tp, fn in ((self.tp, self.fn), (self.tn, self.fp)):
            denom = tp + fn
            if denom == 0:
                _zero_division_count += 1
                terms.append(0.0)
            else:
                terms.append(tp / denom)
        return 0.5 * (terms[0] + terms[1])

    def to_kv(self) -> str:
        """Flat key=value block, one field per line."""
        lines = [
            f"n={self.n}",
            f"accuracy={self.accuracy!r}",
            f"auroc={self.auroc!r}",
            f"macro_f1={self.macro_f1!r}",
            f"balanced_accuracy={self.balanced_accuracy!r}",
            f"tp={self.tp}",
            f"tn={self.tn}",
            f"fp={self.fp}",
            f"fn={self.fn}",
        ]
        return "\n".join(lines)

    def to_csv_row(self, seed: int, split: str) -> str:
        return (
            f"{seed},{split},{self.accuracy!r},{self.auroc!r},{self.macro_f1!r},"
            f"{self.tp},{self.tn},{self.fp},{self.fn}"
        )


EVAL_CSV_HEADER = "seed,split,acc,auroc,macro_f1,tp,tn,fp,fn"


def report_from_predictions(preds, scores, truth) -> EvalReport:
    """Assemble an EvalReport from hard predictions and class-1 scores."""
    tp, tn, fp, fn = confusion(preds, truth)
    return EvalReport(
        accuracy=accuracy(preds, truth),
        auroc=auroc(scores, truth),
        macro_f1=macro_f1(preds, truth),
        tp=tp,
        tn=tn,
        fp=fp,
        fn=fn,
        n=len(truth),
    )


@dataclass(frozen=True)
class SeedAggregate:
    """Per-metric mean and sample standard deviation over repeated runs."""

    mean_accuracy: float
    std_accuracy: float
    mean_auroc: float
    std_auroc: float
    mean_macro_f1: float
    std_macro_f1: float
    n_runs: int


def _mean_std(values: list[float]) -> tuple[float, float]:
    # sorting first makes the reduction invariant to run order, so permuted
    # seed lists aggregate bit-identically
    arr = np.sort(np.asarray(values, dtype=np.float64))
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size >= 2 else 0.0
    return mean, std


def aggregate(runs: list[EvalReport]) -> SeedAggregate:
    """Mean and sample (n-1) std per metric; a single run gets std 0."""
    if not runs:
        raise DataError("aggregate requires at least one run")
    acc = _mean_std([r.accuracy for r in runs])
    auc = _mean_std([r.auroc for r in runs])
    f1 = _mean_std([r.macro_f1 for r in runs])
    return SeedAggregate(
        mean_accuracy=acc[0],
        std_accuracy=acc[1],
        mean_auroc=auc[0],
        std_auroc=auc[1],
        mean_macro_f1=f1[0],
        std_macro_f1=f1[1],
        n_runs=len(runs),
    )
