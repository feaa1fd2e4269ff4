"""Multi-label evaluation metrics, size-weighted aggregation and paired t-tests.

"Flat accuracy" and exact-match accuracy are the same quantity here: the
fraction of samples whose whole predicted label vector equals the truth.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput, LengthMismatch, NonPositiveWeight, ZeroVariance
from .tensor_io import PredictionFile

METRIC_NAMES = ("micro_f1", "macro_f1", "exact_match", "per_label_accuracy")


@dataclass(frozen=True)
class TaskMetrics:
    micro_f1: float
    macro_f1: float
    exact_match: float
    per_label_accuracy: float
    n_samples: int
    n_labels: int
    tp: tuple[int, ...]
    fp: tuple[int, ...]
    fn: tuple[int, ...]
    tn: tuple[int, ...]
    undefined_f1_labels: tuple[int, ...] = ()  # classes whose F1 denominator was 0

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_counts(y_true: np.ndarray, y_pred: np.ndarray):
    t = np.asarray(y_true).astype(bool)
    p = np.asarray(y_pred).astype(bool)
    if t.shape != p.shape or t.ndim != 2:
        raise DimensionMismatch(f"y_true {t.shape} and y_pred {p.shape} must be equal 2-D shapes")
    tp = (t & p).sum(axis=0)
    fp = (~t & p).sum(axis=0)
    fn = (t & ~p).sum(axis=0)
    tn = (~t & ~p).sum(axis=0)
    return tp, fp, fn, tn


def _f1(tp, fp, fn) -> float:
    den = 2 * tp + fp + fn
    return 2 * tp / den if den else 0.0


def task_metrics(pred: PredictionFile) -> TaskMetrics:
    """Micro/macro F1, exact match and per-label accuracy for one task.

    A class with no positives in either truth or prediction has F1 0; it is
    still counted in the macro average and listed in ``undefined_f1_labels``.
    """
    y_true, y_pred = pred.y_true, pred.y_pred
    tp, fp, fn, tn = confusion_counts(y_true, y_pred)
    n, C = y_true.shape
    if n == 0 or C == 0:
        raise DimensionMismatch("prediction file has no samples or no labels")
    micro = _f1(int(tp.sum()), int(fp.sum()), int(fn.sum()))
    per_class = [_f1(int(a), int(b), int(c)) for a, b, c in zip(tp, fp, fn)]
    undefined = tuple(int(c) for c in np.flatnonzero(2 * tp + fp + fn == 0))
    exact = float(np.all(y_true == y_pred, axis=1).mean())
    per_label = float(np.mean((tp + tn) / n))
    return TaskMetrics(
        micro_f1=float(micro),
        macro_f1=float(sum(per_class) / C),
        exact_match=exact,
        per_label_accuracy=per_label,
        n_samples=int(n),
        n_labels=int(C),
        tp=tuple(int(x) for x in tp),
        fp=tuple(int(x) for x in fp),
        fn=tuple(int(x) for x in fn),
        tn=tuple(int(x) for x in tn),
        undefined_f1_labels=undefined,
    )


def weighted_mean(per_task: Sequence[tuple[TaskMetrics | dict, float]]) -> dict[str, float]:
    """Average each metric with weights proportional to test-set size."""
    if not per_task:
        raise EmptyInput("no tasks to aggregate")
    weights = np.array([w for _, w in per_task], dtype=np.float64)
    if np.any(~(weights > 0)):
        raise NonPositiveWeight(f"weights must be positive, got {weights.tolist()}")
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([m[name] if isinstance(m, dict) else getattr(m, name) for m, _ in per_task])
        out[name] = float((weights * vals).sum() / weights.sum())
    return out


# ---------------------------------------------------------------------------
# t distribution


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-16) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not (a > 0 and b > 0):
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return min(1.0, max(0.0, betainc_reg(df / 2.0, 0.5, x)))


@dataclass(frozen=True)
class PairedTestResult:
    t_statistic: float
    p_value: float
    df: int
    mean_diff: float
    n: int
    zero_variance: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.t_statistic):
            d["t_statistic"] = None
        return d


def paired_t_test(before: Sequence[float], after: Sequence[float]) -> PairedTestResult:
    """Two-sided paired t-test on ``after - before``.

    Constant differences make t undefined. That case returns
    ``zero_variance=True`` with t = 0, p = 1 when the differences are all zero,
    and t = +/-inf, p = 0 otherwise. A ZeroVariance warning is emitted.
    """
    a = np.asarray(before, dtype=np.float64)
    b = np.asarray(after, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise LengthMismatch(f"need at least 2 pairs, got {n}")
    diff = b - a
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if sd == 0.0:
        warnings.warn("paired differences have zero variance", ZeroVariance, stacklevel=2)
        t = 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
        return PairedTestResult(t, 1.0 if mean == 0.0 else 0.0, n - 1, mean, n, zero_variance=True)
    t = mean / (sd / math.sqrt(n))
    return PairedTestResult(t, t_two_sided_p(t, n - 1), n - 1, mean, n)
