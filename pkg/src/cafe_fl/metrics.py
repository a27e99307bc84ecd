"""Post-hoc fairness and performance metrics.

Group tags are read here and nowhere on the training path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricUndefinedError


@dataclass(frozen=True)
class PredictionRecord:
    y_true: int
    y_pred: int
    group: int


@dataclass(frozen=True)
class GroupMetrics:
    f1: float
    accuracy: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    f1: float
    accuracy: float
    eo_gap: float
    eo_gap_signed: float
    per_group: dict[int, GroupMetrics] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "f1": self.f1,
            "accuracy": self.accuracy,
            "eo_gap": self.eo_gap,
            "eo_gap_signed": self.eo_gap_signed,
            "per_group": {
                str(g): {"f1": m.f1, "accuracy": m.accuracy, "support": m.support}
                for g, m in sorted(self.per_group.items())
            },
        }


def _columns(records):
    """Accept a list of PredictionRecord or a ``(y_true, y_pred, groups)`` triple."""
    if isinstance(records, tuple) and len(records) == 3:
        y, p, g = records
        g = None if g is None else np.asarray(g, dtype=np.int64)
        return np.asarray(y, dtype=np.int64), np.asarray(p, dtype=np.int64), g
    records = list(records)
    y = np.array([r.y_true for r in records], dtype=np.int64)
    p = np.array([r.y_pred for r in records], dtype=np.int64)
    g = np.array([r.group for r in records], dtype=np.int64)
    return y, p, g


def true_positive_rate(y_true, y_pred, groups, group: int) -> float:
    mask = (groups == group) & (y_true == 1)
    if not mask.any():
        raise MetricUndefinedError(f"group {group} has no positive-label records; TPR undefined")
    return float(np.mean(y_pred[mask] == 1))


def eo_gap_signed(records, privileged: int = 1, unprivileged: int = 0) -> float:
    """``TPR(privileged) - TPR(unprivileged)``."""
    y, p, g = _columns(records)
    return true_positive_rate(y, p, g, privileged) - true_positive_rate(y, p, g, unprivileged)


def eo_gap(records, privileged: int = 1, unprivileged: int = 0) -> float:
    """Absolute equal-opportunity gap between the two groups."""
    return abs(eo_gap_signed(records, privileged, unprivileged))


def fate(perf_m: float, perf_b: float, eo_m: float, eo_b: float) -> float:
    """Relative performance change minus relative EO-gap change, both against baseline ``b``."""
    if perf_b == 0:
        raise MetricUndefinedError("baseline performance is zero; FATE undefined")
    if eo_b == 0:
        raise MetricUndefinedError("baseline EO gap is zero; FATE undefined")
    return (perf_m - perf_b) / perf_b - (eo_m - eo_b) / eo_b


def f1_accuracy(records) -> tuple[float, float]:
    """Binary F1 (class 1 positive) and accuracy.

    F1 is 0 when there are no true positives, including the case with no
    predicted and no actual positives.
    """
    y, p, _ = _columns(records)
    if y.size == 0:
        raise MetricUndefinedError("no records")
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
    return f1, float(np.mean(y == p))


def per_group_metrics(records) -> dict[int, GroupMetrics]:
    y, p, g = _columns(records)
    out = {}
    for group in np.unique(g):
        mask = g == group
        f1, acc = f1_accuracy((y[mask], p[mask], None))
        out[int(group)] = GroupMetrics(f1, acc, int(mask.sum()))
    return out


def evaluate(y_true, y_pred, groups) -> MetricsReport:
    """Every metric at once. EO fields are NaN if a group lacks positives."""
    cols = (np.asarray(y_true), np.asarray(y_pred), np.asarray(groups))
    f1, acc = f1_accuracy(cols)
    try:
        signed = eo_gap_signed(cols)
    except MetricUndefinedError:
        signed = float("nan")
    return MetricsReport(f1, acc, abs(signed), signed, per_group_metrics(cols))
