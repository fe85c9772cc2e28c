"""Accuracy, group-fairness ratios and loss disparity.

Ratio metrics put the lower of the two group values in the numerator so a
defined result always lies in [0, 1]. ``None`` marks an undefined value (a
group missing from the batch, or every qualifying denominator zero).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import EmptyInputError


class EvalRecord(NamedTuple):
    y_true: int
    y_pred: int
    group: int


class EvalBatch(NamedTuple):
    """Column form of a list of EvalRecord."""

    y_true: np.ndarray
    y_pred: np.ndarray
    groups: np.ndarray


@dataclass
class MetricsRecord:
    client: int
    timestep: int
    model_id: int
    true_concept: str
    n_models: int
    acc: float
    aeq: float | None
    oeq: float | None
    opp: float | None
    loss: float
    loss_g0: float | None
    loss_g1: float | None
    disparity: float


def as_arrays(recs) -> EvalBatch:
    """Accept an EvalBatch or any iterable of EvalRecord."""
    if isinstance(recs, EvalBatch):
        return EvalBatch(*(np.asarray(a) for a in recs))
    arr = np.asarray(list(recs), dtype=np.int64).reshape(-1, 3)
    return EvalBatch(arr[:, 0], arr[:, 1], arr[:, 2])


def _ratio(a: float, b: float) -> float | None:
    hi = max(a, b)
    if hi == 0:
        return None
    return min(a, b) / hi


def accuracy(recs) -> float:
    y, yhat, _ = as_arrays(recs)
    if len(y) == 0:
        raise EmptyInputError("accuracy of no records")
    return float(np.mean(y == yhat))


def aeq(recs) -> float | None:
    y, yhat, s = as_arrays(recs)
    accs = []
    for g in (0, 1):
        m = s == g
        if not m.any():
            return None
        accs.append(float(np.mean(y[m] == yhat[m])))
    return _ratio(*accs)


def _per_class_rates(y, yhat, s, condition_on_pred: bool):
    """rates[g][c] for classes where the conditioning count is nonzero.

    TPR conditions on the true label, PPV on the predicted label.
    """
    rates = {0: {}, 1: {}}
    cond = yhat if condition_on_pred else y
    for g in (0, 1):
        in_group = s == g
        for c in np.unique(cond[in_group]):
            m = in_group & (cond == c)
            rates[g][int(c)] = float(np.mean(y[m] == yhat[m]))
    return rates


def _class_ratio_metric(recs, overlap: bool, condition_on_pred: bool) -> float | None:
    y, yhat, s = as_arrays(recs)
    rates = _per_class_rates(y, yhat, s, condition_on_pred)
    if overlap:
        terms = []
        for c in sorted(set(rates[0]) & set(rates[1])):
            r = _ratio(rates[0][c], rates[1][c])
            if r is not None:
                terms.append(r)
        return float(np.mean(terms)) if terms else None
    if not rates[0] or not rates[1]:
        return None
    return _ratio(float(np.mean(list(rates[0].values()))), float(np.mean(list(rates[1].values()))))


def oeq(recs, overlap: bool = True) -> float | None:
    """Equality of opportunity: per-class true-positive-rate ratios."""
    return _class_ratio_metric(recs, overlap, condition_on_pred=False)


def opp(recs, overlap: bool = True) -> float | None:
    """Predictive parity: per-class positive-predictive-value ratios."""
    return _class_ratio_metric(recs, overlap, condition_on_pred=True)


def disparity(losses_by_group: dict) -> float:
    """Largest absolute gap between any two group losses (0 with one group)."""
    values = [v for v in losses_by_group.values() if v is not None]
    if not values:
        raise EmptyInputError("disparity needs at least one group loss")
    return float(max(values) - min(values))
