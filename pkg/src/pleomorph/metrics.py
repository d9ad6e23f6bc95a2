"""Regression metrics and rater-agreement statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import CATEGORIES, ObserverScore, RaterPanel, majority_vote
from .errors import InvalidInputError, UndefinedMetricError

DIFFERENCES = (-2, -1, 0, 1, 2)


# regression ------------------------------------------------------------------

@dataclass(frozen=True)
class RegressionReport:
    mae: float
    mse: float
    mdae: float
    explained_variance: float | None
    r2: float | None
    n: int

    def rows(self):
        return [("mae", self.mae), ("mse", self.mse), ("mdae", self.mdae),
                ("explained_variance", self.explained_variance), ("r2", self.r2), ("n", self.n)]


def _paired(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise InvalidInputError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise InvalidInputError("no values to compare")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise InvalidInputError("values must be finite")
    return a, b


def explained_variance(predictions, targets) -> float:
    p, t = _paired(predictions, targets)
    var_t = t.var()
    if var_t == 0:
        raise UndefinedMetricError("explained variance is undefined for constant targets")
    return float(1.0 - (t - p).var() / var_t)


def r2_score(predictions, targets) -> float:
    p, t = _paired(predictions, targets)
    ss_tot = ((t - t.mean()) ** 2).sum()
    if ss_tot == 0:
        raise UndefinedMetricError("R^2 is undefined for constant targets")
    return float(1.0 - ((t - p) ** 2).sum() / ss_tot)


def regression_report(predictions, targets, strict: bool = False) -> RegressionReport:
    """MAE, MSE, median AE, explained variance and R^2.

    With constant targets EV and R^2 are undefined: ``strict`` raises,
    otherwise they are reported as None.
    """
    p, t = _paired(predictions, targets)
    err = np.abs(t - p)
    ev = r2 = None
    try:
        ev = explained_variance(p, t)
        r2 = r2_score(p, t)
    except UndefinedMetricError:
        if strict:
            raise
    return RegressionReport(float(err.mean()), float((err ** 2).mean()), float(np.median(err)), ev, r2, int(p.size))


# kappa -----------------------------------------------------------------------

def _categories(values, k: int) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise InvalidInputError("category lists must be one-dimensional")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.mod(arr, 1) == 0):
            raise InvalidInputError("categories must be integers")
        arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 1 or arr.max() > k):
        raise InvalidInputError(f"categories must lie in 1..{k}")
    return arr.astype(np.int64)


def confusion_matrix(a, b, k: int = 3) -> np.ndarray:
    """Counts with rows indexed by rater ``a`` and columns by rater ``b``."""
    if k < 2:
        raise InvalidInputError("kappa needs at least two categories")
    a, b = _categories(a, k), _categories(b, k)
    if a.size != b.size:
        raise InvalidInputError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise InvalidInputError("no co-scored cases")
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (a - 1, b - 1), 1)
    return m


def quadratic_kappa(a, b, k: int = 3) -> float:
    """Cohen's kappa with squared-distance disagreement weights.

    Two raters who agree on a single constant category get 1.
    """
    m = confusion_matrix(a, b, k)
    n = int(m.sum())
    # integer sums keep the result exactly symmetric in (a, b); the
    # (k-1)^2 normalisation cancels between numerator and denominator
    i = np.arange(k)
    w = (i[:, None] - i[None, :]) ** 2
    num = int((w * m).sum()) * n
    den = int((w * np.outer(m.sum(1), m.sum(0))).sum())
    if den == 0:
        if num == 0:
            return 1.0
        raise UndefinedMetricError("kappa expectation is zero while the raters disagree")
    return 1.0 - num / den


# rating tables -----------------------------------------------------------------

@dataclass(frozen=True)
class RatingTable:
    """Cases x participants categorical scores. 0 marks a missing entry."""

    case_ids: tuple
    participants: tuple
    scores: np.ndarray
    confidences: np.ndarray | None = None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.int64)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "case_ids", tuple(self.case_ids))
        object.__setattr__(self, "participants", tuple(self.participants))
        if scores.shape != (len(self.case_ids), len(self.participants)):
            raise InvalidInputError("score table shape does not match case and participant ids")
        if len(set(self.participants)) != len(self.participants):
            raise InvalidInputError("participant ids must be distinct")

    def column(self, participant) -> np.ndarray:
        try:
            return self.scores[:, self.participants.index(participant)]
        except ValueError:
            raise InvalidInputError(f"unknown participant {participant!r}") from None

    def require_complete(self):
        missing = np.argwhere(self.scores == 0)
        if missing.size:
            where = [(self.case_ids[i], self.participants[j]) for i, j in missing[:5]]
            raise InvalidInputError(f"rating table has {len(missing)} missing entries, e.g. {where}")

    def with_participant(self, name, scores: Mapping) -> "RatingTable":
        missing = [c for c in self.case_ids if c not in scores]
        extra = [c for c in scores if c not in set(self.case_ids)]
        if missing or extra:
            raise InvalidInputError(f"case ids do not align: missing {missing[:5]}, unknown {extra[:5]}")
        col = np.array([[int(scores[c])] for c in self.case_ids], dtype=np.int64).reshape(-1, 1)
        conf = None
        if self.confidences is not None:
            conf = np.concatenate([self.confidences, np.full((len(self.case_ids), 1), None, dtype=object)], 1)
        return RatingTable(self.case_ids, self.participants + (name,), np.concatenate([self.scores, col], 1), conf)

    @classmethod
    def from_panels(cls, panels: Sequence[RaterPanel]) -> "RatingTable":
        panels = list(panels)
        raters = []
        for p in panels:
            for s in p.scores:
                if s.rater_id not in raters:
                    raters.append(s.rater_id)
        scores = np.zeros((len(panels), len(raters)), dtype=np.int64)
        conf = np.full(scores.shape, None, dtype=object)
        for i, p in enumerate(panels):
            for s in p.scores:
                j = raters.index(s.rater_id)
                scores[i, j] = s.score
                conf[i, j] = s.confidence
        return cls(tuple(p.case_id for p in panels), tuple(raters), scores, conf)


@dataclass(frozen=True)
class KappaMatrix:
    participants: tuple
    values: np.ndarray

    @property
    def mean_excluding_self(self) -> np.ndarray:
        n = len(self.participants)
        off = ~np.eye(n, dtype=bool)
        return np.array([self.values[i][off[i]].mean() for i in range(n)])

    def get(self, a, b) -> float:
        return float(self.values[self.participants.index(a), self.participants.index(b)])


def pairwise_kappa_matrix(table: RatingTable, k: int = 3) -> KappaMatrix:
    if len(table.participants) < 2:
        raise InvalidInputError("pairwise kappa needs at least two participants")
    table.require_complete()
    n = len(table.participants)
    values = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            values[i, j] = values[j, i] = quadratic_kappa(table.scores[:, i], table.scores[:, j], k)
    return KappaMatrix(table.participants, values)


def majority_excluding(table: RatingTable, participant) -> np.ndarray:
    j = table.participants.index(participant)
    out = np.empty(len(table.case_ids), dtype=np.int64)
    for i, case in enumerate(table.case_ids):
        scores = tuple(
            ObserverScore(str(table.participants[c]), int(table.scores[i, c]),
                          table.confidences[i, c] if table.confidences is not None else None)
            for c in range(len(table.participants)) if c != j)
        out[i] = majority_vote(RaterPanel(str(case), scores))
    return out


def leave_one_out_majority_kappa(table: RatingTable, participant, k: int = 3) -> float:
    """Kappa between a participant and the majority of everyone else."""
    if len(table.participants) < 3:
        raise InvalidInputError("leave-one-out majority needs at least three participants")
    table.require_complete()
    return quadratic_kappa(table.column(participant), majority_excluding(table, participant), k)


def score_difference_counts(a, b) -> dict[int, int]:
    """Histogram of a_i - b_i over the k=3 differences -2..2."""
    a, b = _categories(a, len(CATEGORIES)), _categories(b, len(CATEGORIES))
    if a.size != b.size:
        raise InvalidInputError(f"length mismatch: {a.size} vs {b.size}")
    d = a - b
    return {v: int((d == v).sum()) for v in DIFFERENCES}

