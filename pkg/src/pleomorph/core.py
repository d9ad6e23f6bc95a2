"""Scores, rater panels, reference aggregation and quantization."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import InvalidInputError

SCORE_MIN = 1.0
SCORE_MAX = 3.0
CATEGORIES = (1, 2, 3)


class Confidence(str, Enum):
    NOT_CERTAIN = "not_certain"
    FAIRLY_CERTAIN = "fairly_certain"
    CERTAIN = "certain"


# weight of an absent confidence label equals fairly_certain
CONFIDENCE_WEIGHT = {
    Confidence.CERTAIN: 3,
    Confidence.FAIRLY_CERTAIN: 2,
    Confidence.NOT_CERTAIN: 1,
    None: 2,
}


def parse_confidence(value) -> Confidence | None:
    if value is None or isinstance(value, Confidence):
        return value
    text = str(value).strip().lower().replace(" ", "_")
    if text in ("", "none", "na"):
        return None
    try:
        return Confidence(text)
    except ValueError:
        raise InvalidInputError(f"unknown confidence label {value!r}") from None


@dataclass(frozen=True)
class PleomorphismScore:
    """A severity value on the [1, 3] spectrum.

    Raw network outputs may spill outside the range; use :meth:`reported`
    to clamp at reporting boundaries.
    """

    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise InvalidInputError(f"non-finite score {self.value!r}")

    def reported(self) -> "PleomorphismScore":
        return PleomorphismScore(min(max(self.value, SCORE_MIN), SCORE_MAX))

    def __float__(self):
        return float(self.value)


@dataclass(frozen=True)
class ObserverScore:
    rater_id: str
    score: int
    confidence: Confidence | None = None

    def __post_init__(self):
        if self.score not in CATEGORIES:
            raise InvalidInputError(f"rater {self.rater_id!r}: score {self.score!r} not in {{1,2,3}}")
        object.__setattr__(self, "confidence", parse_confidence(self.confidence))


@dataclass(frozen=True)
class RaterPanel:
    case_id: str
    scores: tuple[ObserverScore, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "scores", tuple(self.scores))
        if not self.scores:
            raise InvalidInputError(f"case {self.case_id!r}: empty rater panel")
        ids = [s.rater_id for s in self.scores]
        if len(set(ids)) != len(ids):
            dupes = sorted(r for r, n in Counter(ids).items() if n > 1)
            raise InvalidInputError(f"case {self.case_id!r}: duplicate rater ids {dupes}")

    @classmethod
    def from_scores(cls, case_id, scores, confidences=None):
        confidences = confidences if confidences is not None else [None] * len(scores)
        return cls(
            case_id,
            tuple(ObserverScore(f"R{i + 1}", int(s), c) for i, (s, c) in enumerate(zip(scores, confidences))),
        )

    def __len__(self):
        return len(self.scores)


@dataclass(frozen=True)
class QuantizationScheme:
    edges: tuple[float, ...]

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        object.__setattr__(self, "edges", edges)
        if len(edges) < 3:
            raise InvalidInputError("a quantization scheme needs at least 2 bins")
        if edges[0] != SCORE_MIN or edges[-1] != SCORE_MAX:
            raise InvalidInputError(f"bin edges must span [1, 3], got {edges[0]}..{edges[-1]}")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise InvalidInputError("bin edges must be strictly increasing")

    @property
    def k(self) -> int:
        return len(self.edges) - 1

    @classmethod
    def equal_width(cls, k: int = 3) -> "QuantizationScheme":
        if int(k) != k or k < 2:
            raise InvalidInputError(f"k must be an integer >= 2, got {k!r}")
        k = int(k)
        # one rounding per edge, so k=3 gives exactly 5/3 and 7/3
        inner = [(SCORE_MIN * k + (SCORE_MAX - SCORE_MIN) * i) / k for i in range(1, k)]
        return cls((SCORE_MIN, *inner, SCORE_MAX))


def _panel(panel: RaterPanel) -> RaterPanel:
    if not isinstance(panel, RaterPanel) or not panel.scores:
        raise InvalidInputError("empty rater panel")
    return panel


def reference_score(panel: RaterPanel) -> PleomorphismScore:
    """Average of the panel's categorical scores."""
    panel = _panel(panel)
    return PleomorphismScore(sum(s.score for s in panel.scores) / len(panel.scores))


def majority_vote(panel: RaterPanel) -> int:
    """Plurality category.

    Vote-count ties go to the tied category with the larger summed
    confidence weight (certain=3, fairly_certain=2, not_certain=1,
    absent=2); remaining ties go to the lower category.
    """
    panel = _panel(panel)
    votes = Counter()
    weight = Counter()
    for s in panel.scores:
        votes[s.score] += 1
        weight[s.score] += CONFIDENCE_WEIGHT[s.confidence]
    return min(votes, key=lambda c: (-votes[c], -weight[c], c))


def quantize(score, scheme: QuantizationScheme | int = 3) -> int:
    """Map a score to its 1-based bin after clamping to [1, 3].

    Bins are left-closed/right-open except the last, which is closed.
    """
    if not isinstance(scheme, QuantizationScheme):
        scheme = QuantizationScheme.equal_width(scheme)
    value = float(score)
    if not math.isfinite(value):
        raise InvalidInputError(f"cannot quantize non-finite score {value!r}")
    value = min(max(value, SCORE_MIN), SCORE_MAX)
    # side="right" puts values equal to an inner edge in the upper bin
    idx = int(np.searchsorted(scheme.edges[1:-1], value, side="right"))
    return idx + 1


def quantize_many(scores: Sequence[float], scheme: QuantizationScheme | int = 3) -> np.ndarray:
    return np.array([quantize(s, scheme) for s in scores], dtype=np.int64)
