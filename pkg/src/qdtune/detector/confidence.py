from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..diagram import LINE, NO_LINE


@dataclass(frozen=True)
class Detection:
    """A detector verdict on one patch."""

    y: float
    category: str
    confidence: float

    def __post_init__(self):
        if self.category not in (LINE, NO_LINE):
            raise ValueError(f"bad category {self.category!r}")

    def to_dict(self) -> dict:
        return {"y": self.y, "category": self.category, "confidence": self.confidence}

    @classmethod
    def from_dict(cls, raw: dict) -> "Detection":
        return cls(float(raw["y"]), raw["category"], float(raw["confidence"]))


def heuristic_confidence(y: float) -> float:
    """Distance of a sigmoid output from the decision boundary, scaled to [0, 1]."""
    if not (0.0 <= y <= 1.0) or math.isnan(y):
        raise ValueError(f"output must lie in [0, 1], got {y}")
    return abs(0.5 - y) * 2


def bayes_confidence(samples: Sequence[float]) -> float:
    """1 - 2 * population std of repeated sampled-parameter outputs, clamped to [0, 1]."""
    s = np.asarray(samples, dtype=float)
    if s.size < 2:
        raise ValueError("need at least 2 samples")
    if s.max() == s.min():
        return 1.0  # std of equal floats can round to a tiny nonzero value
    return float(min(1.0, max(0.0, 1.0 - 2.0 * s.std())))
