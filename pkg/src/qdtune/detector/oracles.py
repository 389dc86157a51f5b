"""Classifiers the explorer can drive: ground-truth oracles and trained models.

All of them implement ``classify(diagram, rect, rng) -> Detection``.
"""
from __future__ import annotations

import weakref

import numpy as np

from ..diagram import LINE, NO_LINE, Rect, StabilityDiagram, assign_category, normalize_patch
from .confidence import Detection
from .model import TrainedDetector, infer


def _flip(category: str) -> str:
    return NO_LINE if category == LINE else LINE


class OracleDetector:
    """Reads the line labels; always right, always fully confident."""

    name = "oracle"

    def __init__(self, detection_offset_px: int):
        self.detection_offset_px = detection_offset_px
        self._cache: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()

    def category(self, d: StabilityDiagram, rect: Rect) -> str:
        per_diagram = self._cache.setdefault(d, {})
        cat = per_diagram.get(rect)
        if cat is None:
            cat = per_diagram[rect] = assign_category(d, rect, self.detection_offset_px)
        return cat

    def classify(self, d: StabilityDiagram, rect: Rect, rng=None) -> Detection:
        cat = self.category(d, rect)
        return Detection(y=1.0 if cat == LINE else 0.0, category=cat, confidence=1.0)


def oracle_infer(d: StabilityDiagram, rect: Rect, detection_offset_px: int) -> Detection:
    return OracleDetector(detection_offset_px).classify(d, rect)


class NoisyOracleDetector(OracleDetector):
    """Oracle with planted errors and a confidence that tends to expose them.

    Each verdict is flipped with probability ``error_rate``. Flipped verdicts
    get a confidence below ``reference_threshold`` with probability
    ``low_conf_given_error``; correct verdicts get one at or above it with
    that same probability.
    """

    name = "noisy-oracle"

    def __init__(
        self,
        detection_offset_px: int,
        error_rate: float,
        low_conf_given_error: float,
        reference_threshold: float = 0.8,
    ):
        super().__init__(detection_offset_px)
        for name, v in (("error_rate", error_rate), ("low_conf_given_error", low_conf_given_error)):
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        if not 0 < reference_threshold <= 1:
            raise ValueError("reference_threshold must be in (0, 1]")
        self.error_rate = error_rate
        self.low_conf_given_error = low_conf_given_error
        self.reference_threshold = reference_threshold

    def classify(self, d: StabilityDiagram, rect: Rect, rng: np.random.Generator) -> Detection:
        truth = self.category(d, rect)
        wrong = rng.random() < self.error_rate
        low = rng.random() < (self.low_conf_given_error if wrong else 1 - self.low_conf_given_error)
        t = self.reference_threshold
        u = rng.random()
        conf = u * t if low else t + u * (1 - t)
        cat = _flip(truth) if wrong else truth
        y = 0.5 + conf / 2 if cat == LINE else 0.5 - conf / 2
        return Detection(y=y, category=cat, confidence=conf)


def noisy_oracle_infer(
    d: StabilityDiagram,
    rect: Rect,
    detection_offset_px: int,
    error_rate: float,
    low_conf_given_error: float,
    rng: np.random.Generator,
    reference_threshold: float = 0.8,
) -> Detection:
    det = NoisyOracleDetector(detection_offset_px, error_rate, low_conf_given_error, reference_threshold)
    return det.classify(d, rect, rng)


class ModelDetector:
    """Measures the patch, normalizes it and runs a trained network."""

    def __init__(self, trained: TrainedDetector):
        self.trained = trained
        self.name = trained.spec.kind

    def classify(self, d: StabilityDiagram, rect: Rect, rng: np.random.Generator | None = None) -> Detection:
        seed = None
        if self.trained.spec.bayesian and rng is not None:
            seed = int(rng.integers(2**63))
        return infer(self.trained, normalize_patch(d.patch(rect)), sampling_seed=seed)


__all__ = [
    "ModelDetector",
    "NoisyOracleDetector",
    "OracleDetector",
    "noisy_oracle_infer",
    "oracle_infer",
]
