"""Per-class confidence thresholds and the three-class (line / no-line / unknown) readout."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .detector.confidence import Detection
from .diagram import LINE, NO_LINE

UNKNOWN = "unknown"
DEFAULT_TAU = 0.2
MIN_THRESHOLD = 0.5
DEFAULT_GRID_STEP = 0.001


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class ThresholdSet:
    t_line: float = MIN_THRESHOLD
    t_noline: float = MIN_THRESHOLD
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        for name in ("t_line", "t_noline"):
            v = getattr(self, name)
            if not MIN_THRESHOLD <= v <= 1.0:
                raise CalibrationError(f"{name} must lie in [{MIN_THRESHOLD}, 1], got {v}")
        if self.tau < 0:
            raise CalibrationError("tau must be non-negative")

    def for_category(self, category: str) -> float:
        return self.t_line if category == LINE else self.t_noline

    def to_dict(self) -> dict:
        return {"t_line": self.t_line, "t_noline": self.t_noline, "tau": self.tau}

    @classmethod
    def from_dict(cls, raw: dict) -> "ThresholdSet":
        return cls(float(raw["t_line"]), float(raw["t_noline"]), float(raw.get("tau", DEFAULT_TAU)))


def threshold_score(err_above: int, under_total: int, tau: float) -> float:
    """Err + UT * tau."""
    if err_above < 0 or under_total < 0 or tau < 0:
        raise ValueError("threshold_score inputs must be non-negative")
    return err_above + under_total * tau


def threshold_grid(grid_step: float) -> np.ndarray:
    n = int(round(1.0 / grid_step))
    if n < 1 or abs(n * grid_step - 1.0) > 1e-9:
        raise CalibrationError(f"grid_step must divide 1 evenly, got {grid_step}")
    # k / n is the closest double to k * step, without accumulated drift.
    return np.arange(n + 1) / n


def score_curve(conf: np.ndarray, wrong: np.ndarray, grid: np.ndarray, tau: float) -> np.ndarray:
    """Threshold score at every grid point for one predicted class."""
    conf = np.asarray(conf, dtype=float)
    wrong = np.asarray(wrong, dtype=bool)
    under = np.searchsorted(np.sort(conf), grid, side="left")
    wrong_conf = np.sort(conf[wrong])
    err_above = len(wrong_conf) - np.searchsorted(wrong_conf, grid, side="left")
    return err_above + under * tau


def _best_threshold(conf, wrong, grid, tau) -> float:
    scores = score_curve(conf, wrong, grid, tau)
    t = float(grid[int(np.argmin(scores))])  # argmin returns the first, i.e. smallest, t
    return max(MIN_THRESHOLD, t)


def calibrate(
    detections: Sequence[tuple[Detection, str]],
    tau: float = DEFAULT_TAU,
    grid_step: float = DEFAULT_GRID_STEP,
) -> ThresholdSet:
    """Grid-search each predicted class's threshold independently on a validation set."""
    if len(detections) == 0:
        raise CalibrationError("no detections to calibrate on")
    if tau < 0:
        raise CalibrationError("tau must be non-negative")
    grid = threshold_grid(grid_step)
    cats = np.array([d.category for d, _ in detections])
    conf = np.array([d.confidence for d, _ in detections], dtype=float)
    wrong = np.array([d.category != truth for d, truth in detections])
    t = {}
    for cls in (LINE, NO_LINE):
        m = cats == cls
        t[cls] = _best_threshold(conf[m], wrong[m], grid, tau)
    return ThresholdSet(t[LINE], t[NO_LINE], tau)


def apply_threshold(det: Detection, t: ThresholdSet) -> str:
    return UNKNOWN if det.confidence < t.for_category(det.category) else det.category


def apply_thresholds(detections: Iterable[Detection], t: ThresholdSet) -> list[str]:
    return [apply_threshold(d, t) for d in detections]


__all__ = [
    "CalibrationError",
    "DEFAULT_GRID_STEP",
    "DEFAULT_TAU",
    "MIN_THRESHOLD",
    "ThresholdSet",
    "UNKNOWN",
    "apply_threshold",
    "apply_thresholds",
    "calibrate",
    "score_curve",
    "threshold_grid",
    "threshold_score",
]
