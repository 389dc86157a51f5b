"""Patch-level transition-line detectors and their confidence scores."""
from .confidence import Detection, bayes_confidence, heuristic_confidence
from .model import (
    ModelSpec,
    ShapeError,
    TrainedDetector,
    TrainingError,
    default_spec,
    dumps_detector,
    infer,
    loads_detector,
    train,
)
from .oracles import (
    ModelDetector,
    NoisyOracleDetector,
    OracleDetector,
    noisy_oracle_infer,
    oracle_infer,
)

__all__ = [
    "Detection",
    "ModelDetector",
    "ModelSpec",
    "NoisyOracleDetector",
    "OracleDetector",
    "ShapeError",
    "TrainedDetector",
    "TrainingError",
    "bayes_confidence",
    "default_spec",
    "dumps_detector",
    "heuristic_confidence",
    "infer",
    "loads_detector",
    "noisy_oracle_infer",
    "oracle_infer",
    "train",
]
