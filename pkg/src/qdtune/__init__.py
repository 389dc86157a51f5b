"""Charge-state autotuning for quantum-dot stability diagrams.

Patch-based transition-line detection with confidence scores, an
uncertainty-aware exploration state machine and an offline evaluation
harness running on synthetic diagrams with ground truth.
"""
__version__ = "0.1.0"
