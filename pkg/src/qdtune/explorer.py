"""Uncertainty-aware exploration of a stability diagram toward the one-electron regime.

An episode runs five stages in order:

1. find_first: probe outward from the start in four axis directions until a
   line is detected.
2. slope_estimate: scan two short sections across the line, one on each side
   of the anchor, and join the two crossings.
3. spacing_scan: march along the line normal toward lower voltages until
   several average spacings pass without a new line, then a little way up to
   collect more spacing samples.
4. missed_line_check (optional): look for a faint line one spacing below the
   leftmost line at a few places along it.
5. target_inference: step half a spacing above the leftmost line.

Whenever a verdict falls below its class threshold, ``validate_line`` takes
extra measurements along the line direction before the verdict is trusted.
Geometry is done in voltage space; measurements snap to the pixel grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Protocol

import numpy as np

from .calibrate import UNKNOWN, ThresholdSet, apply_threshold
from .detector.confidence import Detection
from .diagram import LINE, DatasetProfile, Rect, StabilityDiagram, region_at

STAGES = (
    "find_first",
    "slope_estimate",
    "spacing_scan",
    "missed_line_check",
    "target_inference",
    "done",
)
FAILURE_REASONS = ("budget_exhausted", "no_line_found", "stuck")

# Step geometry. Distances are in patch sides or in detection-square spans.
SEARCH_DIRECTIONS = ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))  # right, up, left, down
SECTION_OFFSET_PATCHES = 1.5
SECTION_PROBES = (0, 1, -1, 2, -2, 3, -3)
MAX_SLOPE_DEVIATION_DEG = 30.0
UP_MARCH_MAX_CROSSINGS = 4
MISSED_LINE_SECTIONS = 3
MISSED_LINE_PROBES = (0, -1, 1)
MISSED_LINE_ROUNDS = 3
MISSED_LINE_MIN_SHIFT = 0.5  # in average spacings below the current leftmost line
VALIDATION_MAX_PROBES = 6
TARGET_OFFSET = 0.5  # in average spacings above the leftmost line
STUCK_LIMIT = 500  # consecutive probes answered from the cache

DEFAULT_MAX_STEPS = 1000


class Detector(Protocol):
    def classify(self, d: StabilityDiagram, rect: Rect, rng: np.random.Generator) -> Detection: ...


@dataclass(frozen=True)
class TuningPriors:
    prior_distance_v: float
    prior_slope_deg: float
    use_last_line_validation: bool = False
    empty_confirmation_factor: float = 3.0
    max_steps: int = DEFAULT_MAX_STEPS
    patch_size_px: int = 18
    detection_offset_px: int = 6

    def __post_init__(self):
        if not self.prior_distance_v > 0:
            raise ValueError("prior_distance_v must be positive")
        if self.empty_confirmation_factor < 1:
            raise ValueError("empty_confirmation_factor must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.patch_size_px - 1 - 2 * self.detection_offset_px < 1:
            raise ValueError("detection offset leaves no detection area")

    @classmethod
    def from_profile(cls, profile: DatasetProfile, **overrides) -> "TuningPriors":
        kw = dict(
            prior_distance_v=profile.prior_line_distance_v,
            prior_slope_deg=profile.prior_slope_deg,
            use_last_line_validation=profile.use_last_line_validation,
            patch_size_px=profile.patch_size_px,
            detection_offset_px=profile.detection_offset_px,
        )
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class Step:
    """One measurement: where, what the detector said, and how it was read."""

    rect: Rect
    detection: Detection
    outcome: str
    stage: str

    def to_dict(self) -> dict:
        return {
            "rect": list(self.rect),
            "detection": self.detection.to_dict(),
            "outcome": self.outcome,
            "stage": self.stage,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Step":
        return cls(Rect(*raw["rect"]), Detection.from_dict(raw["detection"]), raw["outcome"], raw["stage"])


@dataclass(frozen=True)
class TuningOutcome:
    final_v: tuple[float, float]
    success: bool
    steps: int
    failure_reason: str | None
    trace: tuple[Step, ...]

    def to_dict(self) -> dict:
        return {
            "final_v": list(self.final_v),
            "success": self.success,
            "steps": self.steps,
            "failure_reason": self.failure_reason,
            "trace": [s.to_dict() for s in self.trace],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "TuningOutcome":
        return cls(
            tuple(raw["final_v"]),
            bool(raw["success"]),
            int(raw["steps"]),
            raw["failure_reason"],
            tuple(Step.from_dict(s) for s in raw["trace"]),
        )


class _Stop(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass
class Crossing:
    point: np.ndarray
    trusted: bool


@dataclass
class ExplorerState:
    diagram: StabilityDiagram
    detector: Detector
    thresholds: ThresholdSet
    priors: TuningPriors
    rng: np.random.Generator
    uncertainty_based: bool = True
    stage: str = "find_first"
    line_anchors: list[tuple[float, float]] = field(default_factory=list)
    slope_estimate_deg: float | None = None
    spacing_samples_v: list[float] = field(default_factory=list)
    leftmost_line: tuple[float, float] | None = None
    step_ledger: list[Step] = field(default_factory=list)
    crossings: list[Crossing] = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False)
    _cached_streak: int = 0
    _last_center: tuple[float, float] | None = None

    # ------------------------------------------------------------ geometry

    @property
    def side(self) -> int:
        return self.priors.patch_size_px

    @property
    def span_px(self) -> int:
        """Width of the closed detection square, in pixels between pixel centers."""
        p = self.priors
        return p.patch_size_px - 1 - 2 * p.detection_offset_px

    @property
    def step_v(self) -> float:
        """Pitch along the line normal that leaves no gap between detection squares.

        A square of span ``w`` covers ``w * (|n1| + |n2|)`` of the normal;
        grid snapping can shift neighbouring probes by up to ``|n1| + |n2|``
        pixels relative to each other.
        """
        _, n = self.axes()
        return max(self.span_px - 1, 1) * float(np.abs(n).sum()) * self.diagram.pixel_size_v

    @property
    def span_v(self) -> float:
        return self.span_px * self.diagram.pixel_size_v

    @property
    def side_v(self) -> float:
        return self.side * self.diagram.pixel_size_v

    @cached_property
    def _box(self) -> tuple[float, float, float, float]:
        d = self.diagram
        half = (self.side - 1) / 2 * d.pixel_size_v
        (x0, y0), (x1, y1) = d.bounds_v
        return x0 + half, y0 + half, x1 - half, y1 - half

    def center_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Voltage range of patch centers that keep the patch inside the diagram."""
        x0, y0, x1, y1 = self._box
        return np.array([x0, y0]), np.array([x1, y1])

    def inside(self, p) -> bool:
        x0, y0, x1, y1 = self._box
        tol = 0.5 * self.diagram.pixel_size_v
        g1, g2 = float(p[0]), float(p[1])
        return x0 - tol <= g1 <= x1 + tol and y0 - tol <= g2 <= y1 + tol

    def clamp(self, p) -> np.ndarray:
        lo, hi = self.center_box()
        return np.minimum(np.maximum(p, lo), hi)

    def rect_at(self, p) -> Rect:
        d = self.diagram
        px, py = d.to_pixel(float(p[0]), float(p[1]))
        half = (self.side - 1) / 2
        x = min(max(int(math.floor(px - half + 0.5)), 0), d.width - self.side)
        y = min(max(int(math.floor(py - half + 0.5)), 0), d.height - self.side)
        return Rect(x, y, self.side)

    def rect_center_v(self, rect: Rect) -> np.ndarray:
        return np.array(self.diagram.to_voltage(*rect.center))

    def slope_deg(self) -> float:
        return self.priors.prior_slope_deg if self.slope_estimate_deg is None else self.slope_estimate_deg

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit line direction and unit normal (toward higher voltages) for the current slope."""
        t = math.radians(self.slope_deg())
        d = np.array([math.cos(t), math.sin(t)])
        n = np.array([math.sin(t), -math.cos(t)])
        if n @ _prior_normal(self.priors.prior_slope_deg) < 0:
            n = -n
        return d, n

    def chord(self, s: float, n: np.ndarray, d: np.ndarray) -> tuple[float, float] | None:
        """u-interval of valid centers on the line {u*d + s*n}."""
        lo, hi = self.center_box()
        u_lo, u_hi = -math.inf, math.inf
        for i in range(2):
            a, b = lo[i] - s * n[i], hi[i] - s * n[i]
            if abs(d[i]) < 1e-12:
                if not a - 1e-12 <= 0 <= b + 1e-12:
                    return None
                continue
            t0, t1 = sorted((a / d[i], b / d[i]))
            u_lo, u_hi = max(u_lo, t0), min(u_hi, t1)
        if u_lo > u_hi:
            return None
        return u_lo, u_hi

    def average_spacing(self) -> float:
        s = self.spacing_samples_v
        prior = self.priors.prior_distance_v
        if not s:
            return prior
        if len(s) == 1:
            return (prior + s[0]) / 2
        return float(np.mean(s))

    # ------------------------------------------------------------ measuring

    def measure(self, p, stage: str) -> Step:
        """Measure the patch centered (after grid snapping) nearest to ``p``."""
        rect = self.rect_at(p)
        assert self.diagram.contains_rect(rect)
        det = self._cache.get(rect)
        if det is None:
            if len(self.step_ledger) >= self.priors.max_steps:
                raise _Stop("budget_exhausted")
            det = self.detector.classify(self.diagram, rect, self.rng)
            self._cache[rect] = det
            self._cached_streak = 0
            outcome = self.read(det)
            step = Step(rect, det, outcome, stage)
            self.step_ledger.append(step)
        else:
            self._cached_streak += 1
            if self._cached_streak > STUCK_LIMIT:
                raise _Stop("stuck")
            step = Step(rect, det, self.read(det), stage)
        self._last_center = tuple(self.rect_center_v(rect))
        return step

    def read(self, det: Detection) -> str:
        return apply_threshold(det, self.thresholds) if self.uncertainty_based else det.category

    def verdict(self, p, stage: str) -> tuple[str, bool, Step]:
        """Category at ``p`` and whether it can be trusted; unknowns get validated."""
        step = self.measure(p, stage)
        if step.outcome != UNKNOWN:
            return step.outcome, True, step
        cat, trusted = validate_line(self, p, step)
        return cat, trusted, step


def _prior_normal(slope_deg: float) -> np.ndarray:
    t = math.radians(slope_deg)
    n = np.array([math.sin(t), -math.cos(t)])
    if n[0] < -1e-12 or (abs(n[0]) <= 1e-12 and n[1] < 0):
        n = -n
    return n


# ---------------------------------------------------------------- stages


def validate_line(state: ExplorerState, suspect, suspect_step: Step) -> tuple[str, bool]:
    """Confirm or refute an unknown verdict by probing along the line direction.

    Probes alternate sides at growing distance (one detection width per
    step) and stop at the first confident verdict. Out-of-bounds positions
    are skipped. Returns ``(category, trusted)``.
    """
    d, _ = state.axes()
    suspect = np.asarray(suspect, dtype=float)
    probes = 0
    k = 1
    while probes < VALIDATION_MAX_PROBES and k <= VALIDATION_MAX_PROBES:
        for sign in (1, -1):
            if probes >= VALIDATION_MAX_PROBES:
                break
            q = suspect + sign * k * state.span_v * d
            if not state.inside(q):
                continue
            probes += 1
            step = state.measure(q, suspect_step.stage)
            if step.outcome != UNKNOWN:
                return step.outcome, True
        k += 1
    return suspect_step.detection.category, False


def stage1_find_first_line(state: ExplorerState, start) -> np.ndarray | None:
    """Round-robin search in four axis directions at growing distance from the start.

    The coarse sweep steps one patch side at a time. A patch side is wider
    than the detection area, so a sweep can slip past a line; if it finds
    nothing, further sweeps run with the probe positions shifted by one
    detection width until the rays are covered without gaps.
    """
    state.stage = "find_first"
    start = state.clamp(np.asarray(start, dtype=float))
    cat, trusted, step = state.verdict(start, state.stage)
    if cat == LINE:
        return _anchor(state, step)
    phases = max(1, math.ceil(state.side / state.span_px - 1e-9))
    for phase in range(phases):
        hit = _sweep(state, start, phase * state.span_v)
        if hit is not None:
            return hit
    return None


def _sweep(state: ExplorerState, start, shift: float) -> np.ndarray | None:
    lo, hi = state.center_box()
    done = [False] * 4
    k = 1
    while not all(done):
        for i, direction in enumerate(SEARCH_DIRECTIONS):
            if done[i]:
                continue
            q = start + (k * state.side_v - shift) * np.array(direction)
            if np.any(q < lo) or np.any(q > hi):
                q = state.clamp(q)
                done[i] = True  # the border probe is the last one this way
            cat, trusted, step = state.verdict(q, state.stage)
            if cat == LINE:
                return _anchor(state, step)
        k += 1
    return None


def _anchor(state: ExplorerState, step: Step) -> np.ndarray:
    p = state.rect_center_v(step.rect)
    state.line_anchors.append((float(p[0]), float(p[1])))
    return p


def stage2_estimate_slope(state: ExplorerState, anchor) -> float:
    """Slope from the crossings of two sections placed either side of the anchor."""
    state.stage = "slope_estimate"
    prior = state.priors.prior_slope_deg
    d0 = np.array([math.cos(math.radians(prior)), math.sin(math.radians(prior))])
    n0 = _prior_normal(prior)
    anchor = np.asarray(anchor, dtype=float)
    found = []
    for sign in (1, -1):
        center = anchor + sign * SECTION_OFFSET_PATCHES * state.side_v * d0
        found.append(_scan_section(state, center, n0))
    pts = [p for p in found if p is not None]
    if len(pts) == 2:
        a, b = pts
    elif len(pts) == 1:
        a, b = anchor, pts[0]
    else:
        a = b = None
    slope = prior
    if a is not None and np.linalg.norm(b - a) >= state.side_v:
        v = b - a
        est = math.degrees(math.atan2(v[1], v[0]))
        est = (est - prior + 90.0) % 180.0 - 90.0 + prior  # same orientation as the prior
        if abs(est - prior) <= MAX_SLOPE_DEVIATION_DEG:
            slope = est
    state.slope_estimate_deg = slope
    return slope


def _scan_section(state: ExplorerState, center, normal) -> np.ndarray | None:
    for j in SECTION_PROBES:
        q = center + j * state.step_v * normal
        if not state.inside(q):
            continue
        cat, trusted, step = state.verdict(q, state.stage)
        if cat == LINE and trusted:
            return state.rect_center_v(step.rect)
    return None


def _march(state: ExplorerState, origin, sign: int, max_crossings: int | None = None) -> list[Crossing]:
    """Walk along the normal from a line at ``origin`` and collect new crossings.

    Consecutive line verdicts merge into one crossing at their mean
    position. Stops at the border, after ``max_crossings``, or once
    ``empty_confirmation_factor`` average spacings pass without a line.
    """
    d, n = state.axes()
    origin = np.asarray(origin, dtype=float)
    u0, s0 = float(origin @ d), float(origin @ n)
    found: list[Crossing] = []
    prev_s, prev_trusted = s0, True
    run: list[tuple[float, np.ndarray, bool]] = []
    contiguous_with_origin = True
    k = 0
    while True:
        k += 1
        s = s0 + sign * k * state.step_v
        if sign * (s - prev_s) > state.priors.empty_confirmation_factor * state.average_spacing() and not run:
            break
        u = u0
        if not state.inside(u * d + s * n):
            ch = state.chord(s, n, d)
            if ch is None:
                break
            u = min(max(u0, ch[0]), ch[1])
        cat, trusted, step = state.verdict(u * d + s * n, state.stage)
        if cat == LINE:
            if not contiguous_with_origin:
                run.append((s, state.rect_center_v(step.rect), trusted))
            continue
        contiguous_with_origin = False
        if run:
            c = _close_run(run)
            run = []
            s_c = float(c.point @ n)
            if c.trusted and prev_trusted:
                state.spacing_samples_v.append(abs(s_c - prev_s))
            prev_s, prev_trusted = s_c, c.trusted
            found.append(c)
            state.crossings.append(c)
            if max_crossings is not None and len(found) >= max_crossings:
                break
    if run:
        c = _close_run(run)
        found.append(c)
        state.crossings.append(c)
    return found


def _close_run(run) -> Crossing:
    pts = np.array([p for _, p, _ in run])
    return Crossing(pts.mean(axis=0), any(t for _, _, t in run))


def _leftmost(state: ExplorerState, fallback) -> np.ndarray:
    _, n = state.axes()
    pool = [c for c in state.crossings if c.trusted] or state.crossings
    if not pool:
        return np.asarray(fallback, dtype=float)
    return min(pool, key=lambda c: float(c.point @ n)).point


def stage3_spacing_scan(state: ExplorerState, anchor) -> np.ndarray:
    """Down-march to the lowest line, then a capped up-march for spacing samples."""
    state.stage = "spacing_scan"
    anchor = np.asarray(anchor, dtype=float)
    state.crossings.append(Crossing(anchor, True))
    _march(state, anchor, -1)
    _march(state, anchor, +1, max_crossings=UP_MARCH_MAX_CROSSINGS)
    left = _leftmost(state, anchor)
    state.leftmost_line = (float(left[0]), float(left[1]))
    return left


def stage4_missed_line_check(state: ExplorerState) -> np.ndarray:
    """Look for a faint line one spacing below the leftmost line at several places along it."""
    state.stage = "missed_line_check"
    left = np.asarray(state.leftmost_line, dtype=float)
    for _ in range(MISSED_LINE_ROUNDS):
        d, n = state.axes()
        avg = state.average_spacing()
        s_left = float(left @ n)
        s_target = s_left - avg
        ch = state.chord(s_target, n, d)
        if ch is None:
            break
        hit = None
        for i in range(MISSED_LINE_SECTIONS):
            u = ch[0] + (i + 0.5) / MISSED_LINE_SECTIONS * (ch[1] - ch[0])
            for j in MISSED_LINE_PROBES:
                s = s_target + j * state.step_v
                q = u * d + s * n
                if not state.inside(q):
                    continue
                cat, trusted, step = state.verdict(q, state.stage)
                c = state.rect_center_v(step.rect)
                if cat == LINE and trusted and float(c @ n) < s_left - MISSED_LINE_MIN_SHIFT * avg:
                    hit = c
                    break
            if hit is not None:
                break
        if hit is None:
            break
        state.crossings.append(Crossing(hit, True))
        _march(state, hit, -1)
        left = _leftmost(state, hit)
        state.leftmost_line = (float(left[0]), float(left[1]))
    return left


def stage5_infer_target(state: ExplorerState) -> tuple[float, float]:
    state.stage = "target_inference"
    _, n = state.axes()
    p = np.asarray(state.leftmost_line, dtype=float) + TARGET_OFFSET * state.average_spacing() * n
    lo, hi = state.diagram.bounds_v
    p = np.minimum(np.maximum(p, lo), hi)
    return float(p[0]), float(p[1])


# ---------------------------------------------------------------- episode


def tune(
    measurable: StabilityDiagram,
    detector: Detector,
    thresholds: ThresholdSet | None,
    priors: TuningPriors,
    start_v,
    rng: np.random.Generator,
    uncertainty_based: bool = True,
) -> TuningOutcome:
    """Run one autotuning episode from ``start_v``; failures are reported in the outcome."""
    d = measurable
    lo, hi = d.bounds_v
    if not (lo[0] <= start_v[0] <= hi[0] and lo[1] <= start_v[1] <= hi[1]):
        raise ValueError(f"start {tuple(start_v)} is outside the diagram")
    if d.width < priors.patch_size_px or d.height < priors.patch_size_px:
        raise ValueError("diagram is smaller than one patch")
    state = ExplorerState(d, detector, thresholds or ThresholdSet(), priors, rng, uncertainty_based)
    start = np.asarray(start_v, dtype=float)
    reason = None
    final = (float(start[0]), float(start[1]))
    try:
        anchor = stage1_find_first_line(state, start)
        if anchor is None:
            raise _Stop("no_line_found")
        stage2_estimate_slope(state, anchor)
        stage3_spacing_scan(state, anchor)
        if priors.use_last_line_validation:
            stage4_missed_line_check(state)
        final = stage5_infer_target(state)
    except _Stop as stop:
        reason = stop.reason
        if reason in ("budget_exhausted", "stuck") and state._last_center is not None:
            final = state._last_center
    state.stage = "done"
    success = reason is None and region_at(d, final) == "1"
    return TuningOutcome(
        final_v=(float(final[0]), float(final[1])),
        success=bool(success),
        steps=len(state.step_ledger),
        failure_reason=reason,
        trace=tuple(state.step_ledger),
    )


__all__ = [
    "Crossing",
    "ExplorerState",
    "FAILURE_REASONS",
    "STAGES",
    "Step",
    "TuningOutcome",
    "TuningPriors",
    "stage1_find_first_line",
    "stage2_estimate_slope",
    "stage3_spacing_scan",
    "stage4_missed_line_check",
    "stage5_infer_target",
    "tune",
    "validate_line",
]
