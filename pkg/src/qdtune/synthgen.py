"""Synthetic single-dot stability diagrams with exact ground truth.

Transition lines are laid out in a rotated frame: ``u`` runs along the line
direction and ``s`` along the normal, which points toward more electrons
(see :func:`line_normal`). Each line is a curve ``s = s_k(u)``; the current
is a Gaussian ridge across every line plus background, a parasitic
oscillation and white noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import shapely
from shapely.geometry import LineString, Polygon

from .diagram import ChargeRegion, DatasetProfile, LineLabel, StabilityDiagram

# Amplitude fraction below which a fading line is left unlabeled.
LABEL_CUTOFF = 0.25
MIN_LINES = 3
_JITTER_CLIP = 0.4


class SynthError(ValueError):
    pass


def line_direction(slope_deg: float) -> np.ndarray:
    t = math.radians(slope_deg)
    return np.array([math.cos(t), math.sin(t)])


def line_normal(slope_deg: float) -> np.ndarray:
    """Unit normal of lines at ``slope_deg`` oriented toward higher G1.

    Exactly horizontal lines have no G1 component; their normal points to
    higher G2.
    """
    t = math.radians(slope_deg)
    n = np.array([math.sin(t), -math.cos(t)])
    if n[0] < -1e-12 or (abs(n[0]) <= 1e-12 and n[1] < 0):
        n = -n
    return n


@dataclass(frozen=True)
class Oscillation:
    """Periodic parasitic background whose phase advances along ``angle_deg``.

    With ``sharpness`` > 0 the sinusoid becomes a train of narrow crests,
    ``exp(sharpness * (cos - 1))``. ``angle_jitter_deg`` draws a uniform
    per-diagram offset of the angle.
    """

    amplitude: float = 0.0
    period_px: float = 12.0
    angle_deg: float = -35.0
    sharpness: float = 0.0
    angle_jitter_deg: float = 0.0


@dataclass(frozen=True)
class Fade:
    """Fading lines: amplitude ramps up from zero at one end of the line.

    ``extent`` is the fraction of the visible line length covered by the
    ramp. ``lines`` restricts fading to the given 1-based indices.
    """

    probability: float = 0.0
    extent: float = 0.5
    lines: tuple[int, ...] | None = None


@dataclass(frozen=True)
class SynthConfig:
    name: str = "custom"
    width: int = 150
    height: int = 150
    pixel_size_v: float = 1e-3
    slope_deg: float = 75.0
    spacing_v: float = 0.030
    spacing_jitter: float = 0.1
    line_amplitude: float = 1.0
    line_width_px: float = 1.5
    curvature: float = 0.0
    fade: Fade = field(default_factory=Fade)
    background_osc: Oscillation = field(default_factory=Oscillation)
    background_slope: float = 0.5
    noise_std: float = 0.05
    empty_margin_v: float | None = None
    hysteresis_shift_px: int = 0
    detection_offset_px: int = 6
    use_last_line_validation: bool = False
    patch_size_px: int = 18
    seed: int = 0

    @property
    def margin_v(self) -> float:
        return 2.2 * self.spacing_v if self.empty_margin_v is None else self.empty_margin_v

    def validate(self) -> None:
        if min(self.width, self.height) < 3 * self.patch_size_px:
            raise SynthError("width and height must be at least 3 patch sizes")
        if self.spacing_v <= 0 or self.pixel_size_v <= 0:
            raise SynthError("spacing_v and pixel_size_v must be positive")
        if self.margin_v < 2 * self.spacing_v:
            raise SynthError("empty_margin_v must be at least twice spacing_v")
        if not 0 <= self.fade.probability <= 1:
            raise SynthError("fade probability must be in [0, 1]")

    def dataset_profile(self) -> DatasetProfile:
        return DatasetProfile(
            name=self.name,
            pixel_size_v=self.pixel_size_v,
            detection_offset_px=self.detection_offset_px,
            prior_line_distance_v=self.spacing_v,
            prior_slope_deg=self.slope_deg,
            use_last_line_validation=self.use_last_line_validation,
            patch_size_px=self.patch_size_px,
        )


_PROFILES = {
    "si-sg": SynthConfig(
        name="si-sg",
        width=200,
        height=200,
        pixel_size_v=1e-3,
        slope_deg=75.0,
        spacing_v=0.030,
        line_width_px=1.5,
        # Narrow crests at a jittered angle mimic lines; they keep the patch task non-trivial.
        background_osc=Oscillation(
            amplitude=0.8, period_px=20.0, angle_deg=-35.0, sharpness=4.5, angle_jitter_deg=30.0
        ),
        noise_std=0.25,
        detection_offset_px=6,
        use_last_line_validation=False,
    ),
    "gaas": SynthConfig(
        name="gaas",
        width=100,
        height=100,
        pixel_size_v=2.5e-3,
        slope_deg=45.0,
        spacing_v=0.016,
        line_width_px=1.0,
        curvature=0.25,
        fade=Fade(probability=0.3, extent=0.6),
        background_osc=Oscillation(amplitude=0.1, period_px=25.0, angle_deg=20.0),
        noise_std=0.06,
        detection_offset_px=7,
        use_last_line_validation=True,
    ),
    "si-og": SynthConfig(
        name="si-og",
        width=120,
        height=120,
        pixel_size_v=2e-3,
        slope_deg=-10.0,
        spacing_v=0.030,
        line_width_px=1.8,
        curvature=0.1,
        fade=Fade(probability=0.2, extent=0.5),
        background_osc=Oscillation(amplitude=0.15, period_px=30.0, angle_deg=60.0),
        noise_std=0.12,
        hysteresis_shift_px=0,
        detection_offset_px=6,
        use_last_line_validation=True,
    ),
}

PROFILE_NAMES = tuple(_PROFILES)


def make_profile(name: str) -> SynthConfig:
    try:
        return _PROFILES[name]
    except KeyError:
        raise SynthError(f"unknown profile {name!r}; choose from {', '.join(_PROFILES)}") from None


def dataset_profile(name: str) -> DatasetProfile:
    return make_profile(name).dataset_profile()


# ---------------------------------------------------------------- layout


@dataclass(frozen=True)
class _Line:
    offset: float  # s at the bend center, volts
    bend: float  # s deviation at the ends of the u-range, volts
    fade_from: int  # 0 = not faded, +1 fades toward low u, -1 toward high u


class _Layout:
    """Line geometry of one diagram in the rotated (u, s) frame (volts)."""

    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.d = line_direction(cfg.slope_deg)
        self.n = line_normal(cfg.slope_deg)
        w = (cfg.width - 1) * cfg.pixel_size_v
        h = (cfg.height - 1) * cfg.pixel_size_v
        self.box_v = (0.0, 0.0, w, h)
        corners = np.array([[0, 0], [w, 0], [0, h], [w, h]])
        us, ss = corners @ self.d, corners @ self.n
        self.u_lo, self.u_hi = us.min(), us.max()
        self.s_lo, self.s_hi = ss.min(), ss.max()
        self.u_mid = (self.u_lo + self.u_hi) / 2
        self.u_half = max((self.u_hi - self.u_lo) / 2, 1e-12)

        bend_amp = cfg.curvature * cfg.spacing_v
        lines = []
        # Keep a line-free margin band above the lowest-voltage corner.
        s = self.s_lo + cfg.margin_v + abs(bend_amp) * 1.2 + rng.uniform(0, 0.5) * cfg.spacing_v
        eligible = set(cfg.fade.lines) if cfg.fade.lines is not None else None
        while s - abs(bend_amp) * 1.2 < self.s_hi:
            k = len(lines) + 1
            bend = bend_amp * rng.uniform(0.8, 1.2)
            fades = rng.random() < cfg.fade.probability and (eligible is None or k in eligible)
            fade_from = int(rng.choice([1, -1])) if fades else 0
            lines.append(_Line(s, bend, fade_from))
            s += cfg.spacing_v * (1 + self._jitter(rng))
        self.lines = lines

    def _jitter(self, rng: np.random.Generator) -> float:
        sd = self.cfg.spacing_jitter
        if sd <= 0:
            return 0.0
        while True:
            z = rng.normal(0, sd)
            if abs(z) <= _JITTER_CLIP:
                return z

    def s_of(self, line: _Line, u: np.ndarray) -> np.ndarray:
        return line.offset + line.bend * ((u - self.u_mid) / self.u_half) ** 2

    def point(self, u, s) -> np.ndarray:
        u = np.asarray(u, dtype=float)[..., None]
        s = np.asarray(s, dtype=float)[..., None]
        return u * self.d + s * self.n

    def curve(self, line: _Line, pad: float = 0.0, step: float | None = None) -> np.ndarray:
        step = step or self.cfg.pixel_size_v / 2
        u = np.arange(self.u_lo - pad, self.u_hi + pad + step, step)
        return self.point(u, self.s_of(line, u))

    def chord(self, line: _Line) -> tuple[float, float] | None:
        """u-range of the in-box part of a line, or None if it misses the box."""
        box = shapely.box(*self.box_v)
        clipped = LineString(self.curve(line)).intersection(box)
        if clipped.is_empty or clipped.length == 0:
            return None
        coords = np.array(
            [c for g in getattr(clipped, "geoms", [clipped]) for c in g.coords]
        )
        u = coords @ self.d
        return float(u.min()), float(u.max())

    def envelope(self, line: _Line, u: np.ndarray, chord: tuple[float, float]) -> np.ndarray:
        if not line.fade_from:
            return np.ones_like(u)
        ua, ub = chord
        t = (u - ua) / (ub - ua) if line.fade_from > 0 else (ub - u) / (ub - ua)
        return np.clip(t / self.cfg.fade.extent, 0.0, 1.0) ** 2

    def faded_u_range(self, line: _Line, chord: tuple[float, float]) -> tuple[float, float] | None:
        """u-interval (unbounded on the faded side) where the line is unlabeled."""
        if not line.fade_from:
            return None
        ua, ub = chord
        cut = math.sqrt(LABEL_CUTOFF) * self.cfg.fade.extent * (ub - ua)
        big = 10 * (self.u_hi - self.u_lo + 1)
        if line.fade_from > 0:
            return ua - big, ua + cut
        return ub - cut, ub + big


# ---------------------------------------------------------------- generation


def _polygons(geom) -> list[Polygon]:
    if geom.is_empty:
        return []
    if isinstance(geom, Polygon):
        return [geom] if geom.area > 0 else []
    return [p for g in getattr(geom, "geoms", []) for p in _polygons(g)]


def _clamp_coords(coords, box) -> tuple[tuple[float, float], ...]:
    x0, y0, x1, y1 = box
    return tuple((min(max(x, x0), x1), min(max(y, y0), y1)) for x, y in coords)


def generate(cfg: SynthConfig) -> StabilityDiagram:
    """Render a diagram and its line/region labels from ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    lay = _Layout(cfg, rng)
    ps = cfg.pixel_size_v
    box = shapely.box(*lay.box_v)

    visible = []
    for line in lay.lines:
        chord = lay.chord(line)
        if chord is not None and chord[1] - chord[0] > ps:
            visible.append((line, chord))
    if len(visible) < MIN_LINES:
        raise SynthError(
            f"only {len(visible)} transition lines fit in the diagram; at least {MIN_LINES} required"
        )

    # Pixel coordinates in volts relative to the origin corner.
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width].astype(float)
    if cfg.hysteresis_shift_px:
        band = slice(int(0.6 * cfg.height), cfg.height)
        xx = xx.copy()
        xx[band] += cfg.hysteresis_shift_px
    gv = np.stack([xx * ps, yy * ps], axis=-1)
    u_pix = gv @ lay.d
    s_pix = gv @ lay.n

    field_ = cfg.background_slope * (xx / cfg.width + 0.5 * yy / cfg.height)
    osc = cfg.background_osc
    if osc.amplitude:
        angle = osc.angle_deg
        if osc.angle_jitter_deg:
            angle += rng.uniform(-1, 1) * osc.angle_jitter_deg
        e = line_direction(angle)
        phase = rng.uniform(0, 2 * math.pi)
        wave = 2 * math.pi * (xx * e[0] + yy * e[1]) / osc.period_px + phase
        if osc.sharpness > 0:
            field_ = field_ + osc.amplitude * np.exp(osc.sharpness * (np.cos(wave) - 1))
        else:
            field_ = field_ + osc.amplitude * np.sin(wave)
    for line, chord in visible:
        dist_px = (s_pix - lay.s_of(line, u_pix)) / ps
        env = lay.envelope(line, u_pix, chord)
        field_ = field_ + cfg.line_amplitude * env * np.exp(-0.5 * (dist_px / cfg.line_width_px) ** 2)
    if cfg.noise_std:
        field_ = field_ + rng.normal(0, cfg.noise_std, size=field_.shape)

    # Line labels follow the crest where the envelope clears the cutoff.
    labels = []
    faded_zones = []
    pad = (lay.s_hi - lay.s_lo) + 10 * cfg.spacing_v
    for k, (line, chord) in enumerate(visible, start=1):
        curve = LineString(lay.curve(line))
        fr = lay.faded_u_range(line, chord)
        if fr is not None:
            curve = curve.difference(_uv_polygon(lay, fr, (lay.s_lo - pad, lay.s_hi + pad)))
            # Ambiguity spans the neighbouring bands, one spacing on open sides.
            below = visible[k - 2][0] if k >= 2 else replace(line, offset=line.offset - cfg.spacing_v)
            above = visible[k][0] if k < len(visible) else replace(line, offset=line.offset + cfg.spacing_v)
            faded_zones.append(_band(lay, below, above, pad, urange=fr))
        clipped = curve.intersection(box).simplify(ps * 0.02)
        for piece in getattr(clipped, "geoms", [clipped]):
            if piece.is_empty or not isinstance(piece, LineString) or len(piece.coords) < 2:
                continue
            labels.append(LineLabel(_clamp_coords(piece.coords, lay.box_v), k))

    unknown = shapely.union_all(faded_zones).intersection(box) if faded_zones else None
    regions = []
    region_labels = ["0", "1", "2", "3"] + ["4+"] * len(visible)
    bounds = [None] + [line for line, _ in visible] + [None]
    for k in range(len(visible) + 1):
        label = region_labels[k] if k < 4 else "4+"
        band = _band(lay, bounds[k], bounds[k + 1], pad).intersection(box)
        if unknown is not None:
            band = band.difference(unknown)
        for poly in _polygons(band):
            regions.append(ChargeRegion(_clamp_coords(poly.exterior.coords[:-1], lay.box_v), label))
    if unknown is not None:
        for poly in _polygons(unknown):
            regions.append(ChargeRegion(_clamp_coords(poly.exterior.coords[:-1], lay.box_v), "unknown"))
    regions = _merge_4plus(regions)

    return StabilityDiagram(
        grid=field_.astype(np.float32),
        pixel_size_v=ps,
        origin_v=(0.0, 0.0),
        lines=tuple(labels),
        regions=tuple(regions),
        id=f"{cfg.name}-{cfg.seed}",
    )


def _merge_4plus(regions: list[ChargeRegion]) -> list[ChargeRegion]:
    plus = [Polygon(r.polygon) for r in regions if r.label == "4+"]
    if len(plus) <= 1:
        return regions
    merged = _polygons(shapely.union_all(plus).buffer(0))
    rest = [r for r in regions if r.label != "4+"]
    return rest + [ChargeRegion(tuple(p.exterior.coords[:-1]), "4+") for p in merged]


def _uv_polygon(lay: _Layout, urange, srange) -> Polygon:
    (u0, u1), (s0, s1) = urange, srange
    pts = lay.point([u0, u1, u1, u0], [s0, s0, s1, s1])
    return Polygon(pts)


def _band(lay: _Layout, lower: _Line | None, upper: _Line | None, pad: float, urange=None) -> Polygon:
    """Polygon between two line curves (None = beyond the diagram)."""
    step = lay.cfg.pixel_size_v / 2
    if urange is None:
        u0, u1 = lay.u_lo - pad, lay.u_hi + pad
    else:
        u0 = max(urange[0], lay.u_lo - pad)
        u1 = min(urange[1], lay.u_hi + pad)
    u = np.append(np.arange(u0, u1, step), u1)
    s_low = lay.s_of(lower, u) if lower is not None else np.full_like(u, lay.s_lo - pad)
    s_up = lay.s_of(upper, u) if upper is not None else np.full_like(u, lay.s_hi + pad)
    pts = np.concatenate([lay.point(u, s_low), lay.point(u[::-1], s_up[::-1])])
    return Polygon(pts).buffer(0)


def generate_many(cfg: SynthConfig, count: int, seed: int) -> list[StabilityDiagram]:
    """``count`` diagrams with per-diagram seeds spawned from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [generate(replace(cfg, seed=int(s))) for s in seeds]
