"""Stability diagrams: data model, interchange I/O, patches and labels.

Coordinates follow two conventions:

* pixel space: ``(x, y)`` with ``x`` the column (gate G1) and ``y`` the row
  (gate G2); row 0 holds the lowest G2 voltage.
* voltage space: ``(g1, g2)`` in volts, pixel ``(x, y)`` sits at
  ``origin_v + (x, y) * pixel_size_v``.

The interchange format is a JSON manifest plus a raw little-endian float32
grid file, written row-major with the bottom row first.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import shapely
from shapely.geometry import Point, Polygon

LINE = "line"
NO_LINE = "no-line"

REGION_LABELS = ("0", "1", "2", "3", "4+", "unknown")
# Boundary ties resolve toward the first label in this order.
_LABEL_PRIORITY = {label: i for i, label in enumerate(REGION_LABELS)}

MANIFEST_SUFFIX = ".json"
GRID_SUFFIX = ".f32"


class DiagramError(ValueError):
    """Raised for malformed diagrams or manifests."""


class Rect(NamedTuple):
    """Square pixel window; ``(x, y)`` is its lowest-voltage corner."""

    x: int
    y: int
    side: int

    @property
    def center(self) -> tuple[float, float]:
        half = (self.side - 1) / 2
        return self.x + half, self.y + half


@dataclass(frozen=True)
class LineLabel:
    polyline: tuple[tuple[float, float], ...]
    index: int

    def __post_init__(self):
        object.__setattr__(self, "polyline", tuple((float(a), float(b)) for a, b in self.polyline))
        if len(self.polyline) < 2:
            raise DiagramError(f"line {self.index}: polyline needs at least 2 vertices")
        if self.index < 1:
            raise DiagramError(f"line index must be >= 1, got {self.index}")


@dataclass(frozen=True)
class ChargeRegion:
    polygon: tuple[tuple[float, float], ...]
    label: str

    def __post_init__(self):
        object.__setattr__(self, "polygon", tuple((float(a), float(b)) for a, b in self.polygon))
        if self.label not in REGION_LABELS:
            raise DiagramError(f"unknown region label {self.label!r}")
        if len(self.polygon) < 3:
            raise DiagramError(f"region {self.label}: polygon needs at least 3 vertices")


@dataclass(frozen=True)
class DatasetProfile:
    """Per-dataset constants used for labeling patches and for tuning priors."""

    name: str
    pixel_size_v: float
    detection_offset_px: int
    prior_line_distance_v: float
    prior_slope_deg: float
    use_last_line_validation: bool
    patch_size_px: int = 18
    patch_overlap_px: int = 10

    def __post_init__(self):
        if self.pixel_size_v <= 0:
            raise DiagramError("pixel_size_v must be positive")
        if self.detection_offset_px < 0:
            raise DiagramError("detection_offset_px must be non-negative")
        if not 0 <= self.patch_overlap_px < self.patch_size_px:
            raise DiagramError("patch overlap must satisfy 0 <= overlap < patch size")

    @property
    def stride_px(self) -> int:
        return self.patch_size_px - self.patch_overlap_px


@dataclass(frozen=True)
class PatchSample:
    values: np.ndarray
    rect: Rect
    category: str
    diagram_id: str


@dataclass(frozen=True, eq=False)
class StabilityDiagram:
    """Current map over two gate voltages, with ground-truth annotations.

    ``grid`` has shape ``(height, width)`` and dtype float32; it is made
    read-only on construction.
    """

    grid: np.ndarray
    pixel_size_v: float
    origin_v: tuple[float, float]
    lines: tuple[LineLabel, ...] = ()
    regions: tuple[ChargeRegion, ...] = ()
    id: str = "diagram"

    def __post_init__(self):
        grid = np.array(self.grid, dtype=np.float32, copy=True)
        if grid.ndim != 2:
            raise DiagramError(f"grid must be 2-D, got shape {grid.shape}")
        bad = np.argwhere(~np.isfinite(grid))
        if bad.size:
            i, j = bad[0]
            raise DiagramError(f"non-finite value at ({int(i)},{int(j)})")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "origin_v", (float(self.origin_v[0]), float(self.origin_v[1])))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "regions", tuple(self.regions))
        if not self.pixel_size_v > 0:
            raise DiagramError("pixel_size_v must be positive")
        lo, hi = self.bounds_v
        for line in self.lines:
            for k, (g1, g2) in enumerate(line.polyline):
                if not (lo[0] <= g1 <= hi[0] and lo[1] <= g2 <= hi[1]):
                    raise DiagramError(
                        f"line {line.index} vertex {k} ({g1}, {g2}) out of bounds"
                    )

    @property
    def width(self) -> int:
        return int(self.grid.shape[1])

    @property
    def height(self) -> int:
        return int(self.grid.shape[0])

    @property
    def bounds_v(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """Lowest and highest voltage corners (pixel centers)."""
        g1, g2 = self.origin_v
        return (g1, g2), (
            g1 + (self.width - 1) * self.pixel_size_v,
            g2 + (self.height - 1) * self.pixel_size_v,
        )

    def to_voltage(self, x: float, y: float) -> tuple[float, float]:
        return (
            self.origin_v[0] + x * self.pixel_size_v,
            self.origin_v[1] + y * self.pixel_size_v,
        )

    def to_pixel(self, g1: float, g2: float) -> tuple[float, float]:
        return (
            (g1 - self.origin_v[0]) / self.pixel_size_v,
            (g2 - self.origin_v[1]) / self.pixel_size_v,
        )

    def contains_rect(self, rect: Rect) -> bool:
        return (
            rect.x >= 0
            and rect.y >= 0
            and rect.x + rect.side <= self.width
            and rect.y + rect.side <= self.height
        )

    def patch(self, rect: Rect) -> np.ndarray:
        if not self.contains_rect(rect):
            raise DiagramError(f"{rect} is outside the {self.width}x{self.height} diagram")
        return self.grid[rect.y:rect.y + rect.side, rect.x:rect.x + rect.side]

    @cached_property
    def segments(self) -> np.ndarray:
        """All label segments as an ``(n, 4)`` array of ``g1a, g2a, g1b, g2b``."""
        segs = [
            (a[0], a[1], b[0], b[1])
            for line in self.lines
            for a, b in zip(line.polyline[:-1], line.polyline[1:])
        ]
        return np.asarray(segs, dtype=float).reshape(-1, 4)

    @cached_property
    def _region_shapes(self) -> list[tuple[str, Polygon]]:
        shapes = []
        for region in sorted(self.regions, key=lambda r: _LABEL_PRIORITY[r.label]):
            if region.label == "unknown":
                continue
            poly = Polygon(region.polygon)
            shapely.prepare(poly)
            shapes.append((region.label, poly))
        return shapes

    def region_area_fraction(self, label: str) -> float:
        """Exact fraction of the voltage box covered by regions with ``label``."""
        lo, hi = self.bounds_v
        box = shapely.box(lo[0], lo[1], hi[0], hi[1])
        polys = [Polygon(r.polygon) for r in self.regions if r.label == label]
        if not polys:
            return 0.0
        return shapely.union_all(polys).intersection(box).area / box.area


# ---------------------------------------------------------------- I/O


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_diagram(d: StabilityDiagram, path: str | os.PathLike) -> Path:
    """Write ``d`` as ``<path>`` (manifest) plus a sibling ``.f32`` grid file.

    Returns the manifest path.
    """
    path = Path(path)
    if path.suffix != MANIFEST_SUFFIX:
        path = path.with_suffix(MANIFEST_SUFFIX)
    grid_path = path.with_suffix(GRID_SUFFIX)
    manifest = {
        "id": d.id,
        "width": d.width,
        "height": d.height,
        "pixel_size_v": d.pixel_size_v,
        "origin_v": list(d.origin_v),
        "grid_file": grid_path.name,
        "lines": [
            {"index": line.index, "polyline": [list(v) for v in line.polyline]}
            for line in d.lines
        ],
        "regions": [
            {"label": r.label, "polygon": [list(v) for v in r.polygon]} for r in d.regions
        ],
    }
    atomic_write(grid_path, d.grid.astype("<f4").tobytes(order="C"))
    atomic_write(path, json.dumps(manifest, indent=1).encode())
    return path


def _field(manifest: dict, name: str, kind):
    if name not in manifest:
        raise DiagramError(f"manifest field {name!r} is missing")
    value = manifest[name]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise DiagramError(f"manifest field {name!r} has the wrong type ({type(value).__name__})")
    return value


def _points(raw, where: str) -> list[tuple[float, float]]:
    try:
        pts = [(float(p[0]), float(p[1])) for p in raw]
        if any(len(p) != 2 for p in raw):
            raise ValueError
    except (TypeError, ValueError, IndexError):
        raise DiagramError(f"{where}: expected a list of [g1, g2] pairs") from None
    if not all(math.isfinite(a) and math.isfinite(b) for a, b in pts):
        raise DiagramError(f"{where}: non-finite coordinate")
    return pts


def load_diagram(path: str | os.PathLike) -> StabilityDiagram:
    """Load and validate a diagram from its manifest path."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DiagramError(f"{path}: malformed manifest at offset {exc.pos}: {exc.msg}") from exc
    if not isinstance(manifest, dict):
        raise DiagramError(f"{path}: manifest must be a JSON object")

    width = _field(manifest, "width", int)
    height = _field(manifest, "height", int)
    pixel_size = manifest.get("pixel_size_v")
    if isinstance(pixel_size, list):
        if len(pixel_size) != 2 or pixel_size[0] != pixel_size[1]:
            raise DiagramError("anisotropic pixel size is not supported")
        manifest["pixel_size_v"] = pixel_size[0]
    pixel_size = _field(manifest, "pixel_size_v", float)
    origin = _points([_field(manifest, "origin_v", list)], "origin_v")[0]
    grid_file = path.parent / _field(manifest, "grid_file", str)

    raw = np.fromfile(grid_file, dtype="<f4")
    if raw.size != width * height:
        raise DiagramError(
            f"grid size mismatch: {grid_file.name} holds {raw.size} values, "
            f"expected {width}x{height}={width * height}"
        )
    grid = raw.reshape(height, width).astype(np.float32)

    lines = []
    for k, item in enumerate(_field(manifest, "lines", list)):
        if not isinstance(item, dict) or "index" not in item or "polyline" not in item:
            raise DiagramError(f"lines[{k}]: expected {{'index', 'polyline'}}")
        lines.append(LineLabel(tuple(_points(item["polyline"], f"lines[{k}].polyline")), int(item["index"])))
    regions = []
    for k, item in enumerate(_field(manifest, "regions", list)):
        if not isinstance(item, dict) or "label" not in item or "polygon" not in item:
            raise DiagramError(f"regions[{k}]: expected {{'label', 'polygon'}}")
        regions.append(ChargeRegion(tuple(_points(item["polygon"], f"regions[{k}].polygon")), str(item["label"])))

    return StabilityDiagram(
        grid=grid,
        pixel_size_v=pixel_size,
        origin_v=origin,
        lines=tuple(lines),
        regions=tuple(regions),
        id=_field(manifest, "id", str),
    )


def list_manifests(directory: str | os.PathLike) -> list[Path]:
    return sorted(Path(directory).glob(f"*{MANIFEST_SUFFIX}"))


# ---------------------------------------------------------------- patches


def normalize_patch(raw: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant patch maps to zeros."""
    raw = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(raw)):
        raise ValueError("patch contains non-finite values")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def detection_square_v(
    d: StabilityDiagram, rect: Rect, detection_offset_px: int
) -> tuple[float, float, float, float]:
    """Inset detection square of ``rect`` as ``(g1_lo, g2_lo, g1_hi, g2_hi)``.

    An offset that would invert the square collapses it to the patch center.
    """
    lo = detection_offset_px
    hi = rect.side - 1 - detection_offset_px
    if hi < lo:
        lo = hi = (rect.side - 1) / 2
    g1a, g2a = d.to_voltage(rect.x + lo, rect.y + lo)
    g1b, g2b = d.to_voltage(rect.x + hi, rect.y + hi)
    return g1a, g2a, g1b, g2b


def segments_hit_box(segments: np.ndarray, box: Sequence[float]) -> np.ndarray:
    """Closed segment/axis-aligned box intersection (Liang-Barsky), vectorized.

    ``segments`` is ``(n, 4)``; ``box`` is ``(xmin, ymin, xmax, ymax)``.
    Returns a boolean array of length ``n``.
    """
    segments = np.asarray(segments, dtype=float).reshape(-1, 4)
    xmin, ymin, xmax, ymax = box
    x0, y0 = segments[:, 0], segments[:, 1]
    dx = segments[:, 2] - x0
    dy = segments[:, 3] - y0
    t0 = np.zeros(len(segments))
    t1 = np.ones(len(segments))
    ok = np.ones(len(segments), dtype=bool)
    for p, q in ((-dx, x0 - xmin), (dx, xmax - x0), (-dy, y0 - ymin), (dy, ymax - y0)):
        parallel = p == 0
        ok &= ~(parallel & (q < 0))
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            r = np.where(parallel, 0.0, q / np.where(parallel, 1.0, p))
        entering = (p < 0) & ~parallel
        leaving = (p > 0) & ~parallel
        t0 = np.where(entering, np.maximum(t0, r), t0)
        t1 = np.where(leaving, np.minimum(t1, r), t1)
    return ok & (t0 <= t1)


def assign_category(d: StabilityDiagram, rect: Rect, detection_offset_px: int) -> str:
    """``line`` iff a label segment touches the closed detection square."""
    segs = d.segments
    if not len(segs):
        return NO_LINE
    box = detection_square_v(d, rect, detection_offset_px)
    # Cheap bounding-box prefilter before the exact clip.
    near = (
        (np.minimum(segs[:, 0], segs[:, 2]) <= box[2])
        & (np.maximum(segs[:, 0], segs[:, 2]) >= box[0])
        & (np.minimum(segs[:, 1], segs[:, 3]) <= box[3])
        & (np.maximum(segs[:, 1], segs[:, 3]) >= box[1])
    )
    if not near.any():
        return NO_LINE
    return LINE if segments_hit_box(segs[near], box).any() else NO_LINE


def patch_grid_origins(extent: int, patch_size: int, stride: int) -> list[int]:
    if extent < patch_size:
        raise DiagramError(f"diagram extent {extent} is smaller than the patch size {patch_size}")
    return list(range(0, extent - patch_size + 1, stride))


def extract_patches(d: StabilityDiagram, profile: DatasetProfile) -> list[PatchSample]:
    """Sweep a square window from the origin and label every full patch."""
    side = profile.patch_size_px
    xs = patch_grid_origins(d.width, side, profile.stride_px)
    ys = patch_grid_origins(d.height, side, profile.stride_px)
    patches = []
    for y in ys:
        for x in xs:
            rect = Rect(x, y, side)
            patches.append(
                PatchSample(
                    values=normalize_patch(d.patch(rect)),
                    rect=rect,
                    category=assign_category(d, rect, profile.detection_offset_px),
                    diagram_id=d.id,
                )
            )
    return patches


# ---------------------------------------------------------------- regions


def region_at(d: StabilityDiagram, point: tuple[float, float]) -> str:
    """Charge-region label at a voltage point; ``unknown`` when unlabeled."""
    lo, hi = d.bounds_v
    g1, g2 = point
    if not (lo[0] <= g1 <= hi[0] and lo[1] <= g2 <= hi[1]):
        raise DiagramError(f"point ({g1}, {g2}) is outside the diagram")
    p = Point(g1, g2)
    for label, poly in d._region_shapes:
        if poly.covers(p):
            return label
    return "unknown"
