from __future__ import annotations

import json

import numpy as np
import pytest
import shapely
from hypothesis import given, settings, strategies as st
from shapely.geometry import LineString

from qdtune.diagram import (
    LINE,
    NO_LINE,
    ChargeRegion,
    DatasetProfile,
    DiagramError,
    LineLabel,
    Rect,
    StabilityDiagram,
    assign_category,
    detection_square_v,
    extract_patches,
    load_diagram,
    normalize_patch,
    patch_grid_origins,
    region_at,
    save_diagram,
    segments_hit_box,
)

from conftest import make_blank, vertical_lines_diagram


def profile(offset=6, overlap=10):
    return DatasetProfile("t", 1e-3, offset, 0.03, 75.0, False, 18, overlap)


def assert_same(a: StabilityDiagram, b: StabilityDiagram):
    assert a.id == b.id
    assert a.pixel_size_v == b.pixel_size_v
    assert a.origin_v == b.origin_v
    assert a.grid.tobytes() == b.grid.tobytes()
    assert a.lines == b.lines
    assert a.regions == b.regions


def test_roundtrip_generated(tmp_path, small_diagram):
    path = save_diagram(small_diagram, tmp_path / "d.json")
    assert_same(load_diagram(path), small_diagram)


def test_roundtrip_empty_lines(tmp_path):
    d = make_blank(30, 20)
    back = load_diagram(save_diagram(d, tmp_path / "blank.json"))
    assert back.lines == ()
    assert back.width == 30 and back.height == 20


def test_grid_file_layout(tmp_path):
    grid = np.arange(6, dtype=np.float32).reshape(2, 3)
    d = StabilityDiagram(grid, 1e-3, (0.0, 0.0))
    path = save_diagram(d, tmp_path / "g.json")
    raw = np.fromfile(tmp_path / "g.f32", dtype="<f4")
    # Row 0 (lowest G2) first.
    assert raw.tolist() == [0, 1, 2, 3, 4, 5]
    manifest = json.loads(path.read_text())
    assert manifest["width"] == 3 and manifest["height"] == 2


def test_load_100x100_with_three_lines(tmp_path):
    d = vertical_lines_diagram([20, 50, 80], width=100, height=100)
    back = load_diagram(save_diagram(d, tmp_path / "v.json"))
    assert (back.width, back.height, len(back.lines)) == (100, 100, 3)


def test_grid_size_mismatch(tmp_path):
    path = save_diagram(make_blank(100, 100), tmp_path / "m.json")
    np.zeros(99 * 100, dtype="<f4").tofile(tmp_path / "m.f32")
    with pytest.raises(DiagramError, match="grid size mismatch"):
        load_diagram(path)


def test_nan_in_grid(tmp_path):
    path = save_diagram(make_blank(10, 10), tmp_path / "n.json")
    raw = np.zeros(100, dtype="<f4")
    raw[2 * 10 + 3] = np.nan
    raw.tofile(tmp_path / "n.f32")
    with pytest.raises(DiagramError, match=r"non-finite value at \(2,3\)"):
        load_diagram(path)


def test_vertex_out_of_bounds():
    with pytest.raises(DiagramError, match="out of bounds"):
        make_blank(10, 10, lines=[LineLabel(((0.0, 0.0), (0.5, 0.0)), 1)])


def test_malformed_manifest(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"id": "x", "width": ')
    with pytest.raises(DiagramError, match="offset"):
        load_diagram(p)


def test_missing_field(tmp_path):
    path = save_diagram(make_blank(10, 10), tmp_path / "f.json")
    m = json.loads(path.read_text())
    del m["pixel_size_v"]
    path.write_text(json.dumps(m))
    with pytest.raises(DiagramError, match="pixel_size_v"):
        load_diagram(path)


def test_anisotropic_rejected(tmp_path):
    path = save_diagram(make_blank(10, 10), tmp_path / "a.json")
    m = json.loads(path.read_text())
    m["pixel_size_v"] = [1e-3, 2e-3]
    path.write_text(json.dumps(m))
    with pytest.raises(DiagramError, match="anisotropic"):
        load_diagram(path)


def test_save_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        save_diagram(make_blank(10, 10), blocker / "sub" / "d.json")


def test_bad_line_and_region():
    with pytest.raises(DiagramError):
        LineLabel(((0.0, 0.0),), 1)
    with pytest.raises(DiagramError):
        LineLabel(((0.0, 0.0), (1.0, 1.0)), 0)
    with pytest.raises(DiagramError):
        ChargeRegion(((0, 0), (1, 0), (1, 1)), "5")


def test_diagram_is_read_only(small_diagram):
    with pytest.raises(ValueError):
        small_diagram.grid[0, 0] = 1.0


# ---------------------------------------------------------------- patches


def test_patch_count_100():
    d = make_blank(100, 100)
    patches = extract_patches(d, profile())
    assert len(patches) == 121
    assert patches[0].rect == Rect(0, 0, 18)


def test_patch_count_18():
    patches = extract_patches(make_blank(18, 18), profile())
    assert [p.rect for p in patches] == [Rect(0, 0, 18)]


def test_patch_too_small():
    with pytest.raises(DiagramError):
        extract_patches(make_blank(17, 100), profile())


@given(st.integers(1, 40), st.integers(0, 60), st.integers(1, 12))
def test_patch_count_formula(size, extra, stride):
    extent = size + extra
    assert len(patch_grid_origins(extent, size, stride)) == (extent - size) // stride + 1


def test_patch_values_normalized(small_diagram):
    patches = extract_patches(small_diagram, profile())
    for p in patches:
        assert p.values.shape == (18, 18)
        assert p.values.min() >= 0 and p.values.max() <= 1
        assert small_diagram.contains_rect(p.rect)
        assert p.diagram_id == small_diagram.id


def test_normalize_examples():
    assert normalize_patch(np.array([1.0, 3.0, 5.0])).tolist() == [0.0, 0.5, 1.0]
    assert normalize_patch(np.array([7.0, 7.0, 7.0])).tolist() == [0.0, 0.0, 0.0]
    assert normalize_patch(np.array([0.0, 0.25, 1.0])).tolist() == [0.0, 0.25, 1.0]
    assert normalize_patch(np.array([0.1, 0.5, 0.9])).tolist() != [0.1, 0.5, 0.9]


def test_normalize_rejects_nan():
    with pytest.raises(ValueError):
        normalize_patch(np.array([1.0, np.inf]))


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=50))
def test_normalize_range(values):
    out = normalize_patch(np.array(values))
    assert out.min() >= 0 and out.max() <= 1
    if max(values) > min(values):
        assert out.min() == 0 and out.max() == 1


# ---------------------------------------------------------------- categories


def test_category_center_line():
    d = vertical_lines_diagram([29], width=60, height=60)
    # Patch [20, 37]: center column 28.5; detection square columns 26..31.
    assert assign_category(d, Rect(20, 20, 18), 6) == LINE


def test_category_margin_only():
    d = vertical_lines_diagram([22], width=60, height=60)
    # Column 22 is in the outer 6-pixel margin of the patch starting at 20.
    assert assign_category(d, Rect(20, 20, 18), 6) == NO_LINE
    assert assign_category(d, Rect(20, 20, 18), 2) == LINE


def test_category_closed_boundary():
    d = vertical_lines_diagram([26], width=60, height=60)
    assert assign_category(d, Rect(20, 20, 18), 6) == LINE
    d = vertical_lines_diagram([31], width=60, height=60)
    assert assign_category(d, Rect(20, 20, 18), 6) == LINE
    d = vertical_lines_diagram([32], width=60, height=60)
    assert assign_category(d, Rect(20, 20, 18), 6) == NO_LINE


def test_category_no_lines():
    d = make_blank(60, 60)
    assert all(p.category == NO_LINE for p in extract_patches(d, profile()))


def test_detection_square_extent():
    d = make_blank(60, 60)
    box = detection_square_v(d, Rect(0, 0, 18), 6)
    assert box == pytest.approx((0.006, 0.006, 0.011, 0.011))


seg = st.tuples(*[st.floats(-2, 3, allow_nan=False)] * 4)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@settings(max_examples=300)
@given(st.lists(seg, min_size=1, max_size=10), st.floats(-1, 1), st.floats(-1, 1), st.floats(0.01, 1.5))
def test_segment_clip_matches_shapely(segs, x0, y0, size):
    box = (x0, y0, x0 + size, y0 + size)
    got = segments_hit_box(np.array(segs), box)
    b = shapely.box(*box)
    for (a, c, e, f), hit in zip(segs, got):
        geom = LineString([(a, c), (e, f)]) if (a, c) != (e, f) else shapely.Point(a, c)
        exact = b.intersects(geom)
        # Exact boundary contacts may differ by float rounding; check away from it.
        if b.exterior.distance(geom) > 1e-9 or b.contains(geom):
            assert hit == exact


@given(st.integers(0, 30), st.integers(0, 8), st.integers(0, 8))
def test_category_monotone_in_offset(column, small, extra):
    d = vertical_lines_diagram([column + 5], width=60, height=30)
    big = small + extra
    rect = Rect(10, 5, 18)
    if assign_category(d, rect, big) == LINE:
        assert assign_category(d, rect, small) == LINE


# ---------------------------------------------------------------- regions


def test_region_examples():
    d = vertical_lines_diagram([20, 40, 60, 80], width=120, height=120)
    assert region_at(d, (0.030, 0.05)) == "1"
    assert region_at(d, (0.010, 0.05)) == "0"
    assert region_at(d, (0.100, 0.05)) == "4+"


def test_region_gap_is_unknown():
    top = 0.059
    regions = [
        ChargeRegion(((0, 0), (0.02, 0), (0.02, top), (0, top)), "0"),
        ChargeRegion(((0.04, 0), (0.059, 0), (0.059, top), (0.04, top)), "1"),
    ]
    d = make_blank(60, 60, regions=regions)
    assert region_at(d, (0.03, 0.03)) == "unknown"


def test_region_boundary_tie_goes_to_lower_label():
    d = vertical_lines_diagram([30], width=60, height=60)
    assert region_at(d, (0.030, 0.02)) == "0"


def test_region_out_of_bounds(small_diagram):
    with pytest.raises(DiagramError):
        region_at(small_diagram, (-1.0, 0.0))


def test_region_centroid_of_one(small_diagram):
    polys = [shapely.Polygon(r.polygon) for r in small_diagram.regions if r.label == "1"]
    assert polys
    p = polys[0].representative_point()
    assert region_at(small_diagram, (p.x, p.y)) == "1"


@given(st.floats(0, 1), st.floats(0, 1))
def test_region_deterministic(a, b):
    d = vertical_lines_diagram([20, 40, 60, 80], width=120, height=120)
    lo, hi = d.bounds_v
    p = (lo[0] + a * (hi[0] - lo[0]), lo[1] + b * (hi[1] - lo[1]))
    assert region_at(d, p) == region_at(d, p)
    assert region_at(d, p) in ("0", "1", "2", "3", "4+", "unknown")
