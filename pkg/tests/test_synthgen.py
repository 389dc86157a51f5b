from __future__ import annotations

import itertools
from dataclasses import replace

import numpy as np
import pytest
import shapely
from shapely.geometry import LineString, Point, Polygon

from qdtune import synthgen
from qdtune.synthgen import Fade, Oscillation, SynthConfig, SynthError, generate, make_profile


def bare(cfg: SynthConfig, **kw) -> SynthConfig:
    """Lines only: no background, oscillation or noise."""
    return replace(cfg, background_slope=0.0, background_osc=Oscillation(), noise_std=0.0, **kw)


# ---------------------------------------------------------------- profiles


def test_profile_values_from_dataset_table():
    assert make_profile("si-sg").slope_deg == 75
    assert make_profile("gaas").slope_deg == 45
    assert make_profile("si-og").slope_deg == -10
    assert make_profile("si-sg").spacing_v == pytest.approx(0.030)
    assert make_profile("gaas").spacing_v == pytest.approx(0.016)
    assert make_profile("si-og").spacing_v == pytest.approx(0.030)
    assert make_profile("si-og").use_last_line_validation is True
    assert make_profile("si-sg").use_last_line_validation is False


def test_profile_pixel_sizes_and_features():
    sg, ga, og = (make_profile(n) for n in ("si-sg", "gaas", "si-og"))
    assert (sg.pixel_size_v, ga.pixel_size_v, og.pixel_size_v) == (1e-3, 2.5e-3, 2e-3)
    assert sg.fade.probability == 0 and sg.background_osc.amplitude > 0
    assert ga.fade.probability > 0 and ga.curvature > 0
    assert og.fade.probability > 0 and og.noise_std > 0


def test_unknown_profile():
    with pytest.raises(SynthError, match="unknown profile"):
        make_profile("si-xx")


@pytest.mark.parametrize("name", synthgen.PROFILE_NAMES)
def test_every_profile_generates(name):
    d = generate(replace(make_profile(name), seed=5))
    labels = {r.label for r in d.regions}
    assert {"0", "1", "2"} <= labels
    assert len({line.index for line in d.lines}) >= 3


def test_dataset_profile_matches_config():
    cfg = make_profile("gaas")
    p = cfg.dataset_profile()
    assert p.prior_line_distance_v == cfg.spacing_v
    assert p.prior_slope_deg == cfg.slope_deg
    assert p.detection_offset_px == cfg.detection_offset_px
    assert p.use_last_line_validation is True


# ---------------------------------------------------------------- validation


def test_too_few_lines():
    cfg = replace(make_profile("si-sg"), width=60, height=60, spacing_v=0.05)
    with pytest.raises(SynthError, match="at least 3"):
        generate(cfg)


def test_invalid_configs():
    base = make_profile("si-sg")
    with pytest.raises(SynthError):
        generate(replace(base, width=40))
    with pytest.raises(SynthError):
        generate(replace(base, spacing_v=0.0))
    with pytest.raises(SynthError):
        generate(replace(base, empty_margin_v=0.03))


# ---------------------------------------------------------------- determinism


def test_same_seed_bit_identical():
    cfg = replace(make_profile("gaas"), seed=9)
    a, b = generate(cfg), generate(cfg)
    assert a.grid.tobytes() == b.grid.tobytes()
    assert a.lines == b.lines and a.regions == b.regions


def test_different_seeds_differ():
    cfg = make_profile("si-sg")
    assert generate(replace(cfg, seed=1)).grid.tobytes() != generate(replace(cfg, seed=2)).grid.tobytes()


def test_generate_many_ids_unique():
    ds = synthgen.generate_many(make_profile("si-og"), 4, seed=3)
    assert len({d.id for d in ds}) == 4
    again = synthgen.generate_many(make_profile("si-og"), 4, seed=3)
    assert [d.grid.tobytes() for d in ds] == [d.grid.tobytes() for d in again]


def test_zero_jitter_keeps_other_draws():
    # An oscillation without jitter must not consume an extra random draw.
    cfg = replace(make_profile("si-sg"), background_osc=Oscillation(0.6, 11.0, -35.0), seed=4)
    a = generate(cfg)
    b = generate(replace(cfg, background_osc=Oscillation(0.6, 11.0, -35.0, 0.0, 0.0)))
    assert a.grid.tobytes() == b.grid.tobytes()


# ---------------------------------------------------------------- labels vs signal


def row_crossings(line: LineString, y: float) -> list[float]:
    hit = line.intersection(LineString([(-1, y), (1e3, y)]))
    pts = [hit] if isinstance(hit, Point) else list(getattr(hit, "geoms", []))
    return [p.x for p in pts if isinstance(p, Point)]


def ridge_maxima(row: np.ndarray, floor: float) -> list[int]:
    return [
        i for i in range(1, len(row) - 1)
        if row[i] >= floor and row[i] >= row[i - 1] and row[i] > row[i + 1]
    ]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_labels_follow_ridge_crests(seed):
    cfg = bare(make_profile("si-sg"), seed=seed)
    d = generate(cfg)
    ps = d.pixel_size_v
    lines = [LineString(line.polyline) for line in d.lines]
    for y in range(0, d.height, 7):
        labeled = sorted(x / ps for line in lines for x in row_crossings(line, y * ps))
        crests = ridge_maxima(d.grid[y].astype(float), 0.5)
        # Each crest has a label within one pixel and each label a crest.
        for c in crests:
            assert min(abs(c - x) for x in labeled) <= 1.0
        for x in labeled:
            if 1 <= x <= d.width - 2:
                assert min(abs(c - x) for c in crests) <= 1.0


def test_fade_labels_match_amplitude():
    cfg = bare(make_profile("si-sg"), fade=Fade(probability=1.0, extent=0.4), seed=7)
    d = generate(cfg)
    ps = d.pixel_size_v
    assert any(r.label == "unknown" for r in d.regions)
    lines = [LineString(line.polyline) for line in d.lines]
    union = shapely.union_all(lines)
    # Every labeled vertex sits on a ridge that clears the cutoff (less the off-pixel loss).
    floor = synthgen.LABEL_CUTOFF * np.exp(-0.5 * (0.75 / cfg.line_width_px) ** 2) - 0.02
    for line in d.lines:
        for g1, g2 in LineString(line.polyline).segmentize(2 * ps).coords:
            x, y = int(round(g1 / ps)), int(round(g2 / ps))
            assert d.grid[y, x] >= floor
    # Every strong ridge crest is labeled.
    for y in range(d.height):
        for c in ridge_maxima(d.grid[y].astype(float), 0.35):
            assert union.distance(Point(c * ps, y * ps)) <= 1.5 * ps


def test_fade_truncates_labels():
    full = generate(bare(make_profile("si-sg"), seed=7))
    faded = generate(bare(make_profile("si-sg"), fade=Fade(probability=1.0, extent=0.4), seed=7))
    length = lambda d: sum(LineString(l.polyline).length for l in d.lines)
    assert length(faded) < length(full)


def test_fade_restricted_to_first_line():
    d = generate(bare(make_profile("si-og"), fade=Fade(1.0, 1.0, (1,)), seed=2))
    lo, hi = d.bounds_v
    edge = shapely.box(lo[0], lo[1], hi[0], hi[1]).exterior

    def on_edge(p):
        return edge.distance(Point(p)) < 1e-9

    for line in d.lines:
        ends = (line.polyline[0], line.polyline[-1])
        if line.index == 1:
            # The faded end of line 1 stops inside the diagram.
            assert not all(on_edge(p) for p in ends)
        else:
            assert all(on_edge(p) for p in ends)
    assert any(r.label == "unknown" for r in d.regions)


# ---------------------------------------------------------------- regions


@pytest.mark.parametrize("name", synthgen.PROFILE_NAMES)
def test_regions_tile_the_box(name):
    d = generate(replace(make_profile(name), seed=11))
    lo, hi = d.bounds_v
    box = shapely.box(lo[0], lo[1], hi[0], hi[1])
    polys = [(r.label, Polygon(r.polygon)) for r in d.regions]
    for _, p in polys:
        assert p.is_valid
    total = sum(p.area for _, p in polys)
    assert total == pytest.approx(box.area, rel=1e-3)
    for (la, a), (lb, b) in itertools.combinations(polys, 2):
        assert a.intersection(b).area <= 1e-6 * box.area


@pytest.mark.parametrize("name", synthgen.PROFILE_NAMES)
def test_empty_margin(name):
    cfg = replace(make_profile(name), seed=13)
    d = generate(cfg)
    lo, hi = d.bounds_v
    n = synthgen.line_normal(cfg.slope_deg)
    corners = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [lo[0], hi[1]], [hi[0], hi[1]]])
    s_lo = (corners @ n).min()
    for line in d.lines:
        s = np.asarray(line.polyline) @ n
        assert s.min() - s_lo >= cfg.margin_v - 1e-9


def test_region_order_follows_normal():
    cfg = bare(make_profile("si-sg"), seed=1)
    d = generate(cfg)
    n = synthgen.line_normal(cfg.slope_deg)
    mean_s = {}
    for r in d.regions:
        c = Polygon(r.polygon).centroid
        mean_s.setdefault(r.label, []).append(np.array([c.x, c.y]) @ n)
    order = [lab for lab in ("0", "1", "2", "3") if lab in mean_s]
    s = [np.mean(mean_s[lab]) for lab in order]
    assert s == sorted(s)


def test_hysteresis_toggle_changes_grid():
    cfg = replace(make_profile("si-og"), seed=3)
    a = generate(cfg)
    b = generate(replace(cfg, hysteresis_shift_px=3))
    assert a.grid.tobytes() != b.grid.tobytes()
    assert a.lines == b.lines


def test_line_normal_orientation():
    assert synthgen.line_normal(75)[0] > 0
    assert synthgen.line_normal(-10)[0] > 0
    assert synthgen.line_normal(0).tolist() == pytest.approx([0.0, 1.0])
    assert synthgen.line_normal(90).tolist() == pytest.approx([1.0, 0.0])
