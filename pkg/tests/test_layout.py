"""Tests for rect-list designs, rasterization and the layout generator"""

import itertools

import numpy as np
import pytest

from layout import (
    METAL_LIKE,
    VIA_LIKE,
    GeneratorSpec,
    InfeasibleSpecError,
    LayoutError,
    LayoutRaster,
    Rect,
    RectList,
    RectListSyntaxError,
    RectOutOfCanvasError,
    ScaleError,
    XorShift64Star,
    generate,
    load_rectlist,
    parse_rectlist,
    rasterize,
    save_rectlist,
    serialize_rectlist,
)


def test_parse_rectlist_single_rect():
    """Parse a one-rectangle design"""
    r = parse_rectlist("CANVAS 100 100\nRECT 10 10 20 30")
    assert r.canvas_w_nm == 100
    assert r.canvas_h_nm == 100
    assert r.rects == (Rect(10, 10, 20, 30),)


def test_parse_rectlist_comments_and_blank_lines():
    """Comment and blank lines are skipped"""
    r = parse_rectlist("# design\nCANVAS 50 40\n\n# a via\nRECT 0 0 10 10\n")
    assert r.rects == (Rect(0, 0, 10, 10),)


def test_parse_rectlist_out_of_canvas():
    """Rectangle exceeding the canvas is an error"""
    with pytest.raises(RectOutOfCanvasError):
        parse_rectlist("CANVAS 100 100\nRECT 90 90 20 20")


@pytest.mark.parametrize(
    "text,lineno",
    [
        ("RECT 0 0 1 1", 1),
        ("CANVAS 10 10\nRECT 0 0 1", 2),
        ("CANVAS 10 10\nRECT 0 0 1 x", 2),
        ("CANVAS 10 10\nPOLY 0 0 1 1", 2),
        ("CANVAS 10 10\nCANVAS 10 10", 2),
        ("# nothing here", 2),
    ],
)
def test_parse_rectlist_syntax_errors(text, lineno):
    """Malformed lines report their line number"""
    with pytest.raises(RectListSyntaxError) as excinfo:
        parse_rectlist(text)
    assert excinfo.value.lineno == lineno


def test_rectlist_rejects_zero_size():
    with pytest.raises(RectOutOfCanvasError):
        RectList((Rect(0, 0, 0, 5),), 10, 10)


def test_rectlist_round_trip(tmp_path):
    """A file of 3 rects round-trips through save and load unchanged"""
    r = RectList((Rect(0, 0, 10, 10), Rect(20, 5, 30, 15), Rect(60, 60, 40, 40)), 100, 100)
    path = tmp_path / "design.txt"
    save_rectlist(path, r)
    assert load_rectlist(path) == r
    assert parse_rectlist(serialize_rectlist(r)) == r
    assert path.read_bytes().endswith(b"RECT 60 60 40 40\n")


def test_rasterize_empty():
    raster = rasterize(RectList((), 64, 32), 2.0)
    assert raster.pixels.shape == (16, 32)
    assert not raster.pixels.any()


def test_rasterize_full_canvas():
    raster = rasterize(RectList((Rect(0, 0, 64, 64),), 64, 64), 4.0)
    assert raster.pixels.all()


def test_rasterize_area():
    """Rect (10,10,20,30) at 1 nm/px covers exactly 600 pixels"""
    raster = rasterize(RectList((Rect(10, 10, 20, 30),), 100, 100), 1.0)
    assert int(raster.pixels.sum()) == 600
    assert raster.pixels[10, 10] == 1
    assert raster.pixels[39, 29] == 1
    assert raster.pixels[40, 29] == 0
    assert raster.pixels[39, 30] == 0


def test_rasterize_pixel_center_rule():
    """A pixel prints only when its center lies inside a rectangle"""
    # 10 nm pixels have centers at 5, 15, 25 ...; [12, 26) holds only the center 15 and 25
    raster = rasterize(RectList((Rect(12, 0, 14, 10),), 40, 10), 10.0)
    assert raster.pixels.tolist() == [[0, 1, 1, 0]]


def test_rasterize_abutting_rects_are_seamless():
    r = RectList((Rect(0, 0, 16, 32), Rect(16, 0, 16, 32)), 32, 32)
    assert rasterize(r, 4.0).pixels.all()


def test_rasterize_scale_error():
    with pytest.raises(ScaleError):
        rasterize(RectList((), 100, 100), 3.0)


def test_rasterize_after_round_trip():
    r = generate(GeneratorSpec(METAL_LIKE, 7, 0.2, 40, 40, 512))
    assert rasterize(parse_rectlist(serialize_rectlist(r)), 4.0) == rasterize(r, 4.0)


def test_layout_raster_validation():
    with pytest.raises(LayoutError):
        LayoutRaster(np.array([[0, 2]]), 1.0)
    with pytest.raises(ScaleError):
        LayoutRaster(np.zeros((2, 2)), 0.0)
    raster = LayoutRaster.from_array(np.array([[0.2, 0.5], [0.7, 0.49]]), 1.0)
    assert raster.pixels.tolist() == [[0, 1], [1, 0]]
    assert not raster.pixels.flags.writeable
    assert raster.area_nm2 == 4.0


def test_layout_raster_save_pgm(tmp_path):
    from utils import load_pgm

    raster = rasterize(RectList((Rect(0, 0, 4, 8),), 8, 8), 1.0)
    path = tmp_path / "design.pgm"
    raster.save_pgm(path)
    assert LayoutRaster.from_array(load_pgm(path), 1.0) == raster


def test_xorshift_is_deterministic():
    a, b = XorShift64Star(42), XorShift64Star(42)
    assert [a.next_u64() for _ in range(5)] == [b.next_u64() for _ in range(5)]
    values = [XorShift64Star(1).uniform() for _ in range(3)]
    assert all(0.0 <= v < 1.0 for v in values)
    rng = XorShift64Star(3)
    assert all(2 <= rng.randint(2, 5) <= 5 for _ in range(100))


@pytest.mark.parametrize("kind", [VIA_LIKE, METAL_LIKE])
def test_generate_same_seed(kind):
    """Same seed gives an identical design"""
    spec = GeneratorSpec(kind, 11, 0.1, 64, 64, 1024)
    assert generate(spec) == generate(spec)


def test_generate_different_seed():
    first = generate(GeneratorSpec(VIA_LIKE, 1, 0.1, 64, 64, 1024))
    second = generate(GeneratorSpec(VIA_LIKE, 2, 0.1, 64, 64, 1024))
    assert first != second


def test_generate_via_spacing():
    """Via centers keep at least min_feature + min_space apart along some axis"""
    spec = GeneratorSpec(VIA_LIKE, 5, 0.05, 64, 64, 2048)
    r = generate(spec)
    assert len(r.rects) == round(0.05 * 2048 * 2048 / 64**2)
    assert all(rect.w == rect.h == 64 for rect in r.rects)
    for a, b in itertools.combinations(r.rects, 2):
        separation = max(abs(a.x - b.x), abs(a.y - b.y))
        assert separation >= spec.min_feature_nm + spec.min_space_nm


def test_generate_metal_density():
    """Rasterized metal-like design is within 30% of the requested density"""
    spec = GeneratorSpec(METAL_LIKE, 9, 0.25, 80, 80, 2048)
    raster = rasterize(generate(spec), 1.0)
    density = raster.pixels.mean()
    assert 0.7 * spec.density <= density <= 1.3 * spec.density
    widths = {min(rect.w, rect.h) for rect in generate(spec).rects}
    assert widths == {80}


def test_generate_infeasible():
    with pytest.raises(InfeasibleSpecError):
        generate(GeneratorSpec(VIA_LIKE, 0, 0.5, 100, 100, 1000))
    with pytest.raises(InfeasibleSpecError):
        generate(GeneratorSpec(METAL_LIKE, 0, 0.6, 100, 100, 1000))


def test_generator_spec_validation():
    with pytest.raises(LayoutError):
        GeneratorSpec("poly", 0, 0.1, 10, 10, 100)
    with pytest.raises(LayoutError):
        GeneratorSpec(VIA_LIKE, 0, 1.5, 10, 10, 100)
