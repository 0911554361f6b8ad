"""Tests for tiled optimization of large clips"""

import collections

import numpy as np
import pytest

from ilt import MaskGrid
from layout import LayoutRaster
from tiling import (
    MissingTileError,
    TileSpec,
    TilingError,
    keep_region,
    merge,
    optimize_tiled,
    split,
    write_count_map,
)

# 60 px clip, 20 px tiles, 10 px stride at 1 nm/px: same 5 x 5 grid as the default
SMALL = TileSpec(clip_nm=60, tile_nm=20, stride_nm=10)


def all_positions(spec: TileSpec):
    n = spec.grid_size
    return [(r, c) for r in range(n) for c in range(n)]


@pytest.fixture
def clip(rng):
    return LayoutRaster((rng.random((60, 60)) < 0.3).astype(np.uint8), 1.0)


def identity(raster: LayoutRaster) -> MaskGrid:
    return MaskGrid(raster.as_float(), raster.nm_per_px)


def test_default_spec_roles():
    """The 6 um clip splits into 4 corner, 12 edge and 9 center tiles"""
    spec = TileSpec()
    assert spec.grid_size == 5
    roles = collections.Counter(keep_region(p, spec).role for p in all_positions(spec))
    assert roles == {"A": 4, "B": 12, "C": 9}


def test_default_spec_keep_sizes():
    spec = TileSpec()
    sizes = collections.defaultdict(set)
    for position in all_positions(spec):
        role, (y0, x0, y1, x1) = keep_region(position, spec)
        sizes[role].add(tuple(sorted((y1 - y0, x1 - x0))))
    assert sizes["A"] == {(1500, 1500)}
    assert sizes["B"] == {(1000, 1500)}
    assert sizes["C"] == {(1000, 1000)}
    assert keep_region((0, 0), spec).keep_nm == (0, 0, 1500, 1500)
    assert keep_region((4, 2), spec).keep_nm == (500, 500, 2000, 1500)


def test_keep_region_outside_grid():
    with pytest.raises(TilingError):
        keep_region((5, 0), TileSpec())


def test_write_count_map_partitions_clip():
    """Every clip pixel is written by exactly one tile"""
    counts = write_count_map(all_positions(TileSpec()), TileSpec(), 20.0)
    assert counts.shape == (300, 300)
    assert np.all(counts == 1)

    counts = write_count_map(all_positions(SMALL)[1:], SMALL, 1.0)
    assert np.count_nonzero(counts == 0) == 15 * 15


@pytest.mark.parametrize(
    "kwargs",
    [
        {"clip_nm": 2000, "tile_nm": 2000, "stride_nm": 1000},
        {"clip_nm": 6000, "tile_nm": 2000, "stride_nm": 500},
        {"clip_nm": 6500, "tile_nm": 2000, "stride_nm": 1000},
        {"clip_nm": 1000, "tile_nm": 2000, "stride_nm": 1000},
        {"clip_nm": 0, "tile_nm": 2000, "stride_nm": 1000},
    ],
)
def test_tile_spec_validation(kwargs):
    with pytest.raises(TilingError):
        TileSpec(**kwargs)


def test_tile_spec_pixels():
    assert TileSpec().pixels(20.0) == (300, 100, 25)
    assert SMALL.pixels(1.0) == (60, 20, 5)
    with pytest.raises(TilingError):
        SMALL.pixels(4.0)


def test_split(clip):
    tiles = split(clip, SMALL)
    assert len(tiles) == 25
    assert [tile.position for tile in tiles] == all_positions(SMALL)
    for tile in tiles:
        row, col = tile.position
        assert tile.raster.pixels.shape == (20, 20)
        np.testing.assert_array_equal(
            tile.raster.pixels, clip.pixels[10 * row : 10 * row + 20, 10 * col : 10 * col + 20]
        )
        assert tile.role == keep_region(tile.position, SMALL)


def test_split_wrong_size():
    with pytest.raises(TilingError):
        split(LayoutRaster(np.zeros((50, 50)), 1.0), SMALL)


def test_split_merge_identity(clip):
    """Merging the unmodified tiles reproduces the clip"""
    tiles = split(clip, SMALL)
    merged = merge([(identity(t.raster), t.position, t.role) for t in tiles], SMALL)
    assert merged.nm_per_px == 1.0
    np.testing.assert_array_equal(merged.values, clip.as_float())


def test_merge_takes_pixels_from_owner():
    """Constant tile masks show which tile owns each pixel"""
    value = {p: (5 * p[0] + p[1]) / 24 for p in all_positions(SMALL)}
    tiles = [(np.full((20, 20), v), p, None) for p, v in reversed(list(value.items()))]
    merged = merge(tiles, SMALL, nm_per_px=1.0).values
    assert merged[0, 0] == value[(0, 0)]
    assert merged[14, 14] == value[(0, 0)]
    assert merged[15, 15] == value[(1, 1)]
    assert merged[20, 20] == value[(1, 1)]
    assert merged[30, 0] == value[(2, 0)]
    assert merged[59, 59] == value[(4, 4)]
    assert merged[45, 44] == value[(4, 3)]


def test_merge_missing_tile(clip):
    tiles = [(identity(t.raster), t.position, t.role) for t in split(clip, SMALL)]
    with pytest.raises(MissingTileError):
        merge(tiles[:-1], SMALL)


def test_merge_duplicate_tile(clip):
    tiles = [(identity(t.raster), t.position, t.role) for t in split(clip, SMALL)]
    with pytest.raises(TilingError):
        merge(tiles + tiles[:1], SMALL)


def test_merge_wrong_role(clip):
    tiles = [(identity(t.raster), t.position, t.role) for t in split(clip, SMALL)]
    mask, position, _ = tiles[0]
    tiles[0] = (mask, position, keep_region((2, 2), SMALL))
    with pytest.raises(TilingError):
        merge(tiles, SMALL)


def test_merge_wrong_tile_size():
    tiles = [(np.zeros((20, 20)), p, None) for p in all_positions(SMALL)]
    tiles[3] = (np.zeros((10, 10)), tiles[3][1], None)
    with pytest.raises(TilingError):
        merge(tiles, SMALL, nm_per_px=1.0)


def test_merge_needs_pixel_size():
    tiles = [(np.zeros((20, 20)), p, None) for p in all_positions(SMALL)]
    with pytest.raises(TilingError):
        merge(tiles, SMALL)


def test_optimize_tiled(clip):
    """An identity optimizer on threads returns the clip"""
    seen = []

    def optimizer(raster):
        seen.append(raster.pixels.shape)
        return identity(raster)

    merged = optimize_tiled(clip, SMALL, optimizer, threads=3)
    assert len(seen) == 25
    np.testing.assert_array_equal(merged.values, clip.as_float())
