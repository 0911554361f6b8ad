"""Half-overlapped tile decomposition of large clips and the corner/edge/center merge rule.

Tiles of side tile_nm start every stride_nm = tile_nm / 2. Along each axis the first
tile keeps [0, tile - stride/2), middle tiles keep [stride/2, tile - stride/2) and the
last tile keeps [stride/2, tile), so the keep regions partition the clip. A tile at
the end of both axes is type A (corner), at the end of one axis type B (edge), and
type C (center) otherwise. For the default 6 um clip with 2 um tiles that is 25
tiles: 4 A keeping 1.5 x 1.5 um, 12 B keeping 1 x 1.5 um and 9 C keeping 1 x 1 um.
"""

from __future__ import annotations

import typing as t
from dataclasses import dataclass

import numpy as np

from ilt import MaskGrid
from layout import LayoutRaster
from utils import MaskinatorError, get_logger, parallel_map

__all__ = [
    "MissingTileError",
    "OverlapError",
    "Tile",
    "TileRole",
    "TileSpec",
    "TilingError",
    "keep_region",
    "merge",
    "optimize_tiled",
    "split",
    "write_count_map",
]

logger = get_logger("tiling")

CORNER, EDGE, CENTER = "A", "B", "C"


class TilingError(MaskinatorError):
    """Base class for tiling exceptions"""

    ...


class MissingTileError(TilingError):
    ...


class OverlapError(TilingError):
    """Keep regions do not partition the clip"""

    ...


@dataclass(frozen=True)
class TileSpec:
    clip_nm: int = 6000
    tile_nm: int = 2000
    stride_nm: int = 1000

    def __post_init__(self):
        if min(self.clip_nm, self.tile_nm, self.stride_nm) < 1:
            raise TilingError("clip_nm, tile_nm and stride_nm must be positive")
        if 2 * self.stride_nm != self.tile_nm:
            raise TilingError(f"stride {self.stride_nm} nm must be half the tile {self.tile_nm} nm")
        if self.clip_nm < self.tile_nm or (self.clip_nm - self.tile_nm) % self.stride_nm:
            raise TilingError(
                f"tiles of {self.tile_nm} nm at stride {self.stride_nm} nm do not fit a {self.clip_nm} nm clip"
            )
        if self.grid_size < 2:
            raise TilingError("a tiling needs at least two tiles per axis")

    @property
    def grid_size(self) -> int:
        """Tiles per axis"""
        return (self.clip_nm - self.tile_nm) // self.stride_nm + 1

    def pixels(self, nm_per_px: float) -> t.Tuple[int, int, int]:
        """(clip, tile, half stride) in pixels

        Raises:
            TilingError: a length is not a whole number of pixels
        """
        lengths = (self.clip_nm, self.tile_nm, self.stride_nm / 2)
        px = [length / nm_per_px for length in lengths]
        if any(abs(p - round(p)) > 1e-9 for p in px):
            raise TilingError(f"tile geometry {lengths} nm is not a whole number of {nm_per_px} nm pixels")
        return tuple(int(round(p)) for p in px)


class TileRole(t.NamedTuple):
    role: str
    # (y0, x0, y1, x1) half-open, tile-local nm
    keep_nm: t.Tuple[float, float, float, float]


class Tile(t.NamedTuple):
    raster: LayoutRaster
    position: t.Tuple[int, int]
    role: TileRole


def _axis_keep(index: int, count: int, tile: float, half_stride: float) -> t.Tuple[float, float]:
    start = 0 if index == 0 else half_stride
    end = tile if index == count - 1 else tile - half_stride
    return start, end


def keep_region(position: t.Tuple[int, int], spec: TileSpec) -> TileRole:
    """Role and tile-local keep rectangle of the tile at grid position (row, col)"""
    row, col = position
    n = spec.grid_size
    if not (0 <= row < n and 0 <= col < n):
        raise TilingError(f"tile position {position} outside the {n}x{n} grid")
    ends = sum(index in (0, n - 1) for index in position)
    role = {2: CORNER, 1: EDGE, 0: CENTER}[ends]
    half = spec.stride_nm / 2
    y0, y1 = _axis_keep(row, n, spec.tile_nm, half)
    x0, x1 = _axis_keep(col, n, spec.tile_nm, half)
    return TileRole(role, (y0, x0, y1, x1))


def _keep_px(position: t.Tuple[int, int], spec: TileSpec, nm_per_px: float) -> t.Tuple[int, int, int, int]:
    spec.pixels(nm_per_px)
    return tuple(int(round(v / nm_per_px)) for v in keep_region(position, spec).keep_nm)


def _check_clip(shape: t.Tuple[int, int], spec: TileSpec, nm_per_px: float) -> t.Tuple[int, int]:
    clip_px, tile_px, _ = spec.pixels(nm_per_px)
    if shape != (clip_px, clip_px):
        raise TilingError(f"clip is {shape[0]}x{shape[1]} px, expected {clip_px}x{clip_px}")
    return clip_px, tile_px


def split(clip: LayoutRaster, spec: TileSpec = TileSpec()) -> t.List[Tile]:
    """Row-major tiles at stride offsets with their roles

    Raises:
        TilingError: clip dimensions do not match spec
    """
    nm = clip.nm_per_px
    _, tile_px = _check_clip(clip.pixels.shape, spec, nm)
    stride_px = int(round(spec.stride_nm / nm))
    tiles = []
    for row in range(spec.grid_size):
        for col in range(spec.grid_size):
            y, x = row * stride_px, col * stride_px
            raster = LayoutRaster(clip.pixels[y : y + tile_px, x : x + tile_px].copy(), nm)
            tiles.append(Tile(raster, (row, col), keep_region((row, col), spec)))
    return tiles


def write_count_map(
    positions: t.Iterable[t.Tuple[int, int]], spec: TileSpec, nm_per_px: float
) -> np.ndarray:
    """How many tiles' keep regions cover each clip pixel"""
    clip_px, _, _ = spec.pixels(nm_per_px)
    stride_px = int(round(spec.stride_nm / nm_per_px))
    counts = np.zeros((clip_px, clip_px), dtype=np.int32)
    for row, col in positions:
        y0, x0, y1, x1 = _keep_px((row, col), spec, nm_per_px)
        oy, ox = row * stride_px, col * stride_px
        counts[oy + y0 : oy + y1, ox + x0 : ox + x1] += 1
    return counts


TileMask = t.Tuple[t.Union[MaskGrid, np.ndarray], t.Tuple[int, int], t.Optional[TileRole]]


def merge(
    tiles: t.Sequence[TileMask],
    spec: TileSpec = TileSpec(),
    nm_per_px: t.Optional[float] = None,
) -> MaskGrid:
    """Assemble per-tile masks, taking every pixel from the tile whose keep region holds it.

    Args:
        tiles: (mask, (row, col), role) triples in any order; role may be None
        spec: tiling geometry
        nm_per_px: pixel size; taken from the first MaskGrid when None

    Raises:
        MissingTileError: a grid position has no tile
        TilingError: duplicate position, wrong tile size or role mismatch
        OverlapError: keep regions fail to cover every pixel exactly once
    """
    if nm_per_px is None:
        grids = [mask for mask, _, _ in tiles if isinstance(mask, MaskGrid)]
        if not grids:
            raise TilingError("nm_per_px is required when no tile is a MaskGrid")
        nm_per_px = grids[0].nm_per_px
    clip_px, tile_px, _ = spec.pixels(nm_per_px)
    stride_px = int(round(spec.stride_nm / nm_per_px))

    by_position: t.Dict[t.Tuple[int, int], np.ndarray] = {}
    for mask, position, role in tiles:
        position = tuple(position)
        if position in by_position:
            raise TilingError(f"duplicate tile at {position}")
        expected = keep_region(position, spec)
        if role is not None and tuple(role) != tuple(expected):
            raise TilingError(f"tile {position} has role {role}, expected {expected}")
        values = mask.values if isinstance(mask, MaskGrid) else np.asarray(mask, dtype=np.float64)
        if values.shape != (tile_px, tile_px):
            raise TilingError(f"tile {position} is {values.shape}, expected {(tile_px, tile_px)}")
        by_position[position] = values

    n = spec.grid_size
    missing = [(r, c) for r in range(n) for c in range(n) if (r, c) not in by_position]
    if missing:
        raise MissingTileError(f"missing tiles at {missing}")

    counts = write_count_map(by_position, spec, nm_per_px)
    if not np.all(counts == 1):
        raise OverlapError(
            f"keep regions cover {np.count_nonzero(counts == 0)} pixels zero times "
            f"and {np.count_nonzero(counts > 1)} pixels more than once"
        )

    out = np.zeros((clip_px, clip_px))
    for (row, col), values in by_position.items():
        y0, x0, y1, x1 = _keep_px((row, col), spec, nm_per_px)
        oy, ox = row * stride_px, col * stride_px
        out[oy + y0 : oy + y1, ox + x0 : ox + x1] = values[y0:y1, x0:x1]
    return MaskGrid(out, nm_per_px)


def optimize_tiled(
    clip: LayoutRaster,
    spec: TileSpec,
    optimizer: t.Callable[[LayoutRaster], MaskGrid],
    threads: int = 1,
) -> MaskGrid:
    """Optimize every tile with its full context, then merge by the keep rule"""
    tiles = split(clip, spec)
    logger.info(f"optimizing {len(tiles)} tiles on {threads} thread(s)")
    masks = parallel_map(lambda tile: optimizer(tile.raster), tiles, threads)
    return merge(
        [(mask, tile.position, tile.role) for mask, tile in zip(masks, tiles)],
        spec,
        clip.nm_per_px,
    )
