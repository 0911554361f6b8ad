"""Target designs: rectangle-list layout files, rasterization and synthetic layout generation

Rect-list text format:

    CANVAS <w_nm> <h_nm>
    RECT <x> <y> <w> <h>
    ...

Decimal integers separated by single spaces; lines starting with '#' are comments.
Rectangles are half-open, [x, x + w) x [y, y + h), so abutting rectangles are seamless.

Synthetic layouts are drawn from XorShift64Star, a 64-bit xorshift generator
seeded through splitmix64, so "same seed -> same layout" holds on every platform:

    seed:  z = seed + 0x9E3779B97F4A7C15
           z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
           z = (z ^ (z >> 27)) * 0x94D049BB133111EB
           state = z ^ (z >> 31)            (0 is replaced by 0x9E3779B97F4A7C15)
    next:  x ^= x >> 12; x ^= x << 25; x ^= x >> 27
           out = x * 0x2545F4914F6CDD1D     (all arithmetic mod 2**64)
"""

from __future__ import annotations

import math
import os
import typing as t
from dataclasses import dataclass

import numpy as np

from utils import MaskinatorError, get_logger, save_pgm

__all__ = [
    "GeneratorSpec",
    "InfeasibleSpecError",
    "LayoutError",
    "LayoutRaster",
    "Rect",
    "RectList",
    "RectListSyntaxError",
    "RectOutOfCanvasError",
    "ScaleError",
    "XorShift64Star",
    "generate",
    "load_rectlist",
    "parse_rectlist",
    "rasterize",
    "save_rectlist",
    "serialize_rectlist",
]

logger = get_logger("layout")

MASK64 = (1 << 64) - 1

VIA_LIKE = "via-like"
METAL_LIKE = "metal-like"

# how many candidate placements per requested shape before giving up
PLACEMENT_ATTEMPTS_PER_SHAPE = 200


class LayoutError(MaskinatorError):
    """Base class for layout exceptions"""

    ...


class RectListSyntaxError(LayoutError):
    """Malformed line in a rect-list file"""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class RectOutOfCanvasError(LayoutError):
    """Rectangle exceeds the canvas or has non-positive size"""

    ...


class ScaleError(LayoutError):
    """Pixel scale does not divide the canvas"""

    ...


class InfeasibleSpecError(LayoutError):
    """Generator density cannot be reached under the spacing constraints"""

    ...


class Rect(t.NamedTuple):
    """Axis-aligned rectangle in nm, half-open [x, x + w) x [y, y + h)"""

    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True)
class RectList:
    """List of rectangles on a canvas; validated on construction"""

    rects: t.Tuple[Rect, ...]
    canvas_w_nm: int
    canvas_h_nm: int

    def __post_init__(self):
        object.__setattr__(self, "rects", tuple(Rect(*r) for r in self.rects))
        if self.canvas_w_nm <= 0 or self.canvas_h_nm <= 0:
            raise RectOutOfCanvasError(
                f"canvas must be positive, got {self.canvas_w_nm} x {self.canvas_h_nm}"
            )
        for idx, rect in enumerate(self.rects):
            _check_rect(rect, self.canvas_w_nm, self.canvas_h_nm, f"rect {idx}")


def _check_rect(rect: Rect, canvas_w: int, canvas_h: int, where: str):
    if min(rect.x, rect.y) < 0:
        raise RectOutOfCanvasError(f"{where}: negative origin {rect}")
    if rect.w <= 0 or rect.h <= 0:
        raise RectOutOfCanvasError(f"{where}: width and height must be > 0, got {rect}")
    if rect.x + rect.w > canvas_w or rect.y + rect.h > canvas_h:
        raise RectOutOfCanvasError(
            f"{where}: rectangle exceeds canvas {canvas_w} x {canvas_h}: {rect}"
        )


@dataclass(frozen=True)
class LayoutRaster:
    """Binary target design on a pixel grid; pixels[row, col], row = y"""

    pixels: np.ndarray
    nm_per_px: float

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 2 or pixels.size == 0:
            raise LayoutError(f"raster must be a non-empty 2-D grid, got {pixels.shape}")
        if not np.all((pixels == 0) | (pixels == 1)):
            raise LayoutError("raster pixels must be exactly 0 or 1")
        if not self.nm_per_px > 0:
            raise ScaleError(f"nm_per_px must be > 0, got {self.nm_per_px}")
        pixels = pixels.astype(np.uint8)
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "nm_per_px", float(self.nm_per_px))

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]

    @property
    def area_nm2(self) -> float:
        return self.height_px * self.width_px * self.nm_per_px**2

    @classmethod
    def from_array(cls, values: np.ndarray, nm_per_px: float) -> LayoutRaster:
        """Build a raster from any array, thresholding at 0.5"""
        return cls((np.asarray(values) >= 0.5).astype(np.uint8), nm_per_px)

    def as_float(self) -> np.ndarray:
        return self.pixels.astype(np.float64)

    def rot90(self, k: int = 1) -> LayoutRaster:
        return LayoutRaster(np.rot90(self.pixels, k).copy(), self.nm_per_px)

    def save_pgm(self, path: t.Union[str, os.PathLike]):
        save_pgm(path, self.pixels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayoutRaster):
            return NotImplemented
        return self.nm_per_px == other.nm_per_px and np.array_equal(
            self.pixels, other.pixels
        )

    __hash__ = None


def parse_rectlist(text: t.Union[str, t.Iterable[str]]) -> RectList:
    """Parse the rect-list text format.

    Args:
        text: whole file contents or an iterable of lines

    Returns:
        RectList with the rectangles in file order

    Raises:
        RectListSyntaxError: malformed line (carries the 1-based line number)
        RectOutOfCanvasError: rectangle outside the canvas
    """
    lines = text.splitlines() if isinstance(text, str) else list(text)
    canvas = None
    rects = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split(" ")
        keyword, values = fields[0], fields[1:]
        try:
            numbers = [int(v, 10) for v in values]
        except ValueError:
            raise RectListSyntaxError(lineno, f"expected decimal integers: {line!r}")
        if keyword == "CANVAS":
            if canvas is not None:
                raise RectListSyntaxError(lineno, "duplicate CANVAS line")
            if rects or len(numbers) != 2:
                raise RectListSyntaxError(lineno, "CANVAS <w_nm> <h_nm> must come first")
            canvas = tuple(numbers)
        elif keyword == "RECT":
            if canvas is None:
                raise RectListSyntaxError(lineno, "RECT before CANVAS")
            if len(numbers) != 4:
                raise RectListSyntaxError(lineno, "RECT needs <x> <y> <w> <h>")
            rect = Rect(*numbers)
            _check_rect(rect, canvas[0], canvas[1], f"line {lineno}")
            rects.append(rect)
        else:
            raise RectListSyntaxError(lineno, f"unknown keyword {keyword!r}")
    if canvas is None:
        raise RectListSyntaxError(len(lines) + 1, "missing CANVAS line")
    return RectList(tuple(rects), canvas[0], canvas[1])


def serialize_rectlist(r: RectList) -> str:
    """Return the rect-list text for r; parse_rectlist(serialize_rectlist(r)) == r"""
    lines = [f"CANVAS {r.canvas_w_nm} {r.canvas_h_nm}"]
    lines.extend(f"RECT {x} {y} {w} {h}" for x, y, w, h in r.rects)
    return "\n".join(lines) + "\n"


def load_rectlist(path: t.Union[str, os.PathLike]) -> RectList:
    with open(path, "r", encoding="utf-8") as f:
        return parse_rectlist(f.read())


def save_rectlist(path: t.Union[str, os.PathLike], r: RectList):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(serialize_rectlist(r))


def _pixels_along(extent_nm: int, nm_per_px: float) -> int:
    count = int(round(extent_nm / nm_per_px))
    if count < 1 or not math.isclose(count * nm_per_px, extent_nm, rel_tol=1e-9):
        raise ScaleError(f"{nm_per_px} nm/px does not divide canvas extent {extent_nm} nm")
    return count


def rasterize(r: RectList, nm_per_px: float) -> LayoutRaster:
    """Rasterize with the pixel-center rule: a pixel is 1 iff its center lies in any rectangle.

    Raises:
        ScaleError: nm_per_px does not divide the canvas dimensions
    """
    if not nm_per_px > 0:
        raise ScaleError(f"nm_per_px must be > 0, got {nm_per_px}")
    width = _pixels_along(r.canvas_w_nm, nm_per_px)
    height = _pixels_along(r.canvas_h_nm, nm_per_px)
    cx = (np.arange(width) + 0.5) * nm_per_px
    cy = (np.arange(height) + 0.5) * nm_per_px
    pixels = np.zeros((height, width), dtype=np.uint8)
    for x, y, w, h in r.rects:
        cols = (cx >= x) & (cx < x + w)
        rows = (cy >= y) & (cy < y + h)
        pixels[np.ix_(rows, cols)] = 1
    return LayoutRaster(pixels, nm_per_px)


class XorShift64Star:
    """Deterministic 64-bit xorshift* generator; see module docstring for the equations"""

    def __init__(self, seed: int):
        z = (seed + 0x9E3779B97F4A7C15) & MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        z ^= z >> 31
        self.state = z or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def uniform(self) -> float:
        """Uniform float in [0, 1) built from the top 53 bits"""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in [low, high] inclusive"""
        if high < low:
            raise ValueError(f"empty range [{low}, {high}]")
        return low + int(self.uniform() * (high - low + 1))


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters for synthetic layout generation"""

    kind: str
    seed: int
    density: float
    min_feature_nm: int
    min_space_nm: int
    canvas_nm: int
    snap_nm: int = 1
    # metal wires run mostly along this axis, like a routing layer
    preferred_direction_prob: float = 0.8

    def __post_init__(self):
        if self.kind not in (VIA_LIKE, METAL_LIKE):
            raise LayoutError(f"unknown generator kind {self.kind!r}")
        if self.min_feature_nm < 1 or self.min_space_nm < 1:
            raise LayoutError("min_feature_nm and min_space_nm must be >= 1")
        if not 0 < self.density < 1:
            raise LayoutError(f"density must be in (0, 1), got {self.density}")
        if self.canvas_nm < self.min_feature_nm or self.snap_nm < 1:
            raise LayoutError("canvas must hold at least one feature and snap_nm >= 1")


def _snap(value: int, snap: int) -> int:
    return (value // snap) * snap


def generate(spec: GeneratorSpec) -> RectList:
    """Generate a synthetic via-like or metal-like design.

    Pure function of spec. Vias are squares of side min_feature_nm whose centers are
    at least min_feature_nm + min_space_nm apart along some axis; wires are
    min_feature_nm wide segments separated by at least min_space_nm.

    Raises:
        InfeasibleSpecError: density cannot be reached under the spacing constraints
    """
    rng = XorShift64Star(spec.seed)
    if spec.kind == VIA_LIKE:
        rects = _generate_vias(spec, rng)
    else:
        rects = _generate_wires(spec, rng)
    logger.debug(f"generated {spec.kind} seed={spec.seed}: {len(rects)} shapes")
    return RectList(tuple(rects), spec.canvas_nm, spec.canvas_nm)


def _clear_of(boxes: np.ndarray, x0: int, y0: int, x1: int, y1: int, space: int) -> bool:
    """True if [x0,x1)x[y0,y1) keeps at least `space` from every box (x0,y0,x1,y1) rows"""
    if not len(boxes):
        return True
    separated = (
        (boxes[:, 0] >= x1 + space)
        | (boxes[:, 2] + space <= x0)
        | (boxes[:, 1] >= y1 + space)
        | (boxes[:, 3] + space <= y0)
    )
    return bool(np.all(separated))


def _generate_vias(spec: GeneratorSpec, rng: XorShift64Star) -> t.List[Rect]:
    f, s, canvas = spec.min_feature_nm, spec.min_space_nm, spec.canvas_nm
    max_density = f * f / float((f + s) ** 2)
    if spec.density > max_density:
        raise InfeasibleSpecError(
            f"via density {spec.density} exceeds the packing limit {max_density:.4f}"
        )
    count = max(1, int(round(spec.density * canvas * canvas / float(f * f))))
    boxes = np.zeros((0, 4), dtype=np.int64)
    rects = []
    attempts = 0
    while len(rects) < count:
        attempts += 1
        if attempts > PLACEMENT_ATTEMPTS_PER_SHAPE * count:
            raise InfeasibleSpecError(
                f"placed {len(rects)} of {count} vias; density {spec.density} unreachable"
            )
        x = _snap(rng.randint(0, canvas - f), spec.snap_nm)
        y = _snap(rng.randint(0, canvas - f), spec.snap_nm)
        if _clear_of(boxes, x, y, x + f, y + f, s):
            rects.append(Rect(x, y, f, f))
            boxes = np.vstack([boxes, [x, y, x + f, y + f]])
    return rects


def _generate_wires(spec: GeneratorSpec, rng: XorShift64Star) -> t.List[Rect]:
    f, s, canvas = spec.min_feature_nm, spec.min_space_nm, spec.canvas_nm
    max_density = f / float(f + s)
    if spec.density > max_density:
        raise InfeasibleSpecError(
            f"wire density {spec.density} exceeds the line/space limit {max_density:.4f}"
        )
    target_area = spec.density * canvas * canvas
    min_len = min(2 * f, canvas)
    max_len = max(min_len, canvas // 2)
    horizontal_first = rng.uniform() < 0.5
    boxes = np.zeros((0, 4), dtype=np.int64)
    rects = []
    area = 0
    attempts = 0
    budget = PLACEMENT_ATTEMPTS_PER_SHAPE * max(1, int(target_area // (f * min_len)))
    while area < target_area:
        attempts += 1
        if attempts > budget:
            if area < 0.7 * target_area:
                raise InfeasibleSpecError(
                    f"reached {area / canvas**2:.4f} of requested density {spec.density}"
                )
            break
        remaining = int(math.ceil((target_area - area) / f))
        length = min(rng.randint(min_len, max_len), max(min_len, remaining))
        horizontal = (rng.uniform() < spec.preferred_direction_prob) == horizontal_first
        w, h = (length, f) if horizontal else (f, length)
        x = _snap(rng.randint(0, canvas - w), spec.snap_nm)
        y = _snap(rng.randint(0, canvas - h), spec.snap_nm)
        if _clear_of(boxes, x, y, x + w, y + h, s):
            rects.append(Rect(x, y, w, h))
            boxes = np.vstack([boxes, [x, y, x + w, y + h]])
            area += w * h
    return rects
