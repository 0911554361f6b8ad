"""Mask quality metrics: MSE, EPE violations, PVB area, contest score and evaluation reports"""

from __future__ import annotations

import math
import os
import typing as t
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from ilt import MaskGrid, binarize
from layout import LayoutRaster
from litho import (
    DEFAULT_DOSES,
    LithoKernelSet,
    ResistImage,
    ResistModel,
    aerial_image,
    corner_images,
    resist,
)
from utils import MaskinatorError, get_logger

__all__ = [
    "EpeProbe",
    "EpeReport",
    "EpeSpec",
    "EvaluationRow",
    "LithoEvaluator",
    "MetricsError",
    "ScoreWeights",
    "epe_violations",
    "evaluate_mask",
    "evaluation_table",
    "mse",
    "pvb_area",
    "score",
    "throughput_um2_per_s",
    "write_evaluation_csv",
]

logger = get_logger("metrics")

REPORT_COLUMNS = ["design", "mse", "epe", "pvb", "score", "runtime_s"]

LEFT, RIGHT, TOP, BOTTOM = "left", "right", "top", "bottom"


class MetricsError(MaskinatorError):
    """Base class for metric exceptions"""

    ...


def _pixels(image) -> np.ndarray:
    if isinstance(image, (ResistImage, LayoutRaster)):
        return image.pixels.astype(np.float64)
    if isinstance(image, MaskGrid):
        return image.values
    return np.asarray(image, dtype=np.float64)


def _same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise MetricsError(f"dimension mismatch: {a.shape} vs {b.shape}")


def mse(z, zt) -> float:
    """Squared Frobenius norm of z - zt; the count of differing pixels for binary inputs"""
    a, b = _pixels(z), _pixels(zt)
    _same_shape(a, b)
    return float(np.sum((a - b) ** 2))


@dataclass(frozen=True)
class EpeSpec:
    """EPE measurement convention; defaults follow benchmark tradition (15 nm, 40 nm)"""

    tolerance_nm: float = 15.0
    sample_spacing_nm: float = 40.0
    min_edge_len_nm: float = 40.0
    # crossings farther than search_factor * tolerance along the normal are not searched
    search_factor: float = 4.0

    def __post_init__(self):
        if not self.tolerance_nm > 0 or not self.sample_spacing_nm > 0:
            raise MetricsError("tolerance_nm and sample_spacing_nm must be > 0")
        if not self.min_edge_len_nm > 0 or not self.search_factor > 0:
            raise MetricsError("min_edge_len_nm and search_factor must be > 0")


class EpeProbe(t.NamedTuple):
    x_nm: float
    y_nm: float
    edge_orientation: str
    displacement_nm: float
    violated: bool


@dataclass(frozen=True)
class EpeReport:
    violations: int
    probes: t.Tuple[EpeProbe, ...] = field(default_factory=tuple)


def _runs(flags: np.ndarray) -> t.List[t.Tuple[int, int]]:
    """[start, end) index ranges where flags is True"""
    padded = np.concatenate([[False], flags, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[::2], edges[1::2]))


def _boundary_diffs(pixels: np.ndarray) -> t.Tuple[np.ndarray, np.ndarray]:
    """Signed transitions with dark field outside the grid.

    vertical[r, b] = p[r, b] - p[r, b - 1] for b in 0..W (+1 = left edge of a shape)
    horizontal[b, c] = p[b, c] - p[b - 1, c] for b in 0..H (+1 = top edge of a shape)
    """
    p = np.pad(pixels.astype(np.int8), 1)
    vertical = p[1:-1, 1:] - p[1:-1, :-1]
    horizontal = p[1:, 1:-1] - p[:-1, 1:-1]
    return vertical, horizontal


def _probe_offsets(length_px: int, nm_per_px: float, spec: EpeSpec) -> t.List[t.Tuple[float, t.List[int]]]:
    """Probe positions along an edge (nm from its start) with the pixel rows they measure.

    n = floor(L / spacing) + 1 probes at the centers of n equal cells, so probes are
    at most one spacing apart and half a cell from each end; edges shorter than
    min_edge_len_nm get a single midpoint probe. A probe sitting exactly on a pixel
    boundary measures both neighbors.
    """
    length_nm = length_px * nm_per_px
    if length_nm < spec.min_edge_len_nm:
        count = 1
    else:
        count = int(math.floor(length_nm / spec.sample_spacing_nm + 1e-9)) + 1
    probes = []
    for i in range(count):
        pos = (i + 0.5) * length_nm / count
        q = pos / nm_per_px
        nearest = round(q)
        if abs(q - nearest) < 1e-9:
            rows = [r for r in (nearest - 1, nearest) if 0 <= r < length_px]
        else:
            rows = [min(int(math.floor(q)), length_px - 1)]
        probes.append((pos, rows))
    return probes


def _displacement(crossings: np.ndarray, boundary: int, nm_per_px: float, window_nm: float) -> float:
    if not len(crossings):
        return math.inf
    nearest = float(np.min(np.abs(crossings - boundary))) * nm_per_px
    return nearest if nearest <= window_nm else math.inf


def epe_violations(z, zt: LayoutRaster, spec: EpeSpec = EpeSpec()) -> EpeReport:
    """Count EPE violations of printed image z against target zt.

    Probes sit on every target edge; the displacement is the distance along the edge
    normal to the nearest printed transition of the same polarity, searched within
    search_factor * tolerance. No transition in the window is a violation (missing
    feature). A probe is violated iff displacement > tolerance_nm.

    Raises:
        MetricsError: dimension mismatch
    """
    printed = _pixels(z) >= 0.5
    target = _pixels(zt) >= 0.5
    _same_shape(printed, target)
    nm = float(getattr(zt, "nm_per_px", getattr(z, "nm_per_px", 1.0)))
    window = spec.search_factor * spec.tolerance_nm

    t_vert, t_horiz = _boundary_diffs(target)
    p_vert, p_horiz = _boundary_diffs(printed)
    probes = []

    # vertical edges: walk rows along the edge, search columns along the normal
    for b in range(t_vert.shape[1]):
        for sign, orientation in ((1, LEFT), (-1, RIGHT)):
            for r0, r1 in _runs(t_vert[:, b] == sign):
                for pos, rows in _probe_offsets(r1 - r0, nm, spec):
                    disp = max(
                        _displacement(np.flatnonzero(p_vert[r0 + r] == sign), b, nm, window)
                        for r in rows
                    )
                    probes.append(
                        EpeProbe(b * nm, r0 * nm + pos, orientation, disp, disp > spec.tolerance_nm)
                    )

    # horizontal edges: walk columns along the edge, search rows along the normal
    for b in range(t_horiz.shape[0]):
        for sign, orientation in ((1, TOP), (-1, BOTTOM)):
            for c0, c1 in _runs(t_horiz[b, :] == sign):
                for pos, cols in _probe_offsets(c1 - c0, nm, spec):
                    disp = max(
                        _displacement(np.flatnonzero(p_horiz[:, c0 + c] == sign), b, nm, window)
                        for c in cols
                    )
                    probes.append(
                        EpeProbe(c0 * nm + pos, b * nm, orientation, disp, disp > spec.tolerance_nm)
                    )

    violations = sum(1 for p in probes if p.violated)
    return EpeReport(violations, tuple(probes))


def pvb_area(corners: t.Sequence) -> int:
    """Pixels where the corner resist images do not all agree (union minus intersection)

    Raises:
        MetricsError: empty list or dimension mismatch
    """
    if not len(corners):
        raise MetricsError("pvb_area needs at least one corner image")
    stack = [_pixels(c) >= 0.5 for c in corners]
    for image in stack[1:]:
        _same_shape(stack[0], image)
    stack = np.stack(stack)
    return int(np.count_nonzero(stack.any(axis=0) & ~stack.all(axis=0)))


@dataclass(frozen=True)
class ScoreWeights:
    """Contest score weights: runtime, EPE count, PVB area, shape violations"""

    w_runtime: float = 1.0
    w_epe: float = 5000.0
    w_pvb: float = 4.0
    w_shape: float = 10000.0


def score(
    runtime_s: float,
    epe: float,
    pvb: float,
    shape_violations: float = 0,
    w: ScoreWeights = ScoreWeights(),
) -> float:
    """w_runtime * runtime + w_epe * epe + w_pvb * pvb + w_shape * shape_violations

    Averages are accepted, so epe/pvb/shape_violations may be non-integer.

    Raises:
        MetricsError: any negative input
    """
    values = (runtime_s, epe, pvb, shape_violations)
    if any(v < 0 for v in values):
        raise MetricsError(f"score inputs must be >= 0, got {values}")
    return (
        w.w_runtime * runtime_s
        + w.w_epe * epe
        + w.w_pvb * pvb
        + w.w_shape * shape_violations
    )


def throughput_um2_per_s(area_nm2: float, seconds: float) -> float:
    """Optimized area per second in um^2/s; 0 when no time was recorded"""
    if seconds <= 0:
        return 0.0
    return area_nm2 / 1e6 / seconds


@dataclass
class EvaluationRow:
    design: str
    mse: float
    epe: int
    pvb: int
    score: float
    runtime_s: float


@dataclass(frozen=True)
class LithoEvaluator:
    """Lithography checker: simulates a mask and measures it against its design.

    The nominal kernels and resist threshold give the MSE used by LGST; the defocus
    kernels and doses give the process corners for PVB.
    """

    nominal: LithoKernelSet
    resist_model: ResistModel
    defocus: t.Optional[LithoKernelSet] = None
    doses: t.Tuple[float, ...] = DEFAULT_DOSES
    epe_spec: EpeSpec = EpeSpec()
    weights: ScoreWeights = ScoreWeights()
    binarize_threshold: float = 0.5

    def _binary(self, mask) -> MaskGrid:
        if not isinstance(mask, MaskGrid):
            mask = MaskGrid(np.asarray(mask, dtype=np.float64))
        return binarize(mask, self.binarize_threshold)

    def printed(self, mask) -> ResistImage:
        """Nominal resist image of the binarized mask"""
        return resist(aerial_image(self._binary(mask), self.nominal), self.resist_model)

    def mse(self, mask, design: LayoutRaster) -> float:
        return mse(self.printed(mask), design)

    def corners(self, mask) -> t.List[ResistImage]:
        if self.defocus is None:
            raise MetricsError("PVB evaluation needs defocus kernels")
        return corner_images(
            self._binary(mask), self.nominal, self.defocus, self.doses, self.resist_model
        )

    def pvb(self, mask) -> int:
        return pvb_area(self.corners(mask))

    def evaluate(
        self, name: str, mask, design: LayoutRaster, runtime_s: float = 0.0
    ) -> EvaluationRow:
        """One report row: nominal MSE and EPE, PVB over the corners, reduced score"""
        corners = self.corners(mask)
        nominal = corners[0]
        epe = epe_violations(nominal, design, self.epe_spec).violations
        pvb = pvb_area(corners)
        row = EvaluationRow(
            design=name,
            mse=mse(nominal, design),
            epe=epe,
            pvb=pvb,
            score=score(runtime_s, epe, pvb, 0, self.weights),
            runtime_s=runtime_s,
        )
        logger.debug(f"evaluated {name}: {row}")
        return row


def evaluate_mask(
    name: str, mask, design: LayoutRaster, evaluator: LithoEvaluator, runtime_s: float = 0.0
) -> EvaluationRow:
    return evaluator.evaluate(name, mask, design, runtime_s)


def evaluation_table(
    rows: t.Sequence[EvaluationRow], baseline: t.Optional[pd.DataFrame] = None
) -> pd.DataFrame:
    """Per-design rows plus an 'average' row and, with a baseline table, a 'ratio' row"""
    if not rows:
        raise MetricsError("evaluation table needs at least one row")
    table = pd.DataFrame([asdict(r) for r in rows], columns=REPORT_COLUMNS)
    numeric = REPORT_COLUMNS[1:]
    average = table[numeric].astype(float).mean()
    table = pd.concat(
        [table, pd.DataFrame([{"design": "average", **average.to_dict()}])],
        ignore_index=True,
    )
    if baseline is not None:
        base = baseline.loc[baseline["design"] == "average", numeric].astype(float)
        if base.empty:
            raise MetricsError("baseline table has no 'average' row")
        ratio = average / base.iloc[0].replace(0, np.nan)
        table = pd.concat(
            [table, pd.DataFrame([{"design": "ratio", **ratio.fillna(0.0).to_dict()}])],
            ignore_index=True,
        )
    return table


def write_evaluation_csv(table: pd.DataFrame, path: t.Union[str, os.PathLike]):
    table.to_csv(path, index=False, lineterminator="\n")
