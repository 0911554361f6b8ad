"""Tests for MSE, EPE, PVB, the score and evaluation reports"""

import typing as t

import numpy as np
import pandas as pd
import pytest

from ilt import MaskGrid
from layout import LayoutRaster, Rect, RectList, rasterize
from litho import ResistImage
from metrics import (
    REPORT_COLUMNS,
    EpeSpec,
    EvaluationRow,
    LithoEvaluator,
    MetricsError,
    ScoreWeights,
    epe_violations,
    evaluate_mask,
    evaluation_table,
    mse,
    pvb_area,
    score,
    throughput_um2_per_s,
    write_evaluation_csv,
)


def block(x: int, y: int, w: int, h: int, canvas: int = 400) -> LayoutRaster:
    return rasterize(RectList((Rect(x, y, w, h),), canvas, canvas), 1.0)


def random_binary(rng, shape=(20, 20)) -> np.ndarray:
    return (rng.uniform(size=shape) > 0.5).astype(np.uint8)


def test_mse_identical(rng):
    image = random_binary(rng)
    assert mse(image, image) == 0


def test_mse_counts_differing_pixels(rng):
    """Binary images differing in exactly 7 pixels have MSE 7"""
    a = random_binary(rng)
    b = a.copy()
    flat = b.reshape(-1)
    idx = rng.choice(flat.size, size=7, replace=False)
    flat[idx] = 1 - flat[idx]
    assert mse(ResistImage(a), LayoutRaster(b, 1.0)) == 7
    assert mse(a, b) == mse(b, a)


def test_mse_mask_grid():
    assert mse(MaskGrid(np.full((2, 2), 0.5)), np.zeros((2, 2))) == pytest.approx(1.0)


def test_mse_dimension_mismatch():
    with pytest.raises(MetricsError):
        mse(np.zeros((2, 2)), np.zeros((3, 3)))


def test_epe_identical_contour():
    target = block(100, 100, 100, 200)
    report = epe_violations(target.pixels, target)
    assert report.violations == 0
    # left/right edges: floor(200 / 40) + 1 probes each; top/bottom: floor(100 / 40) + 1
    assert len(report.probes) == 6 + 6 + 3 + 3


def test_epe_displaced_left_edge():
    """Left edge printed tolerance + 1 nm outside: every probe on that edge is violated"""
    target = block(100, 100, 100, 200)
    printed = block(84, 100, 116, 200)
    report = epe_violations(printed.pixels, target, EpeSpec(tolerance_nm=15, sample_spacing_nm=40))
    assert report.violations == 200 // 40 + 1
    violated = [p for p in report.probes if p.violated]
    assert {p.edge_orientation for p in violated} == {"left"}
    assert all(p.displacement_nm == 16 for p in violated)


def test_epe_displacement_at_tolerance():
    """Displacement equal to the tolerance is not a violation"""
    target = block(100, 100, 100, 200)
    printed = block(85, 100, 115, 200)
    assert epe_violations(printed.pixels, target).violations == 0


def test_epe_inward_displacement():
    target = block(100, 100, 100, 200)
    printed = block(116, 100, 84, 200)
    assert epe_violations(printed.pixels, target).violations == 6


def test_epe_missing_feature():
    """No printed transition near the edge violates every probe"""
    target = block(100, 100, 100, 200)
    report = epe_violations(np.zeros((400, 400)), target)
    assert report.violations == len(report.probes) == 18
    assert all(p.displacement_nm == float("inf") for p in report.probes)


def test_epe_short_edge_single_probe():
    target = block(100, 100, 20, 20)
    report = epe_violations(target.pixels, target)
    assert len(report.probes) == 4


def jittered_layouts(rng, canvas: int = 64, count: int = 4) -> t.Tuple[LayoutRaster, LayoutRaster]:
    """A random target and a printed version with every rectangle edge moved by up to 3 px"""
    target, printed = [], []
    for _ in range(count):
        w, h = (int(v) for v in rng.integers(6, 24, size=2))
        x, y = int(rng.integers(0, canvas - w)), int(rng.integers(0, canvas - h))
        target.append(Rect(x, y, w, h))
        x0, y0, x1, y1 = (int(v) for v in np.array([x, y, x + w, y + h]) + rng.integers(-3, 4, size=4))
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(max(x1, x0 + 1), canvas), min(max(y1, y0 + 1), canvas)
        printed.append(Rect(x0, y0, x1 - x0, y1 - y0))
    return (
        rasterize(RectList(tuple(target), canvas, canvas), 1.0),
        rasterize(RectList(tuple(printed), canvas, canvas), 1.0),
    )


@pytest.mark.parametrize("seed", range(5))
def test_epe_rotation_invariant(seed):
    """Rotating printed and target images together keeps every count"""
    target, printed = jittered_layouts(np.random.default_rng(seed))
    spec = EpeSpec(tolerance_nm=1.5, sample_spacing_nm=5, min_edge_len_nm=5)
    report = epe_violations(printed, target, spec)
    for k in (1, 2, 3):
        rotated = epe_violations(printed.rot90(k), target.rot90(k), spec)
        assert rotated.violations == report.violations
        assert len(rotated.probes) == len(report.probes)
        assert sorted(p.displacement_nm for p in rotated.probes) == sorted(
            p.displacement_nm for p in report.probes
        )


def test_epe_dimension_mismatch():
    with pytest.raises(MetricsError):
        epe_violations(np.zeros((10, 10)), block(0, 0, 5, 5, canvas=20))


def test_pvb_identical_corners(rng):
    image = random_binary(rng)
    assert pvb_area([image, image, image]) == 0


def test_pvb_counts_disagreement(rng):
    """Two images differing in 12 pixels have PVB 12"""
    a = random_binary(rng)
    b = a.copy()
    flat = b.reshape(-1)
    idx = rng.choice(flat.size, size=12, replace=False)
    flat[idx] = 1 - flat[idx]
    assert pvb_area([ResistImage(a), ResistImage(b)]) == 12
    assert pvb_area([a, b]) == mse(a, b)


def test_mse_is_two_corner_pvb(rng):
    for shape in [(20, 20), (7, 31)]:
        a, b = random_binary(rng, shape), random_binary(rng, shape)
        assert mse(a, b) == pvb_area([a, b])


def test_pvb_errors():
    with pytest.raises(MetricsError):
        pvb_area([])
    with pytest.raises(MetricsError):
        pvb_area([np.zeros((2, 2)), np.zeros((2, 3))])


@pytest.mark.parametrize(
    "epe,pvb,expected",
    [(45.6, 1126395.6, 4733582.4), (2.7, 455712.8, 1836351.2), (0, 0, 0)],
)
def test_score_average_rows(epe, pvb, expected):
    assert score(0, epe, pvb, 0) == pytest.approx(expected, abs=0.5)


def test_score_weights():
    w = ScoreWeights(w_runtime=2.0, w_epe=1.0, w_pvb=1.0, w_shape=3.0)
    assert score(1.5, 2, 3, 4, w) == pytest.approx(3.0 + 2 + 3 + 12)


def test_score_is_linear_in_each_term():
    w = ScoreWeights()
    base = (2.0, 3.0, 50.0, 1.0)
    slopes = (w.w_runtime, w.w_epe, w.w_pvb, w.w_shape)
    for i, slope in enumerate(slopes):
        for h in (0.5, 4.0):
            moved = list(base)
            moved[i] += h
            assert score(*moved, w) - score(*base, w) == pytest.approx(h * slope)
    assert score(0, 0, 0, 0, w) == 0


def test_score_negative():
    with pytest.raises(MetricsError):
        score(-1, 0, 0)


def test_throughput():
    assert throughput_um2_per_s(4e6, 2.0) == pytest.approx(2.0)
    assert throughput_um2_per_s(4e6, 0.0) == 0.0


@pytest.fixture
def evaluator(kernel_pair, resist_model):
    nominal, defocus = kernel_pair
    return LithoEvaluator(nominal, resist_model, defocus)


def test_evaluator_empty_design(evaluator):
    """An empty mask on an empty design prints nothing and scores zero"""
    design = LayoutRaster(np.zeros((32, 32)), 1.0)
    row = evaluate_mask("empty", np.zeros((32, 32)), design, evaluator)
    assert (row.mse, row.epe, row.pvb, row.score) == (0, 0, 0, 0)


def test_evaluator_row(evaluator):
    design = block(8, 8, 16, 16, canvas=32)
    row = evaluator.evaluate("square", design.as_float(), design, runtime_s=1.0)
    assert row.design == "square"
    assert row.mse == evaluator.mse(design.as_float(), design)
    assert row.pvb == evaluator.pvb(design.as_float())
    assert row.score == pytest.approx(1.0 + 5000 * row.epe + 4 * row.pvb)


def test_evaluator_binarizes(evaluator):
    design = block(8, 8, 16, 16, canvas=32)
    soft = design.as_float() * 0.8 + 0.1
    np.testing.assert_array_equal(
        evaluator.printed(soft).pixels, evaluator.printed(design.pixels).pixels
    )


def test_evaluator_needs_defocus(kernel_pair, resist_model):
    evaluator = LithoEvaluator(kernel_pair[0], resist_model)
    with pytest.raises(MetricsError):
        evaluator.pvb(np.zeros((16, 16)))


def rows():
    return [
        EvaluationRow("a", 10.0, 2, 100, 10400.0, 0.0),
        EvaluationRow("b", 20.0, 4, 300, 21200.0, 0.0),
    ]


def test_evaluation_table_average():
    table = evaluation_table(rows())
    assert list(table.columns) == REPORT_COLUMNS
    average = table[table["design"] == "average"].iloc[0]
    assert average["mse"] == 15.0
    assert average["epe"] == 3.0
    assert average["pvb"] == 200.0


def test_evaluation_table_ratio():
    baseline = evaluation_table(
        [EvaluationRow("a", 30.0, 6, 400, 0.0, 0.0), EvaluationRow("b", 30.0, 6, 400, 0.0, 0.0)]
    )
    table = evaluation_table(rows(), baseline)
    ratio = table[table["design"] == "ratio"].iloc[0]
    assert ratio["mse"] == pytest.approx(0.5)
    assert ratio["epe"] == pytest.approx(0.5)
    assert ratio["pvb"] == pytest.approx(0.5)
    assert ratio["runtime_s"] == 0.0


def test_evaluation_table_empty():
    with pytest.raises(MetricsError):
        evaluation_table([])


def test_write_evaluation_csv(tmp_path):
    path = tmp_path / "eval.csv"
    write_evaluation_csv(evaluation_table(rows()), path)
    text = path.read_text()
    assert text.splitlines()[0] == ",".join(REPORT_COLUMNS)
    assert "\r" not in text
    table = pd.read_csv(path)
    assert list(table["design"]) == ["a", "b", "average"]
