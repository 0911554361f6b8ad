"""Test configuration for pytest for Maskinator tests."""

import pathlib
import sys
import typing as t

import numpy as np
import pytest

# modules in src/ are not a package; make them importable the way setup.py installs them
SRC_DIR = pathlib.Path(__file__).resolve().parent.parent / "src"
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))

from litho import ResistModel, make_synthetic_kernel_pair  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end runs that take more than a few seconds")


def finite_difference(
    fn: t.Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a real or complex array.

    For complex x the result is dfn/dRe + 1j * dfn/dIm, matching the autodiff convention.
    """
    x = np.array(x, copy=True)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    directions = (1.0, 1j) if np.iscomplexobj(x) else (1.0,)
    for i in range(flat_x.size):
        original = flat_x[i]
        for direction in directions:
            flat_x[i] = original + eps * direction
            plus = fn(x)
            flat_x[i] = original - eps * direction
            minus = fn(x)
            flat_x[i] = original
            flat_g[i] += direction * (plus - minus) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def rng():
    """Seeded numpy generator"""
    return np.random.default_rng(20221021)


@pytest.fixture(scope="session")
def kernel_pair():
    """Small (nominal, defocus) synthetic kernel sets at 1 nm/px"""
    return make_synthetic_kernel_pair(9, 3, 3.0, 1.25, nm_per_px=1.0)


@pytest.fixture(scope="session")
def resist_model(kernel_pair):
    """Resist calibrated against the nominal kernel set"""
    return ResistModel.calibrated(kernel_pair[0])
