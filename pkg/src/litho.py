"""Forward lithography simulation: SVD-kernel aerial image, threshold resist, process corners

The aerial image of a mask M under kernels h_k with weights alpha_k and dose d is

    I = sum_k alpha_k * |h_k (*) (d * M)|^2

computed with FFTs. The convolution is circular over the simulation grid; by default
the mask is zero-padded by the kernel half-width first and the result cropped back,
so the layout boundary sees dark field and nothing wraps around.

Kernel file format (text):

    LITHOKERN v1
    COUNT <n>
    SIZE <h> <w>
    VARIANT <nominal|defocus>
    ALPHA <decimal>          # then h*w lines of "<re> <im>", row-major
    ...                      # repeated for every kernel
"""

from __future__ import annotations

import os
import threading
import typing as t
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft
from numpy.polynomial import hermite_e
from scipy.special import expit

from utils import MaskinatorError, get_logger

if t.TYPE_CHECKING:
    from ilt import MaskGrid

__all__ = [
    "AerialImage",
    "KernelFormatError",
    "LithoError",
    "LithoKernelSet",
    "ResistImage",
    "ResistModel",
    "aerial_image",
    "aerial_image_vjp",
    "corner_images",
    "load_kernels",
    "make_synthetic_kernel_pair",
    "make_synthetic_kernels",
    "open_frame_intensity",
    "resist",
    "resist_relaxed",
    "save_kernels",
    "set_fft_workers",
]

logger = get_logger("litho")

NOMINAL = "nominal"
DEFOCUS = "defocus"
VARIANTS = (NOMINAL, DEFOCUS)

KERNEL_MAGIC = "LITHOKERN v1"

# default process corner doses, min/max dose convention of the ICCAD-2013 contest
DEFAULT_DOSES = (0.98, 1.02)

# threshold on a unit open frame used by the same benchmark
DEFAULT_THRESHOLD_FRACTION = 0.225
DEFAULT_RELATIVE_STEEPNESS = 50.0

_fft_workers = 1


class LithoError(MaskinatorError):
    """Base class for lithography simulation exceptions"""

    ...


class KernelFormatError(LithoError):
    """Malformed kernel file"""

    def __init__(self, message: str, kernel_index: t.Optional[int] = None):
        prefix = f"kernel {kernel_index}: " if kernel_index is not None else ""
        super().__init__(prefix + message)
        self.kernel_index = kernel_index


def set_fft_workers(workers: int):
    """Set the number of threads scipy.fft may use inside one simulation"""
    global _fft_workers
    _fft_workers = max(1, int(workers))


@dataclass(frozen=True, eq=False)
class LithoKernelSet:
    """Complex kernels h_k (K x kh x kw) with non-increasing weights alpha_k"""

    kernels: np.ndarray
    coeffs: np.ndarray
    variant: str = NOMINAL
    dose: float = 1.0
    _spectra: t.Dict[t.Tuple[int, int], np.ndarray] = field(
        default_factory=dict, init=False, repr=False
    )
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def __post_init__(self):
        try:
            kernels = np.array(
                [np.asarray(k, dtype=np.complex128) for k in self.kernels]
            )
        except ValueError as e:
            raise LithoError(f"kernel grids must share dimensions: {e}") from e
        coeffs = np.asarray(self.coeffs, dtype=np.float64).reshape(-1)
        if kernels.ndim != 3 or len(kernels) == 0:
            raise LithoError("kernel set needs at least one 2-D kernel")
        if len(coeffs) != len(kernels):
            raise LithoError(
                f"{len(kernels)} kernels but {len(coeffs)} coefficients"
            )
        if np.any(coeffs < 0) or not np.all(np.isfinite(coeffs)):
            raise LithoError("kernel coefficients must be finite and non-negative")
        if np.any(np.diff(coeffs) > 0):
            raise LithoError("kernel coefficients must be sorted non-increasing")
        if self.variant not in VARIANTS:
            raise LithoError(f"unknown kernel variant {self.variant!r}")
        if not self.dose > 0:
            raise LithoError(f"dose must be > 0, got {self.dose}")
        kernels.setflags(write=False)
        coeffs.setflags(write=False)
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "dose", float(self.dose))

    @property
    def count(self) -> int:
        return len(self.kernels)

    @property
    def shape(self) -> t.Tuple[int, int]:
        return self.kernels.shape[1], self.kernels.shape[2]

    def with_dose(self, dose: float) -> LithoKernelSet:
        """Same kernels at another dose, sharing the spectra cache"""
        copy = replace(self, dose=dose)
        object.__setattr__(copy, "_spectra", self._spectra)
        object.__setattr__(copy, "_lock", self._lock)
        return copy

    def spectra(self, shape: t.Tuple[int, int]) -> np.ndarray:
        """Kernel transfer functions on a grid of the given shape, centered at (kh//2, kw//2)"""
        with self._lock:
            cached = self._spectra.get(shape)
            if cached is None:
                kh, kw = self.shape
                embedded = np.zeros((self.count,) + tuple(shape), dtype=np.complex128)
                embedded[:, :kh, :kw] = self.kernels
                embedded = np.roll(embedded, (-(kh // 2), -(kw // 2)), axis=(1, 2))
                cached = scipy.fft.fft2(embedded, axes=(1, 2), workers=_fft_workers)
                cached.setflags(write=False)
                self._spectra[shape] = cached
            return cached

    def __eq__(self, other) -> bool:
        if not isinstance(other, LithoKernelSet):
            return NotImplemented
        return (
            self.variant == other.variant
            and self.dose == other.dose
            and np.array_equal(self.kernels, other.kernels)
            and np.array_equal(self.coeffs, other.coeffs)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class AerialImage:
    """Optical intensity at the wafer plane"""

    intensity: np.ndarray
    nm_per_px: float = 1.0


@dataclass(frozen=True, eq=False)
class ResistImage:
    """Binary printed pattern"""

    pixels: np.ndarray
    nm_per_px: float = 1.0

    def __post_init__(self):
        pixels = np.asarray(self.pixels).astype(np.uint8)
        if np.any(pixels > 1):
            raise LithoError("resist image must be binary")
        object.__setattr__(self, "pixels", pixels)

    def as_float(self) -> np.ndarray:
        return self.pixels.astype(np.float64)


@dataclass(frozen=True)
class ResistModel:
    """Constant threshold resist; sigmoid_steepness drives the relaxed variant"""

    d_th: float
    sigmoid_steepness: float = 1.0

    def __post_init__(self):
        if not self.d_th > 0 or not self.sigmoid_steepness > 0:
            raise LithoError(
                f"d_th and sigmoid_steepness must be > 0, got {self.d_th}, {self.sigmoid_steepness}"
            )

    @classmethod
    def calibrated(
        cls,
        kernels: LithoKernelSet,
        threshold_fraction: float = DEFAULT_THRESHOLD_FRACTION,
        relative_steepness: float = DEFAULT_RELATIVE_STEEPNESS,
    ) -> ResistModel:
        """Threshold and steepness expressed relative to the open-frame intensity of kernels"""
        i0 = open_frame_intensity(kernels)
        return cls(d_th=threshold_fraction * i0, sigmoid_steepness=relative_steepness / i0)


def _mask_values(mask) -> np.ndarray:
    for attr in ("values", "pixels"):
        if hasattr(mask, attr):
            return np.asarray(getattr(mask, attr), dtype=np.float64)
    return np.asarray(mask, dtype=np.float64)


def _check_dims(values: np.ndarray, k: LithoKernelSet):
    if values.ndim != 2:
        raise LithoError(f"mask must be 2-D, got shape {values.shape}")
    kh, kw = k.shape
    if values.shape[0] < kh or values.shape[1] < kw:
        raise LithoError(f"mask {values.shape} smaller than kernels {(kh, kw)}")


def _pad_widths(k: LithoKernelSet) -> t.Tuple[t.Tuple[int, int], t.Tuple[int, int]]:
    kh, kw = k.shape
    return (kh // 2, kh // 2), (kw // 2, kw // 2)


def _fields(values: np.ndarray, k: LithoKernelSet) -> np.ndarray:
    """Complex fields h_k (*) (dose * values) for all kernels, shape (K, H, W)"""
    spectrum = scipy.fft.fft2(k.dose * values, workers=_fft_workers)
    return scipy.fft.ifft2(
        k.spectra(values.shape) * spectrum[None], axes=(1, 2), workers=_fft_workers
    )


def _crop(values: np.ndarray, pads) -> np.ndarray:
    (top, bottom), (left, right) = pads
    return values[top : values.shape[0] - bottom, left : values.shape[1] - right]


def aerial_image(
    mask: t.Union["MaskGrid", np.ndarray], k: LithoKernelSet, pad: bool = True
) -> AerialImage:
    """Compute the aerial image of mask under kernel set k.

    Args:
        mask: MaskGrid (or any 2-D array-like) with values in [0, 1]
        k: kernel set; k.dose multiplies the mask before convolution
        pad: zero-pad by the kernel half-width (dark field) before the periodic
            convolution and crop afterwards; False gives the raw circular convolution

    Returns:
        AerialImage with the mask's dimensions

    Raises:
        LithoError: mask smaller than the kernels or not 2-D
    """
    values = _mask_values(mask)
    _check_dims(values, k)
    pads = _pad_widths(k) if pad else ((0, 0), (0, 0))
    padded = np.pad(values, pads) if pad else values
    fields = _fields(padded, k)
    intensity = np.tensordot(k.coeffs, fields.real**2 + fields.imag**2, axes=1)
    return AerialImage(_crop(intensity, pads), getattr(mask, "nm_per_px", 1.0))


def aerial_image_vjp(
    mask: t.Union["MaskGrid", np.ndarray],
    k: LithoKernelSet,
    grad_intensity: np.ndarray,
    pad: bool = True,
) -> np.ndarray:
    """Gradient of sum(grad_intensity * aerial_image(mask)) with respect to the mask values.

    dL/dM = 2 * dose * sum_k alpha_k * Re(h_k^H (G . A_k)), with h_k^H the adjoint
    (correlation) of the periodic convolution and A_k the complex field.
    """
    values = _mask_values(mask)
    _check_dims(values, k)
    pads = _pad_widths(k) if pad else ((0, 0), (0, 0))
    padded = np.pad(values, pads) if pad else values
    grad = np.pad(np.asarray(grad_intensity, dtype=np.float64), pads)
    fields = _fields(padded, k)
    weighted = scipy.fft.fft2(grad[None] * fields, axes=(1, 2), workers=_fft_workers)
    back = scipy.fft.ifft2(
        np.conj(k.spectra(padded.shape)) * weighted, axes=(1, 2), workers=_fft_workers
    )
    grad_mask = 2.0 * k.dose * np.tensordot(k.coeffs, back.real, axes=1)
    return _crop(grad_mask, pads)


def resist(i: AerialImage, m: ResistModel) -> ResistImage:
    """Threshold resist: 0 where intensity < d_th, 1 otherwise (equality prints)"""
    return ResistImage((i.intensity >= m.d_th).astype(np.uint8), i.nm_per_px)


def resist_relaxed(i: AerialImage, m: ResistModel) -> np.ndarray:
    """Smooth resist logistic(steepness * (intensity - d_th)), values in (0, 1)"""
    return expit(m.sigmoid_steepness * (i.intensity - m.d_th))


def corner_images(
    mask: t.Union["MaskGrid", np.ndarray],
    nominal: LithoKernelSet,
    defocus: LithoKernelSet,
    doses: t.Sequence[float],
    m: ResistModel,
) -> t.List[ResistImage]:
    """Resist images at the process corners.

    Order: (nominal kernels, dose 1.0) first, then (defocus kernels, d) for each d in doses.
    Corner doses multiply the kernel set's own dose.

    Raises:
        LithoError: empty doses or incompatible dimensions
    """
    if not len(doses):
        raise LithoError("corner_images needs at least one dose")
    corners = [(nominal, 1.0)] + [(defocus, float(d)) for d in doses]
    return [
        resist(aerial_image(mask, kernels.with_dose(kernels.dose * dose)), m)
        for kernels, dose in corners
    ]


def open_frame_intensity(k: LithoKernelSet) -> float:
    """Intensity far inside an unbounded all-ones mask: dose^2 * sum_k alpha_k |sum h_k|^2"""
    sums = k.kernels.sum(axis=(1, 2))
    i0 = float(k.dose**2 * np.sum(k.coeffs * np.abs(sums) ** 2))
    if not i0 > 0:
        raise LithoError("kernel set has zero open-frame intensity")
    return i0


def _hermite_orders(limit: int) -> t.Iterator[t.Tuple[int, int]]:
    """(a, b) pairs ordered by total degree then a descending: (0,0), (1,0), (0,1), (2,0), ..."""
    for total in range(limit):
        for a in range(total, -1, -1):
            yield a, total - a


def make_synthetic_kernels(
    size: int,
    count: int,
    sigma_nm: float,
    defocus_blur: float,
    nm_per_px: float = 1.0,
    variant: str = NOMINAL,
    decay: float = 0.5,
) -> LithoKernelSet:
    """Build a synthetic SVD-like kernel set.

    Kernel 1 is an L2-normalized Gaussian low-pass of width sigma_nm; kernels 2..count
    are Hermite-modulated Gaussians orthogonalized against the previous ones
    (Gram-Schmidt), also L2-normalized. alpha_k = decay ** (k - 1). The defocus
    variant multiplies sigma by defocus_blur.

    Args:
        size: kernel side in pixels (>= 4)
        count: number of kernels (>= 1)
        sigma_nm: Gaussian width in nm
        defocus_blur: sigma multiplier for the defocus variant (>= 1)
        nm_per_px: pixel scale used to convert sigma to pixels
        variant: "nominal" or "defocus"
        decay: geometric ratio of the kernel weights, in (0, 1)

    Raises:
        LithoError: invalid parameters or kernels that cannot be orthogonalized on the grid
    """
    if size < 4 or count < 1:
        raise LithoError(f"need size >= 4 and count >= 1, got size={size} count={count}")
    if not sigma_nm > 0 or not nm_per_px > 0 or not defocus_blur >= 1:
        raise LithoError("sigma_nm and nm_per_px must be > 0 and defocus_blur >= 1")
    if not 0 < decay < 1:
        raise LithoError(f"decay must be in (0, 1), got {decay}")
    if variant not in VARIANTS:
        raise LithoError(f"unknown kernel variant {variant!r}")

    sigma = sigma_nm / nm_per_px * (defocus_blur if variant == DEFOCUS else 1.0)
    center = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) - center
    u, v = x / sigma, y / sigma
    gaussian = np.exp(-(u**2 + v**2) / 2.0)

    basis = []
    for a, b in _hermite_orders(size):
        ca = np.zeros(a + 1)
        ca[a] = 1.0
        cb = np.zeros(b + 1)
        cb[b] = 1.0
        candidate = (gaussian * hermite_e.hermeval(u, ca) * hermite_e.hermeval(v, cb)).astype(
            np.complex128
        )
        original_norm = np.linalg.norm(candidate)
        for q in basis:
            candidate = candidate - np.vdot(q, candidate) * q
        norm = np.linalg.norm(candidate)
        if original_norm == 0 or norm < 1e-8 * original_norm:
            continue
        basis.append(candidate / norm)
        if len(basis) == count:
            break
    if len(basis) < count:
        raise LithoError(
            f"cannot build {count} independent kernels on a {size}x{size} grid"
        )
    coeffs = decay ** np.arange(count, dtype=np.float64)
    return LithoKernelSet(np.array(basis), coeffs, variant=variant)


def make_synthetic_kernel_pair(
    size: int,
    count: int,
    sigma_nm: float,
    defocus_blur: float,
    nm_per_px: float = 1.0,
    decay: float = 0.5,
) -> t.Tuple[LithoKernelSet, LithoKernelSet]:
    """Return (nominal, defocus) synthetic kernel sets sharing every parameter but the blur"""
    return tuple(
        make_synthetic_kernels(size, count, sigma_nm, defocus_blur, nm_per_px, v, decay)
        for v in VARIANTS
    )


def save_kernels(path: t.Union[str, os.PathLike], k: LithoKernelSet):
    """Write k in the kernel file format with round-trip float formatting"""
    kh, kw = k.shape
    lines = [KERNEL_MAGIC, f"COUNT {k.count}", f"SIZE {kh} {kw}", f"VARIANT {k.variant}"]
    for alpha, kernel in zip(k.coeffs, k.kernels):
        lines.append(f"ALPHA {float(alpha)!r}")
        lines.extend(f"{float(c.real)!r} {float(c.imag)!r}" for c in kernel.reshape(-1))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def _header_value(line: t.Optional[str], keyword: str, nvalues: int) -> t.List[str]:
    fields = (line or "").split()
    if len(fields) != nvalues + 1 or fields[0] != keyword:
        raise KernelFormatError(f"expected '{keyword}' header line, got {line!r}")
    return fields[1:]


def load_kernels(path: t.Union[str, os.PathLike]) -> LithoKernelSet:
    """Read a kernel file.

    Raises:
        KernelFormatError: version mismatch, malformed or truncated body, or a COUNT that
            disagrees with the body (the error names the offending kernel index)
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = [line.strip() for line in f if line.strip()]
    lines_iter = iter(lines)

    magic = next(lines_iter, None)
    if magic != KERNEL_MAGIC:
        raise KernelFormatError(f"unsupported kernel file header {magic!r}, expected {KERNEL_MAGIC!r}")
    try:
        (count,) = map(int, _header_value(next(lines_iter, None), "COUNT", 1))
        kh, kw = map(int, _header_value(next(lines_iter, None), "SIZE", 2))
    except ValueError as e:
        raise KernelFormatError(f"bad integer in header: {e}") from e
    (variant,) = _header_value(next(lines_iter, None), "VARIANT", 1)
    if count < 1 or kh < 1 or kw < 1:
        raise KernelFormatError(f"COUNT and SIZE must be positive, got {count}, {kh}x{kw}")

    kernels = np.zeros((count, kh, kw), dtype=np.complex128)
    coeffs = np.zeros(count, dtype=np.float64)
    for idx in range(count):
        alpha_line = next(lines_iter, None)
        if alpha_line is None:
            raise KernelFormatError(f"missing; header declares COUNT {count}", idx)
        try:
            (alpha,) = _header_value(alpha_line, "ALPHA", 1)
            coeffs[idx] = float(alpha)
        except (KernelFormatError, ValueError) as e:
            raise KernelFormatError(f"bad ALPHA line {alpha_line!r}", idx) from e
        flat = kernels[idx].reshape(-1)
        for pos in range(kh * kw):
            line = next(lines_iter, None)
            if line is None:
                raise KernelFormatError(f"truncated after {pos} of {kh * kw} values", idx)
            parts = line.split()
            if len(parts) != 2:
                raise KernelFormatError(f"expected '<re> <im>', got {line!r}", idx)
            try:
                flat[pos] = complex(float(parts[0]), float(parts[1]))
            except ValueError as e:
                raise KernelFormatError(f"bad value {line!r}", idx) from e
    if next(lines_iter, None) is not None:
        raise KernelFormatError(f"unexpected data beyond COUNT {count}", count)
    try:
        return LithoKernelSet(kernels, coeffs, variant=variant)
    except LithoError as e:
        raise KernelFormatError(str(e)) from e
