"""Pixel-based inverse lithography: the numerical optimizer that labels training masks.

The mask is parameterized per pixel as M = logistic(mask_steepness * theta). The loss

    L = w_nom * sum (Z(M) - Zt)^2 + w_pvb * sum_d sum (Z_d(M) - Zt)^2

uses the relaxed resist Z = logistic(resist_steepness * (I - d_th)) of the aerial image
under the nominal kernels and, when w_pvb > 0, under the defocus kernels at every corner
dose d. Gradients come from the exact adjoint of the aerial image, so the optimizer
needs no autodiff graph.
"""

from __future__ import annotations

import math
import os
import typing as t
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from litho import (
    DEFAULT_DOSES,
    LithoKernelSet,
    ResistModel,
    aerial_image,
    aerial_image_vjp,
    resist_relaxed,
)
from utils import MaskinatorError, get_logger, save_pgm

if t.TYPE_CHECKING:
    from layout import LayoutRaster

__all__ = [
    "IltConfig",
    "IltDivergedError",
    "IltError",
    "MaskGrid",
    "binarize",
    "ilt_loss_and_grad",
    "ilt_optimize",
    "initial_theta",
    "write_loss_trace",
]

logger = get_logger("ilt")

# logit of a binary target is infinite; initialization clamps it to +/- this value
THETA_CLAMP = 4.0


class IltError(MaskinatorError):
    """Base class for ILT exceptions"""

    ...


class IltDivergedError(IltError):
    """Loss became non-finite during optimization"""

    def __init__(self, iteration: int, loss: float):
        self.iteration = iteration
        self.loss = loss
        super().__init__(
            f"loss is {loss} at iteration {iteration}; reduce step_size"
        )


@dataclass(frozen=True, eq=False)
class MaskGrid:
    """Continuous mask transmission, values in [0, 1]"""

    values: np.ndarray
    nm_per_px: float = 1.0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise IltError(f"mask must be 2-D, got shape {values.shape}")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise IltError("mask values must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> t.Tuple[int, int]:
        return self.values.shape

    def save_pgm(self, path: t.Union[str, os.PathLike]):
        save_pgm(path, self.values)


@dataclass(frozen=True)
class IltConfig:
    max_iters: int = 50
    step_size: float = 0.1
    mask_steepness: float = 4.0
    # None uses the resist model's own sigmoid steepness
    resist_steepness: t.Optional[float] = None
    target_weight_nominal: float = 1.0
    target_weight_pvb: float = 0.0
    binarize_threshold: float = 0.5
    momentum: float = 0.0
    doses: t.Tuple[float, ...] = DEFAULT_DOSES

    def __post_init__(self):
        if self.max_iters < 1:
            raise IltError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.step_size > 0:
            raise IltError(f"step_size must be > 0, got {self.step_size}")
        if not self.mask_steepness > 0:
            raise IltError("mask_steepness must be > 0")
        if self.resist_steepness is not None and not self.resist_steepness > 0:
            raise IltError("resist_steepness must be > 0")
        if self.target_weight_nominal < 0 or self.target_weight_pvb < 0:
            raise IltError("target weights must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise IltError("momentum must be in [0, 1)")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise IltError("binarize_threshold must be in (0, 1)")


def binarize(m: MaskGrid, threshold: float = 0.5) -> MaskGrid:
    """1 where value >= threshold, else 0

    Raises:
        IltError: threshold outside (0, 1)
    """
    if not 0.0 < threshold < 1.0:
        raise IltError(f"threshold must be in (0, 1), got {threshold}")
    return MaskGrid((m.values >= threshold).astype(np.float64), m.nm_per_px)


def initial_theta(target: "LayoutRaster", cfg: IltConfig) -> np.ndarray:
    """theta with logistic(mask_steepness * theta) equal to the clamped target"""
    values = np.clip(target.as_float(), 0.0, 1.0)
    with np.errstate(divide="ignore"):
        logits = np.clip(logit(values), -THETA_CLAMP, THETA_CLAMP)
    return logits / cfg.mask_steepness


def _mask_from_theta(theta: np.ndarray, cfg: IltConfig) -> np.ndarray:
    return expit(cfg.mask_steepness * theta)


def _resist_terms(
    nominal: LithoKernelSet,
    defocus: t.Optional[LithoKernelSet],
    cfg: IltConfig,
) -> t.List[t.Tuple[float, LithoKernelSet]]:
    terms = []
    if cfg.target_weight_nominal > 0:
        terms.append((cfg.target_weight_nominal, nominal))
    if cfg.target_weight_pvb > 0:
        if defocus is None:
            raise IltError("target_weight_pvb > 0 needs defocus kernels")
        terms.extend(
            (cfg.target_weight_pvb, defocus.with_dose(defocus.dose * d)) for d in cfg.doses
        )
    if not terms:
        raise IltError("all ILT target weights are zero")
    return terms


def ilt_loss_and_grad(
    theta: np.ndarray,
    target: "LayoutRaster",
    k: LithoKernelSet,
    rm: ResistModel,
    cfg: IltConfig,
    defocus: t.Optional[LithoKernelSet] = None,
) -> t.Tuple[float, np.ndarray]:
    """Relaxed ILT loss at theta and its gradient with respect to theta.

    Args:
        theta: mask parameters, same shape as target
        target: design raster Zt
        k: nominal kernel set
        rm: resist model; its threshold is used and, unless cfg.resist_steepness is
            set, its sigmoid steepness
        cfg: ILT configuration
        defocus: defocus kernels, required when cfg.target_weight_pvb > 0

    Returns:
        (loss, dloss/dtheta)
    """
    zt = target.as_float()
    if theta.shape != zt.shape:
        raise IltError(f"theta shape {theta.shape} does not match target {zt.shape}")
    steepness = cfg.resist_steepness or rm.sigmoid_steepness
    relaxed = ResistModel(rm.d_th, steepness)
    mask = _mask_from_theta(theta, cfg)

    loss = 0.0
    grad_mask = np.zeros_like(mask)
    for weight, kernels in _resist_terms(k, defocus, cfg):
        image = aerial_image(mask, kernels)
        z = resist_relaxed(image, relaxed)
        diff = z - zt
        loss += weight * float(np.sum(diff * diff))
        grad_intensity = 2.0 * weight * diff * steepness * z * (1.0 - z)
        grad_mask += aerial_image_vjp(mask, kernels, grad_intensity)

    grad_theta = grad_mask * cfg.mask_steepness * mask * (1.0 - mask)
    return loss, grad_theta


def ilt_optimize(
    target: "LayoutRaster",
    k: LithoKernelSet,
    rm: ResistModel,
    cfg: IltConfig = IltConfig(),
    defocus: t.Optional[LithoKernelSet] = None,
) -> t.Tuple[MaskGrid, t.List[float]]:
    """Optimize a mask for target by gradient descent on the relaxed loss.

    The trace holds the loss before every step plus the loss of the returned mask,
    so it has max_iters + 1 entries.

    Raises:
        IltDivergedError: the loss became NaN or infinite
        IltError: empty target or bad configuration
    """
    if target.pixels.size == 0:
        raise IltError("target is empty")
    theta = initial_theta(target, cfg)
    velocity = np.zeros_like(theta)
    trace: t.List[float] = []

    for iteration in range(cfg.max_iters + 1):
        loss, grad = ilt_loss_and_grad(theta, target, k, rm, cfg, defocus)
        if not math.isfinite(loss):
            raise IltDivergedError(iteration, loss)
        trace.append(loss)
        if iteration == cfg.max_iters:
            break
        velocity = cfg.momentum * velocity - cfg.step_size * grad
        theta = theta + velocity
        if iteration % 10 == 0:
            logger.debug(f"ilt iteration {iteration}: loss {loss:.6g}")

    mask = MaskGrid(_mask_from_theta(theta, cfg), target.nm_per_px)
    logger.debug(f"ilt finished: loss {trace[0]:.6g} -> {trace[-1]:.6g}")
    return mask, trace


def write_loss_trace(path: t.Union[str, os.PathLike], trace: t.Sequence[float]):
    """Write the loss trace as CSV with columns iter,loss"""
    frame = pd.DataFrame({"iter": range(len(trace)), "loss": list(trace)})
    frame.to_csv(path, index=False, lineterminator="\n")
