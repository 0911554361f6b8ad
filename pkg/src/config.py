"""Run configuration: one flat set of key = value settings with defaults for every module.

Text files hold `key = value` lines with `#` comments; paths ending in .plist are read and
written as property lists instead.
"""

from __future__ import annotations

import dataclasses
import os
import pathlib
import plistlib
import re
import typing as t
from dataclasses import dataclass

from cfno import CfnoArchitecture
from ilt import IltConfig
from layout import METAL_LIKE, VIA_LIKE, GeneratorSpec
from lgst import LgstConfig, TrainConfig
from litho import (
    LithoKernelSet,
    ResistModel,
    load_kernels,
    make_synthetic_kernel_pair,
)
from metrics import EpeSpec, LithoEvaluator
from tiling import TileSpec
from utils import MaskinatorError, get_logger

__all__ = ["ConfigError", "RunConfig", "parse_config", "serialize_config"]

logger = get_logger("config")

# `#` opens a comment only at line start or after whitespace
COMMENT = re.compile(r"(?:^|\s)#")

TRUE_VALUES = ("true", "yes", "on", "1")
FALSE_VALUES = ("false", "no", "off", "0")


class ConfigError(MaskinatorError):
    """Invalid configuration file or override"""

    ...


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    debug: bool = False

    # geometry
    nm_per_px: float = 20.0
    canvas_nm: int = 2560

    # kernels; empty file names select synthetic kernels
    kernel_file: str = ""
    defocus_kernel_file: str = ""
    kernel_size: int = 15
    kernel_count: int = 4
    kernel_sigma_nm: float = 50.0
    kernel_decay: float = 0.5
    defocus_blur: float = 1.25
    doses: t.Tuple[float, ...] = (0.98, 1.02)

    # resist; d_th = 0 calibrates the threshold against the open-frame intensity
    d_th: float = 0.0
    threshold_fraction: float = 0.225
    relative_steepness: float = 50.0

    # EPE
    epe_tolerance_nm: float = 15.0
    epe_spacing_nm: float = 40.0
    epe_min_edge_nm: float = 40.0

    # ILT
    ilt_max_iters: int = 30
    ilt_step_size: float = 0.1
    ilt_mask_steepness: float = 4.0
    ilt_pvb_weight: float = 0.0
    ilt_momentum: float = 0.0
    binarize_threshold: float = 0.5

    # training; desk scale runs more, smaller steps than TrainConfig
    epochs: int = 40
    lr: float = 0.004
    lr_step: int = 10
    lr_gamma: float = 0.5
    batch_size: int = 4
    loss: str = "l1"

    # CFNO
    token_sizes: t.Tuple[int, ...] = (8, 16, 32)
    token_reach: int = 1
    channels: int = 16
    head_channels: int = 16
    per_channel_token_conv: bool = False
    model_dtype: str = "float32"

    # LGST
    lgst_rounds: int = 5
    lgst_pvb_weight: float = 0.0
    cold_restart: bool = False

    # tiling
    clip_nm: int = 6000
    tile_nm: int = 2000
    stride_nm: int = 1000

    # synthetic dataset
    dataset_size: int = 64
    via_fraction: float = 0.5
    via_density: float = 0.08
    via_feature_nm: int = 100
    via_space_nm: int = 100
    metal_density: float = 0.25
    metal_feature_nm: int = 80
    metal_space_nm: int = 80

    def __post_init__(self):
        if not self.nm_per_px > 0:
            raise ConfigError(f"nm_per_px must be > 0, got {self.nm_per_px}")
        if self.dataset_size < 1:
            raise ConfigError("dataset_size must be >= 1")
        if not 0.0 <= self.via_fraction <= 1.0:
            raise ConfigError("via_fraction must be in [0, 1]")
        if not self.doses:
            raise ConfigError("doses must list at least one value")

    @classmethod
    def keys(cls) -> t.List[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def with_overrides(self, pairs: t.Iterable[str]) -> RunConfig:
        """Apply `key=value` overrides as given on the command line"""
        changes = {}
        for pair in pairs:
            key, sep, value = pair.partition("=")
            if not sep:
                raise ConfigError(f"override {pair!r} is not key=value")
            key = key.strip()
            changes[key] = _parse_value(key, value.strip())
        return dataclasses.replace(self, **changes)

    @classmethod
    def load(cls, path: t.Union[str, os.PathLike]) -> RunConfig:
        """Read a config file; .plist files are property lists, anything else key = value text

        Raises:
            ConfigError: unreadable file, unknown key or bad value
        """
        path = pathlib.Path(path)
        logger.debug(f"loading config from {path}")
        try:
            if path.suffix == ".plist":
                with open(path, "rb") as fd:
                    values = plistlib.load(fd)
                return _from_mapping(values, str(path))
            return parse_config(path.read_text(encoding="utf-8"))
        except (OSError, plistlib.InvalidFileException) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e

    def save(self, path: t.Union[str, os.PathLike]):
        path = pathlib.Path(path)
        if path.suffix == ".plist":
            values = {
                key: list(value) if isinstance(value, tuple) else value
                for key, value in dataclasses.asdict(self).items()
            }
            with open(path, "wb") as fd:
                plistlib.dump(values, fd)
        else:
            with open(path, "w", encoding="utf-8", newline="\n") as fd:
                fd.write(serialize_config(self))

    # objects built from the settings

    def kernels(self) -> t.Tuple[LithoKernelSet, LithoKernelSet]:
        """(nominal, defocus) kernel sets, from files when named, else synthetic"""
        nominal, defocus = make_synthetic_kernel_pair(
            self.kernel_size,
            self.kernel_count,
            self.kernel_sigma_nm,
            self.defocus_blur,
            self.nm_per_px,
            self.kernel_decay,
        )
        if self.kernel_file:
            nominal = load_kernels(self.kernel_file)
        if self.defocus_kernel_file:
            defocus = load_kernels(self.defocus_kernel_file)
        return nominal, defocus

    def resist_model(self, nominal: LithoKernelSet) -> ResistModel:
        calibrated = ResistModel.calibrated(nominal, self.threshold_fraction, self.relative_steepness)
        if self.d_th > 0:
            return ResistModel(self.d_th, calibrated.sigmoid_steepness)
        return calibrated

    def epe_spec(self) -> EpeSpec:
        return EpeSpec(self.epe_tolerance_nm, self.epe_spacing_nm, self.epe_min_edge_nm)

    def evaluator(self) -> LithoEvaluator:
        nominal, defocus = self.kernels()
        return LithoEvaluator(
            nominal=nominal,
            resist_model=self.resist_model(nominal),
            defocus=defocus,
            doses=self.doses,
            epe_spec=self.epe_spec(),
            binarize_threshold=self.binarize_threshold,
        )

    def ilt_config(self) -> IltConfig:
        return IltConfig(
            max_iters=self.ilt_max_iters,
            step_size=self.ilt_step_size,
            mask_steepness=self.ilt_mask_steepness,
            target_weight_pvb=self.ilt_pvb_weight,
            binarize_threshold=self.binarize_threshold,
            momentum=self.ilt_momentum,
            doses=self.doses,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            lr=self.lr,
            lr_step=self.lr_step,
            lr_gamma=self.lr_gamma,
            batch_size=self.batch_size,
            loss=self.loss,
            seed=self.seed,
        )

    def lgst_config(self) -> LgstConfig:
        return LgstConfig(
            rounds=self.lgst_rounds,
            pvb_weight=self.lgst_pvb_weight,
            cold_restart=self.cold_restart,
            binarize_threshold=self.binarize_threshold,
        )

    def cfno_architecture(self) -> CfnoArchitecture:
        return CfnoArchitecture(
            token_sizes=self.token_sizes,
            s=self.token_reach,
            d=self.channels,
            head_channels=self.head_channels,
            per_channel_token_conv=self.per_channel_token_conv,
            dtype=self.model_dtype,
        )

    def tile_spec(self) -> TileSpec:
        return TileSpec(self.clip_nm, self.tile_nm, self.stride_nm)

    def generator_specs(self) -> t.List[GeneratorSpec]:
        """One spec per dataset design: the first via_fraction are via-like, the rest metal-like"""
        vias = round(self.dataset_size * self.via_fraction)
        specs = []
        for i in range(self.dataset_size):
            if i < vias:
                specs.append(
                    GeneratorSpec(
                        VIA_LIKE, self.seed * 100003 + i, self.via_density,
                        self.via_feature_nm, self.via_space_nm, self.canvas_nm,
                    )
                )
            else:
                specs.append(
                    GeneratorSpec(
                        METAL_LIKE, self.seed * 100003 + i, self.metal_density,
                        self.metal_feature_nm, self.metal_space_nm, self.canvas_nm,
                    )
                )
        return specs


_TYPES: t.Dict[str, t.Any] = {}


def _field_type(key: str) -> t.Any:
    if not _TYPES:
        _TYPES.update(t.get_type_hints(RunConfig))
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    return _TYPES[key]


def _parse_scalar(kind: type, key: str, text: str):
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in TRUE_VALUES:
                return True
            if lowered in FALSE_VALUES:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind is int:
            return int(text, 10)
        if kind is float:
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e


def _parse_value(key: str, text: str):
    kind = _field_type(key)
    if t.get_origin(kind) is tuple:
        item = t.get_args(kind)[0]
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(_parse_scalar(item, key, p) for p in parts)
    return _parse_scalar(kind, key, text)


def _coerce(key: str, value):
    """Check a plist value against the field type"""
    kind = _field_type(key)
    if t.get_origin(kind) is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        item = t.get_args(kind)[0]
        return tuple(_coerce_scalar(item, key, v) for v in value)
    return _coerce_scalar(kind, key, value)


def _coerce_scalar(kind: type, key: str, value):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is bool and not isinstance(value, bool):
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}")
    return value


def _from_mapping(values: t.Mapping[str, t.Any], source: str) -> RunConfig:
    if not isinstance(values, dict):
        raise ConfigError(f"{source}: expected a dictionary of settings")
    return RunConfig(**{key: _coerce(key, value) for key, value in values.items()})


def parse_config(text: str) -> RunConfig:
    """Parse `key = value` lines; `#` at line start or after whitespace starts a comment

    Raises:
        ConfigError: malformed line, unknown key, duplicate key or bad value
    """
    values: t.Dict[str, t.Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = COMMENT.split(line, maxsplit=1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _parse_value(key, value.strip())
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from e
    return RunConfig(**values)


def _format_scalar(key: str, value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    text = str(value)
    if isinstance(value, str) and (
        COMMENT.search(text) or "\n" in text or "\r" in text or text != text.strip()
    ):
        raise ConfigError(f"{key}: {text!r} cannot be written to a text config")
    return text


def serialize_config(c: RunConfig) -> str:
    """`key = value` text that parse_config reads back to c

    Raises:
        ConfigError: a string value that would not survive parsing
    """
    lines = []
    for key, value in dataclasses.asdict(c).items():
        if isinstance(value, tuple):
            text = ", ".join(_format_scalar(key, v) for v in value)
        else:
            text = _format_scalar(key, value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
