"""Convolutional Fourier Neural Operator mask predictor.

Four embedding paths read the (padded) design:

    CFNO path k: tokenize into k x k tokens -> token-shared FNO unit -> token-wise conv -> detokenize
    conv path:   3x3 conv -> 3x3 conv stride 2 -> 3x3 transposed conv stride 2

Their d-channel outputs are concatenated and aggregated by a 1x1 conv; the head (3x3 conv
stride 2, 3x3 transposed conv stride 2, 3x3 conv to one channel) ends in a logistic
output so every mask value lies in (0, 1).
"""

from __future__ import annotations

import math
import os
import typing as t
from dataclasses import asdict, dataclass

import numpy as np

import tensor_ad as ad
from ilt import MaskGrid
from tensor_ad import Tensor
from utils import MaskinatorError, get_logger

if t.TYPE_CHECKING:
    from layout import LayoutRaster

__all__ = [
    "CfnoArchitecture",
    "CfnoError",
    "CfnoNet",
    "ParameterAudit",
    "PathAudit",
    "cfno_path",
    "complexity_estimate",
    "conv_path",
    "fno_unit",
    "parameter_audit",
]

logger = get_logger("cfno")

ARCHITECTURE_KEY = "__architecture__"
DTYPES = ("float32", "float64")


class CfnoError(MaskinatorError):
    """Base class for CFNO exceptions"""

    ...


@dataclass(frozen=True)
class CfnoArchitecture:
    """Network shape; d is the channel count every path emits"""

    token_sizes: t.Tuple[int, ...] = (8, 16, 32)
    s: int = 1
    d: int = 16
    # kept modes per axis for each CFNO path; empty keeps k // 2
    modes: t.Tuple[int, ...] = ()
    head_channels: int = 16
    in_channels: int = 1
    per_channel_token_conv: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "token_sizes", tuple(int(k) for k in self.token_sizes))
        object.__setattr__(self, "modes", tuple(int(m) for m in self.modes))
        if len(self.token_sizes) != 3:
            raise CfnoError(f"expected three CFNO paths, got token sizes {self.token_sizes}")
        if any(k < 2 for k in self.token_sizes):
            raise CfnoError(f"token sizes must be >= 2, got {self.token_sizes}")
        if len(set(self.token_sizes)) != len(self.token_sizes):
            raise CfnoError(f"token sizes must be distinct, got {self.token_sizes}")
        if self.modes and len(self.modes) != len(self.token_sizes):
            raise CfnoError("modes needs one entry per token size")
        for k in self.token_sizes:
            mh, mw = self.kept_modes(k)
            if not (1 <= mh <= k and 1 <= mw <= k // 2 + 1):
                raise CfnoError(f"kept modes {(mh, mw)} exceed the spectrum of a {k}x{k} token")
        if self.s < 0 or self.d < 1 or self.head_channels < 1 or self.in_channels < 1:
            raise CfnoError("s must be >= 0 and channel counts >= 1")
        if self.dtype not in DTYPES:
            raise CfnoError(f"dtype must be one of {DTYPES}, got {self.dtype}")

    def kept_modes(self, k: int) -> t.Tuple[int, int]:
        """(rows, columns) of the kept half spectrum for the path with token size k"""
        if self.modes:
            m = self.modes[self.token_sizes.index(k)]
        else:
            m = max(k // 2, 1)
        return m, min(m, k // 2 + 1)

    @property
    def multiple(self) -> int:
        """Inputs are zero-padded to a multiple of this"""
        return math.lcm(2, *self.token_sizes)

    @property
    def real_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    @property
    def complex_dtype(self) -> np.dtype:
        return np.dtype(np.complex64 if self.dtype == "float32" else np.complex128)

    def to_record(self) -> t.Dict[str, t.Any]:
        return asdict(self)

    @classmethod
    def from_record(cls, record: t.Mapping[str, t.Any]) -> CfnoArchitecture:
        try:
            return cls(**record)
        except TypeError as e:
            raise CfnoError(f"bad architecture record: {e}") from e


def fno_unit(
    v: Tensor,
    lift_w: Tensor,
    lift_b: t.Optional[Tensor],
    freq_w: Tensor,
    proj_w: Tensor,
    proj_b: t.Optional[Tensor],
    activate: bool = True,
) -> Tensor:
    """Token-shared FNO unit on a batch of tokens (N, C, k, k).

    Lift channels, transform each channel, multiply the kept low modes by freq_w
    (modes_h, modes_w, d_in, d_out) with the rest zeroed, transform back, project,
    then apply GELU unless activate is False.
    """
    if v.ndim != 4 or v.dims[2] != v.dims[3]:
        raise CfnoError(f"fno_unit expects square tokens (N, C, k, k), got {v.dims}")
    k = v.dims[2]
    modes_h, modes_w = freq_w.dims[:2]
    u = ad.channel_lift(v, lift_w, lift_b)
    spectrum = ad.take_modes(ad.rfft2(u), modes_h, modes_w)
    mixed = ad.embed_modes(ad.spectral_mix(spectrum, freq_w), k, k // 2 + 1)
    out = ad.channel_project(ad.irfft2(mixed, (k, k)), proj_w, proj_b)
    return ad.gelu(out) if activate else out


def cfno_path(x: Tensor, k: int, p: t.Mapping[str, Tensor], prefix: str) -> Tensor:
    """tokenize -> FNO unit -> token conv -> detokenize; (B, C, H, W) -> (B, d, H, W)"""
    tokens = ad.tokenize(x, k)
    batch, m, n = tokens.dims[:3]
    embedded = fno_unit(
        ad.tokens_as_batch(tokens),
        p[f"{prefix}.lift_w"],
        p[f"{prefix}.lift_b"],
        p[f"{prefix}.freq_w"],
        p[f"{prefix}.proj_w"],
        p[f"{prefix}.proj_b"],
    )
    grid = ad.batch_as_tokens(embedded, batch, m, n)
    return ad.detokenize(ad.token_conv(grid, p[f"{prefix}.token_w"]))


def conv_path(x: Tensor, p: t.Mapping[str, Tensor]) -> Tensor:
    y = ad.gelu(ad.conv2d(x, p["conv.w1"], p["conv.b1"], stride=1, padding=1))
    y = ad.gelu(ad.conv2d(y, p["conv.w2"], p["conv.b2"], stride=2, padding=1))
    return ad.gelu(
        ad.conv_transpose2d(y, p["conv.wt"], p["conv.bt"], stride=2, padding=1, output_padding=1)
    )


def _path_prefix(k: int) -> str:
    return f"cfno{k}"


def _uniform(rng: np.random.Generator, shape: t.Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(arch: CfnoArchitecture, seed: int = 0) -> t.Dict[str, np.ndarray]:
    """Fresh parameters.

    Conv and channel-map weights are uniform in +/- 1/sqrt(fan_in), biases zero,
    frequency weights complex Gaussian scaled by 1/(d * modes), token kernels start
    as the identity (1 at the center offset).
    """
    rng = np.random.default_rng(seed)
    d, h, c_in = arch.d, arch.head_channels, arch.in_channels
    side = 2 * arch.s + 1
    params: t.Dict[str, np.ndarray] = {}
    for k in arch.token_sizes:
        prefix = _path_prefix(k)
        mh, mw = arch.kept_modes(k)
        params[f"{prefix}.lift_w"] = _uniform(rng, (d, c_in), c_in)
        params[f"{prefix}.lift_b"] = np.zeros(d)
        freq = rng.standard_normal((mh, mw, d, d)) + 1j * rng.standard_normal((mh, mw, d, d))
        params[f"{prefix}.freq_w"] = freq / (d * mh)
        params[f"{prefix}.proj_w"] = _uniform(rng, (d, d), d)
        params[f"{prefix}.proj_b"] = np.zeros(d)
        token_shape = (side, side, d) if arch.per_channel_token_conv else (side, side)
        token_w = np.zeros(token_shape)
        token_w[arch.s, arch.s] = 1.0
        params[f"{prefix}.token_w"] = token_w

    params["conv.w1"] = _uniform(rng, (d, c_in, 3, 3), c_in * 9)
    params["conv.b1"] = np.zeros(d)
    params["conv.w2"] = _uniform(rng, (d, d, 3, 3), d * 9)
    params["conv.b2"] = np.zeros(d)
    params["conv.wt"] = _uniform(rng, (d, d, 3, 3), d * 9)
    params["conv.bt"] = np.zeros(d)

    paths = len(arch.token_sizes) + 1
    params["agg.w"] = _uniform(rng, (d, paths * d, 1, 1), paths * d)
    params["agg.b"] = np.zeros(d)

    params["head.w1"] = _uniform(rng, (h, d, 3, 3), d * 9)
    params["head.b1"] = np.zeros(h)
    params["head.wt"] = _uniform(rng, (h, h, 3, 3), h * 9)
    params["head.bt"] = np.zeros(h)
    params["head.w2"] = _uniform(rng, (1, h, 3, 3), h * 9)
    params["head.b2"] = np.zeros(1)

    return {name: _cast(arch, value) for name, value in params.items()}


def _cast(arch: CfnoArchitecture, value: np.ndarray) -> np.ndarray:
    dtype = arch.complex_dtype if np.iscomplexobj(value) else arch.real_dtype
    return np.ascontiguousarray(value, dtype=dtype)


class CfnoNet:
    """CFNO parameters plus the forward pass.

    Parameters live as plain arrays in self.params. Each forward pass binds them to
    Tensor leaves (see leaf_tensors) so concurrent shards build independent graphs
    over the same arrays.
    """

    def __init__(
        self,
        arch: CfnoArchitecture = CfnoArchitecture(),
        params: t.Optional[t.Mapping[str, np.ndarray]] = None,
        seed: int = 0,
    ):
        self.arch = arch
        fresh = init_params(arch, seed)
        if params is None:
            self.params = fresh
        else:
            self.params = {}
            for name, value in fresh.items():
                if name not in params:
                    raise CfnoError(f"missing parameter {name}")
                if np.shape(params[name]) != value.shape:
                    raise CfnoError(
                        f"parameter {name} has dims {np.shape(params[name])}, expected {value.shape}"
                    )
                self.params[name] = _cast(arch, np.asarray(params[name]))
            extra = set(params) - set(fresh)
            if extra:
                raise CfnoError(f"unexpected parameters {sorted(extra)}")

    def leaf_tensors(self, requires_grad: bool = True) -> t.Dict[str, Tensor]:
        return {name: Tensor(value, requires_grad=requires_grad) for name, value in self.params.items()}

    def _as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        values = x.as_float() if hasattr(x, "as_float") else np.asarray(x)
        values = np.asarray(values, dtype=self.arch.real_dtype)
        if values.ndim == 2:
            values = values[None, None]
        elif values.ndim == 3:
            values = values[:, None]
        if values.ndim != 4 or values.shape[1] != self.arch.in_channels:
            raise CfnoError(f"input must be (H, W), (B, H, W) or (B, C, H, W), got {values.shape}")
        return Tensor(values)

    def forward(self, x, params: t.Optional[t.Mapping[str, Tensor]] = None) -> Tensor:
        """Mask probabilities (B, 1, H, W) for designs x.

        Args:
            x: (H, W), (B, H, W) or (B, C, H, W) array, LayoutRaster or Tensor
            params: tensors bound to the parameters; constant leaves when None
        """
        p = self.leaf_tensors(requires_grad=False) if params is None else params
        x = self._as_input(x)
        height, width = x.dims[2:]
        multiple = self.arch.multiple
        pad_h, pad_w = -height % multiple, -width % multiple
        if pad_h or pad_w:
            x = ad.pad2d(x, ((0, pad_h), (0, pad_w)))

        paths = [cfno_path(x, k, p, _path_prefix(k)) for k in self.arch.token_sizes]
        paths.append(conv_path(x, p))
        y = ad.gelu(ad.conv2d(ad.concat_channels(paths), p["agg.w"], p["agg.b"]))

        y = ad.gelu(ad.conv2d(y, p["head.w1"], p["head.b1"], stride=2, padding=1))
        y = ad.gelu(
            ad.conv_transpose2d(y, p["head.wt"], p["head.bt"], stride=2, padding=1, output_padding=1)
        )
        y = ad.sigmoid(ad.conv2d(y, p["head.w2"], p["head.b2"], padding=1))
        if pad_h or pad_w:
            y = ad.crop2d(y, 0, 0, height, width)
        return y

    __call__ = forward

    def predict(self, design: t.Union["LayoutRaster", np.ndarray]) -> MaskGrid:
        """Continuous mask for one design"""
        with ad.no_grad():
            out = self.forward(design)
        values = np.clip(out.data[0, 0].astype(np.float64), 0.0, 1.0)
        return MaskGrid(values, getattr(design, "nm_per_px", 1.0))

    def parameter_breakdown(self) -> t.Dict[str, int]:
        """Parameter count per group (each CFNO path, conv path, aggregation, head).

        Complex frequency weights count one parameter per complex entry.
        """
        counts: t.Dict[str, int] = {}
        for name, value in self.params.items():
            group = name.split(".", 1)[0]
            counts[group] = counts.get(group, 0) + int(value.size)
        return counts

    def parameter_count(self) -> int:
        return sum(self.parameter_breakdown().values())

    def save(self, path: t.Union[str, os.PathLike]):
        tensors = {ARCHITECTURE_KEY: ad.encode_record(self.arch.to_record())}
        tensors.update(self.params)
        ad.write_checkpoint(path, tensors)
        logger.debug(f"saved {self.parameter_count()} parameters to {os.fspath(path)}")

    @classmethod
    def load(cls, path: t.Union[str, os.PathLike]) -> CfnoNet:
        """Rebuild a network from its self-describing checkpoint

        Raises:
            CheckpointFormatError: malformed file
            CfnoError: architecture record missing or parameters inconsistent with it
        """
        tensors = ad.read_checkpoint(path)
        if ARCHITECTURE_KEY not in tensors:
            raise CfnoError(f"{os.fspath(path)} has no architecture record")
        arch = CfnoArchitecture.from_record(ad.decode_record(tensors.pop(ARCHITECTURE_KEY)))
        return cls(arch, tensors)


def complexity_estimate(
    kind: str, N: int, k: int, s: int, m: int, n: int, d: int
) -> t.Tuple[float, int]:
    """Asymptotic cost of one embedding layer, returned as (flops, params).

    FNO:  flops N log N + N d^2, params N d^2
    CFNO: flops N log k^2 + s^2 m n d^2, params s^2 d^2
    Logarithms are base 2.

    Raises:
        CfnoError: unknown kind or N != m n k^2
    """
    if min(N, k, m, n, d) < 1 or s < 0:
        raise CfnoError("sizes must be positive and s >= 0")
    if N != m * n * k * k:
        raise CfnoError(f"inconsistent sizes: N={N} but m*n*k^2={m * n * k * k}")
    kind = kind.upper()
    if kind == "FNO":
        return N * math.log2(N) + N * d * d, N * d * d
    if kind == "CFNO":
        return N * math.log2(k * k) + s * s * m * n * d * d, s * s * d * d
    raise CfnoError(f"unknown model kind {kind!r}; expected FNO or CFNO")


class PathAudit(t.NamedTuple):
    """Closed-form parameter terms of one CFNO path"""

    group: str
    spectral: int
    channel_maps: int
    token_kernel: int
    estimated: int

    @property
    def total(self) -> int:
        return self.spectral + self.channel_maps + self.token_kernel

    @property
    def gap(self) -> int:
        """Parameters the s^2 d^2 estimate leaves out"""
        return self.total - self.estimated


@dataclass(frozen=True)
class ParameterAudit:
    """Parameter count of an architecture rebuilt from closed-form terms.

    The asymptotic estimate only covers the token kernels (s^2 d^2 per path); the
    spectral weights, channel maps, conv path, aggregation and head make up the gap.
    """

    paths: t.Tuple[PathAudit, ...]
    conv: int
    aggregation: int
    head: int

    @property
    def total(self) -> int:
        return sum(p.total for p in self.paths) + self.conv + self.aggregation + self.head

    @property
    def estimated_total(self) -> int:
        return sum(p.estimated for p in self.paths)

    @property
    def gap(self) -> int:
        return self.total - self.estimated_total

    def breakdown(self) -> t.Dict[str, int]:
        """Same grouping as CfnoNet.parameter_breakdown"""
        counts = {p.group: p.total for p in self.paths}
        counts.update(conv=self.conv, agg=self.aggregation, head=self.head)
        return counts


def parameter_audit(arch: CfnoArchitecture) -> ParameterAudit:
    """Count the parameters of arch term by term, next to the asymptotic estimate"""
    d, h, c_in, s = arch.d, arch.head_channels, arch.in_channels, arch.s
    side = 2 * s + 1
    paths = []
    for k in arch.token_sizes:
        mh, mw = arch.kept_modes(k)
        _, estimated = complexity_estimate("CFNO", k * k, k, s, 1, 1, d)
        paths.append(
            PathAudit(
                group=_path_prefix(k),
                spectral=mh * mw * d * d,
                channel_maps=(d * c_in + d) + (d * d + d),
                token_kernel=side * side * (d if arch.per_channel_token_conv else 1),
                estimated=estimated,
            )
        )
    conv = (9 * d * c_in + d) + 2 * (9 * d * d + d)
    aggregation = (len(arch.token_sizes) + 1) * d * d + d
    head = (9 * h * d + h) + (9 * h * h + h) + (9 * h + 1)
    audit = ParameterAudit(tuple(paths), conv, aggregation, head)
    logger.debug(
        f"{audit.total} parameters, asymptotic estimate {audit.estimated_total}, gap {audit.gap}"
    )
    return audit
