"""Reverse-mode differentiation over the closed set of operations the CFNO needs.

Every op takes and returns Tensor objects. When grad mode is on and an input requires
grad, the result records its parents and a backward closure mapping the output
gradient to one gradient per parent. Tensor.backward() walks the graph in reverse
topological order and accumulates into the .grad of leaf tensors.

Gradients of complex tensors follow the convention g = dL/dRe(z) + i dL/dIm(z) for the
real loss L. For a complex-linear map y = A x this gives g_x = A^H g_y, and real
tensors receive the real part of whatever flows into them.
"""

from __future__ import annotations

import contextlib
import json
import math
import os
import struct
import threading
import typing as t
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from utils import MaskinatorError, get_logger

__all__ = [
    "Adam",
    "AdamState",
    "AnomalyError",
    "AutogradError",
    "CheckpointFormatError",
    "ShapeError",
    "Tensor",
    "adam_step",
    "batch_as_tokens",
    "decode_record",
    "encode_record",
    "add",
    "channel_lift",
    "channel_linear",
    "channel_project",
    "complex_pointwise_mul",
    "concat_channels",
    "conv2d",
    "conv_transpose2d",
    "crop2d",
    "detokenize",
    "embed_modes",
    "fft2",
    "gelu",
    "ifft2",
    "irfft2",
    "is_grad_enabled",
    "l1_loss",
    "l2_loss",
    "lr_schedule",
    "mode_indices",
    "no_grad",
    "pad2d",
    "read_checkpoint",
    "rfft2",
    "scale",
    "set_detect_anomaly",
    "sigmoid",
    "spectral_mix",
    "take_modes",
    "token_conv",
    "tokenize",
    "tokens_as_batch",
    "transposed_conv2d",
    "write_checkpoint",
]

logger = get_logger("tensor_ad")

ArrayLike = t.Union[np.ndarray, float, int, complex, t.Sequence]
Backward = t.Callable[[np.ndarray], t.Sequence[t.Optional[np.ndarray]]]


class AutogradError(MaskinatorError):
    """Base class for autodiff exceptions"""

    ...


class ShapeError(AutogradError):
    """Operand shapes are incompatible with the operation"""

    ...


class AnomalyError(AutogradError):
    """NaN or infinity detected while anomaly detection is on"""

    ...


class CheckpointFormatError(AutogradError):
    """Checkpoint file is malformed"""

    ...


_grad_state = threading.local()
_detect_anomaly = False


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Context manager that disables graph recording on the current thread"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def set_detect_anomaly(enabled: bool):
    """Check every forward result and backward gradient for NaN/inf"""
    global _detect_anomaly
    _detect_anomaly = bool(enabled)
    logger.debug(f"anomaly detection {'on' if enabled else 'off'}")


def _check_finite(values: np.ndarray, what: str):
    if _detect_anomaly and not np.all(np.isfinite(values)):
        raise AnomalyError(f"non-finite values in {what}")


class Tensor:
    """n-dimensional real or complex array with an optional gradient accumulator"""

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: t.Optional[np.ndarray] = None
        self._parents: t.Tuple[Tensor, ...] = ()
        self._backward: t.Optional[Backward] = None
        self._op = ""
        self._freed = False

    @property
    def dims(self) -> t.Tuple[int, ...]:
        return self.data.shape

    shape = dims

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._freed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(dims={self.dims}, dtype={self.dtype}, requires_grad={self.requires_grad}{op})"

    def __add__(self, other) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, (int, float, complex)):
            return scale(self, other)
        return complex_pointwise_mul(self, other)

    __rmul__ = __mul__

    def _accumulate(self, grad: np.ndarray):
        if not self.is_complex:
            grad = np.real(grad)
        grad = grad.astype(self.dtype, copy=False)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def _topological_order(self) -> t.List[Tensor]:
        order: t.List[Tensor] = []
        seen: t.Set[int] = set()
        stack: t.List[t.Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if p.requires_grad)
        order.reverse()
        return order

    def backward(self, grad: t.Optional[ArrayLike] = None, retain_graph: bool = False):
        """Accumulate d(self)/d(leaf) into the .grad of every leaf that requires grad.

        Args:
            grad: upstream gradient; may be omitted for single-element tensors
            retain_graph: keep the recorded graph so backward can be called again

        Raises:
            AutogradError: self does not require grad, the graph was already freed,
                or grad is missing for a multi-element tensor
        """
        if not self.requires_grad:
            raise AutogradError("backward() on a tensor that is not part of a recorded graph")
        if self._freed:
            raise AutogradError("graph already freed by backward(); use retain_graph=True")
        if grad is None:
            if self.data.size != 1:
                raise AutogradError("grad must be given for a tensor with more than one element")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad)
        if grad.shape != self.dims:
            raise ShapeError(f"grad dims {grad.shape} != tensor dims {self.dims}")

        pending: t.Dict[int, np.ndarray] = {id(self): grad}
        for node in self._topological_order():
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._freed:
                raise AutogradError("graph already freed by backward(); use retain_graph=True")
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if not parent.is_complex:
                    pg = np.real(pg)
                _check_finite(pg, f"gradient of {node._op}")
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
            if not retain_graph:
                node._parents = ()
                node._backward = None
                node._freed = True


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: t.Sequence[Tensor], backward: Backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: t.Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _require_ndim(x: Tensor, ndim: int, op: str):
    if x.ndim != ndim:
        raise ShapeError(f"{op} expects a {ndim}-D tensor, got dims {x.dims}")


# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: dims {a.dims} and {b.dims} do not broadcast") from e

    def backward(g):
        return _unbroadcast(g, a.dims), _unbroadcast(g, b.dims)

    return _result(data, (a, b), backward, "add")


def scale(x: Tensor, c: t.Union[float, complex]) -> Tensor:
    """Multiply by a constant"""
    x = _as_tensor(x)

    def backward(g):
        return (np.conj(c) * g,)

    return _result(x.data * c, (x,), backward, "scale")


def complex_pointwise_mul(a, b) -> Tensor:
    """Elementwise product with broadcasting; real or complex operands"""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: dims {a.dims} and {b.dims} do not broadcast") from e

    def backward(g):
        return (
            _unbroadcast(np.conj(b.data) * g, a.dims),
            _unbroadcast(np.conj(a.data) * g, b.dims),
        )

    return _result(data, (a, b), backward, "mul")


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, exact form 0.5 x (1 + erf(x / sqrt 2))"""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    data = (x.data * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x.data * pdf),)

    return _result(data, (x,), backward, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    data = expit(x.data)

    def backward(g):
        return (g * data * (1.0 - data),)

    return _result(data, (x,), backward, "sigmoid")


def concat_channels(tensors: t.Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along the channel axis"""
    tensors = [_as_tensor(x) for x in tensors]
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    try:
        data = np.concatenate([x.data for x in tensors], axis=axis)
    except ValueError as e:
        dims = [x.dims for x in tensors]
        raise ShapeError(f"concat_channels: incompatible dims {dims}") from e
    bounds = np.cumsum([x.dims[axis] for x in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tensors, backward, "concat_channels")


# Fourier transforms over the last two axes


def fft2(x: Tensor) -> Tensor:
    size = x.dims[-2] * x.dims[-1]

    def backward(g):
        return (size * scipy.fft.ifft2(g),)

    return _result(scipy.fft.fft2(x.data), (x,), backward, "fft2")


def ifft2(x: Tensor) -> Tensor:
    size = x.dims[-2] * x.dims[-1]

    def backward(g):
        return (scipy.fft.fft2(g) / size,)

    return _result(scipy.fft.ifft2(x.data), (x,), backward, "ifft2")


def rfft2(x: Tensor) -> Tensor:
    """Half spectrum of a real input, last axis W -> W // 2 + 1"""
    if x.is_complex:
        raise ShapeError("rfft2 expects a real tensor")
    height, width = x.dims[-2:]

    def backward(g):
        full = np.zeros(g.shape[:-1] + (width,), dtype=g.dtype)
        full[..., : g.shape[-1]] = g
        return (np.real(height * width * scipy.fft.ifft2(full)),)

    return _result(scipy.fft.rfft2(x.data), (x,), backward, "rfft2")


def irfft2(x: Tensor, shape: t.Tuple[int, int]) -> Tensor:
    """Real inverse of rfft2; shape is the (H, W) of the real output"""
    height, width = shape
    if x.dims[-2] != height or x.dims[-1] != width // 2 + 1:
        raise ShapeError(f"irfft2: half spectrum {x.dims[-2:]} does not match output {shape}")
    # columns other than DC and Nyquist stand for two conjugate frequencies
    weights = np.full(width // 2 + 1, 2.0)
    weights[0] = 1.0
    if width % 2 == 0:
        weights[-1] = 1.0

    def backward(g):
        spectrum = scipy.fft.rfft2(g)
        return (spectrum * weights.astype(spectrum.real.dtype) / (height * width),)

    return _result(scipy.fft.irfft2(x.data, s=shape), (x,), backward, "irfft2")


def mode_indices(size: int, modes: int) -> np.ndarray:
    """Row indices of the kept low frequencies: the first ceil(m/2) and the last floor(m/2)"""
    if not 1 <= modes <= size:
        raise ShapeError(f"cannot keep {modes} modes of an axis of length {size}")
    low = np.arange((modes + 1) // 2)
    high = np.arange(size - modes // 2, size)
    return np.concatenate([low, high])


def take_modes(x: Tensor, modes_h: int, modes_w: int) -> Tensor:
    """Keep the low-frequency block of a half spectrum (..., H, W // 2 + 1)"""
    height, half = x.dims[-2:]
    rows = mode_indices(height, modes_h)
    if not 1 <= modes_w <= half:
        raise ShapeError(f"cannot keep {modes_w} modes of a half spectrum of width {half}")
    data = x.data[..., rows, :modes_w]

    def backward(g):
        full = np.zeros(x.dims, dtype=g.dtype)
        full[..., rows, :modes_w] = g
        return (full,)

    return _result(data, (x,), backward, "take_modes")


def embed_modes(x: Tensor, height: int, half: int) -> Tensor:
    """Inverse of take_modes: zero spectrum (..., height, half) with the kept block filled in"""
    modes_h, modes_w = x.dims[-2:]
    rows = mode_indices(height, modes_h)
    if modes_w > half:
        raise ShapeError(f"{modes_w} modes do not fit a half spectrum of width {half}")
    data = np.zeros(x.dims[:-2] + (height, half), dtype=x.dtype)
    data[..., rows, :modes_w] = x.data

    def backward(g):
        return (g[..., rows, :modes_w],)

    return _result(data, (x,), backward, "embed_modes")


def spectral_mix(x: Tensor, weights: Tensor) -> Tensor:
    """Per-mode channel mixing: x (B, I, h, w) with weights (h, w, I, O) -> (B, O, h, w)"""
    _require_ndim(x, 4, "spectral_mix")
    _require_ndim(weights, 4, "spectral_mix")
    if x.dims[1:] != (weights.dims[2],) + weights.dims[:2]:
        raise ShapeError(f"spectral_mix: input {x.dims} does not match weights {weights.dims}")
    data = np.einsum("bihw,hwio->bohw", x.data, weights.data)

    def backward(g):
        return (
            np.einsum("bohw,hwio->bihw", g, np.conj(weights.data)),
            np.einsum("bihw,bohw->hwio", np.conj(x.data), g),
        )

    return _result(data, (x, weights), backward, "spectral_mix")


# channel maps and convolutions, layout (B, C, H, W)


def channel_linear(x: Tensor, weight: Tensor, bias: t.Optional[Tensor] = None) -> Tensor:
    """Pointwise linear map across channels: weight (C_out, C_in), bias (C_out,)"""
    _require_ndim(x, 4, "channel_linear")
    if weight.ndim != 2 or weight.dims[1] != x.dims[1]:
        raise ShapeError(f"channel_linear: weight {weight.dims} does not match input {x.dims}")
    data = np.einsum("oc,bchw->bohw", weight.data, x.data)
    parents = [x, weight]
    if bias is not None:
        if bias.dims != (weight.dims[0],):
            raise ShapeError(f"channel_linear: bias {bias.dims} for {weight.dims[0]} outputs")
        data = data + bias.data[:, None, None]
        parents.append(bias)

    def backward(g):
        grads = [
            np.einsum("oc,bohw->bchw", np.conj(weight.data), g),
            np.einsum("bohw,bchw->oc", g, np.conj(x.data)),
        ]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(data, parents, backward, "channel_linear")


channel_lift = channel_linear
channel_project = channel_linear


def _conv_check(x: Tensor, weight: Tensor, in_axis: int, op: str):
    _require_ndim(x, 4, op)
    _require_ndim(weight, 4, op)
    if weight.dims[in_axis] != x.dims[1]:
        raise ShapeError(f"{op}: weight {weight.dims} does not match input {x.dims}")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: t.Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation with zero padding: weight (C_out, C_in, kh, kw).

    Output size per axis is (H + 2 * padding - kh) // stride + 1.
    """
    _conv_check(x, weight, 1, "conv2d")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride {stride} or padding {padding}")
    kh, kw = weight.dims[2:]
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if padded.shape[2] < kh or padded.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {padded.shape[2:]}")
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2:4]
    data = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        data = data + bias.data[:, None, None]
        parents.append(bias)

    def backward(g):
        grad_padded = np.zeros(padded.shape, dtype=np.result_type(g, weight.data))
        for i in range(kh):
            for j in range(kw):
                grad_padded[
                    :, :, i : i + stride * (out_h - 1) + 1 : stride, j : j + stride * (out_w - 1) + 1 : stride
                ] += np.einsum("bohw,oc->bchw", g, weight.data[:, :, i, j])
        grad_x = grad_padded[:, :, padding : padding + x.dims[2], padding : padding + x.dims[3]]
        grads = [grad_x, np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(np.ascontiguousarray(data), parents, backward, "conv2d")


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: t.Optional[Tensor] = None,
    stride: int = 2,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed convolution: weight (C_in, C_out, kh, kw).

    Output size per axis is (H - 1) * stride - 2 * padding + kh + output_padding.
    """
    _conv_check(x, weight, 0, "conv_transpose2d")
    if stride < 1 or padding < 0 or not 0 <= output_padding < max(stride, 1):
        raise ShapeError(
            f"conv_transpose2d: bad stride {stride}, padding {padding} or output_padding {output_padding}"
        )
    kh, kw = weight.dims[2:]
    height, width = x.dims[2:]
    full_h = (height - 1) * stride + kh + output_padding
    full_w = (width - 1) * stride + kw + output_padding
    out_h, out_w = full_h - 2 * padding, full_w - 2 * padding
    if out_h < 1 or out_w < 1:
        raise ShapeError("conv_transpose2d: padding removes the whole output")

    def tap(i: int, j: int) -> t.Tuple[slice, slice, slice, slice]:
        return (
            slice(None),
            slice(None),
            slice(i, i + stride * (height - 1) + 1, stride),
            slice(j, j + stride * (width - 1) + 1, stride),
        )

    full = np.zeros(
        (x.dims[0], weight.dims[1], full_h, full_w), dtype=np.result_type(x.data, weight.data)
    )
    for i in range(kh):
        for j in range(kw):
            full[tap(i, j)] += np.einsum("bchw,co->bohw", x.data, weight.data[:, :, i, j])
    data = full[:, :, padding : padding + out_h, padding : padding + out_w]
    parents = [x, weight]
    if bias is not None:
        data = data + bias.data[:, None, None]
        parents.append(bias)

    def backward(g):
        grad_full = np.zeros(full.shape, dtype=g.dtype)
        grad_full[:, :, padding : padding + out_h, padding : padding + out_w] = g
        grad_x = np.zeros(x.dims, dtype=np.result_type(g, weight.data))
        grad_w = np.zeros(weight.dims, dtype=np.result_type(g, x.data))
        for i in range(kh):
            for j in range(kw):
                window = grad_full[tap(i, j)]
                grad_x += np.einsum("bohw,co->bchw", window, weight.data[:, :, i, j])
                grad_w[:, :, i, j] = np.einsum("bchw,bohw->co", x.data, window)
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(np.ascontiguousarray(data), parents, backward, "conv_transpose2d")


transposed_conv2d = conv_transpose2d


def pad2d(x: Tensor, pads: t.Tuple[t.Tuple[int, int], t.Tuple[int, int]]) -> Tensor:
    """Zero-pad the last two axes by ((top, bottom), (left, right))"""
    (top, bottom), (left, right) = pads
    if min(top, bottom, left, right) < 0:
        raise ShapeError(f"pad2d: negative padding {pads}")
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    height, width = x.dims[-2:]

    def backward(g):
        return (g[..., top : top + height, left : left + width],)

    return _result(np.pad(x.data, widths), (x,), backward, "pad2d")


def crop2d(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Window [top, top + height) x [left, left + width) of the last two axes"""
    if top < 0 or left < 0 or top + height > x.dims[-2] or left + width > x.dims[-1]:
        raise ShapeError(f"crop2d: window outside dims {x.dims}")

    def backward(g):
        full = np.zeros(x.dims, dtype=g.dtype)
        full[..., top : top + height, left : left + width] = g
        return (full,)

    data = x.data[..., top : top + height, left : left + width]
    return _result(data, (x,), backward, "crop2d")


# tokens, layout (B, m, n, C, k, k)


def tokenize(x: Tensor, k: int) -> Tensor:
    """Split (B, C, H, W) into non-overlapping k x k tokens (B, m, n, C, k, k).

    Token (i, j) is the block rows [i k, (i + 1) k) and columns [j k, (j + 1) k).
    """
    _require_ndim(x, 4, "tokenize")
    batch, channels, height, width = x.dims
    if k < 1 or height % k or width % k:
        raise ShapeError(f"tokenize: token size {k} does not divide {height}x{width}")
    m, n = height // k, width // k
    data = x.data.reshape(batch, channels, m, k, n, k).transpose(0, 2, 4, 1, 3, 5)

    def backward(g):
        return (g.transpose(0, 3, 1, 4, 2, 5).reshape(x.dims),)

    return _result(np.ascontiguousarray(data), (x,), backward, "tokenize")


def detokenize(tokens: Tensor) -> Tensor:
    """Inverse of tokenize: (B, m, n, C, k, k) -> (B, C, m k, n k)"""
    _require_ndim(tokens, 6, "detokenize")
    batch, m, n, channels, kh, kw = tokens.dims
    data = tokens.data.transpose(0, 3, 1, 4, 2, 5).reshape(batch, channels, m * kh, n * kw)

    def backward(g):
        return (g.reshape(batch, channels, m, kh, n, kw).transpose(0, 2, 4, 1, 3, 5),)

    return _result(np.ascontiguousarray(data), (tokens,), backward, "detokenize")


def tokens_as_batch(tokens: Tensor) -> Tensor:
    """(B, m, n, C, k, k) -> (B m n, C, k, k) so token-shared layers see one batch"""
    _require_ndim(tokens, 6, "tokens_as_batch")
    dims = tokens.dims

    def backward(g):
        return (g.reshape(dims),)

    data = tokens.data.reshape((-1,) + dims[3:])
    return _result(data, (tokens,), backward, "tokens_as_batch")


def batch_as_tokens(x: Tensor, batch: int, m: int, n: int) -> Tensor:
    """Inverse of tokens_as_batch"""
    _require_ndim(x, 4, "batch_as_tokens")
    if x.dims[0] != batch * m * n:
        raise ShapeError(f"batch_as_tokens: {x.dims[0]} != {batch} * {m} * {n}")
    dims = x.dims

    def backward(g):
        return (g.reshape(dims),)

    data = x.data.reshape((batch, m, n) + dims[1:])
    return _result(data, (x,), backward, "batch_as_tokens")


def token_conv(tokens: Tensor, weight: Tensor) -> Tensor:
    """Token-wise convolution over the token grid with zero tokens beyond the edge.

    out[i, j] = sum over tx, ty in [-s, s] of weight[tx + s, ty + s] * tokens[i + tx, j + ty]

    weight is (2s+1, 2s+1) with one scalar per offset, or (2s+1, 2s+1, C) with one
    scalar per offset and channel.
    """
    _require_ndim(tokens, 6, "token_conv")
    side = weight.dims[0]
    if weight.ndim not in (2, 3) or side % 2 == 0 or weight.dims[1] != side:
        raise ShapeError(f"token_conv: weight dims {weight.dims} are not (2s+1, 2s+1[, C])")
    per_channel = weight.ndim == 3
    if per_channel and weight.dims[2] != tokens.dims[3]:
        raise ShapeError(f"token_conv: {weight.dims[2]} channel weights for {tokens.dims[3]} channels")
    s = side // 2
    m, n = tokens.dims[1:3]
    if s >= min(m, n):
        raise ShapeError(f"token_conv: reach {s} not smaller than the token grid {m}x{n}")
    padded = np.pad(tokens.data, ((0, 0), (s, s), (s, s), (0, 0), (0, 0), (0, 0)))

    def coeff(dx: int, dy: int, w: np.ndarray) -> np.ndarray:
        c = w[dx + s, dy + s]
        return c[:, None, None] if per_channel else c

    def neighbors(dx: int, dy: int, values: np.ndarray) -> np.ndarray:
        return values[:, s + dx : s + dx + m, s + dy : s + dy + n]

    data = np.zeros_like(tokens.data, dtype=np.result_type(tokens.data, weight.data))
    for dx in range(-s, s + 1):
        for dy in range(-s, s + 1):
            data += coeff(dx, dy, weight.data) * neighbors(dx, dy, padded)

    def backward(g):
        grad_padded = np.zeros(padded.shape, dtype=np.result_type(g, weight.data))
        grad_w = np.zeros(weight.dims, dtype=np.result_type(g, tokens.data))
        sum_axes = (0, 1, 2, 4, 5) if per_channel else None
        for dx in range(-s, s + 1):
            for dy in range(-s, s + 1):
                neighbors(dx, dy, grad_padded)[...] += coeff(dx, dy, np.conj(weight.data)) * g
                grad_w[dx + s, dy + s] = np.sum(np.conj(neighbors(dx, dy, padded)) * g, axis=sum_axes)
        return grad_padded[:, s : s + m, s : s + n], grad_w

    return _result(data, (tokens, weight), backward, "token_conv")


# losses


def _loss_operands(pred, target) -> t.Tuple[Tensor, Tensor]:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.dims != target.dims:
        raise ShapeError(f"loss: prediction {pred.dims} vs target {target.dims}")
    return pred, target


def l1_loss(pred, target) -> Tensor:
    """Mean absolute error"""
    pred, target = _loss_operands(pred, target)
    diff = pred.data - target.data
    data = np.mean(np.abs(diff))

    def backward(g):
        d = np.sign(diff) * (g / diff.size)
        return d, -d

    return _result(np.asarray(data), (pred, target), backward, "l1_loss")


def l2_loss(pred, target) -> Tensor:
    """Mean squared error"""
    pred, target = _loss_operands(pred, target)
    diff = pred.data - target.data
    data = np.mean(diff * diff)

    def backward(g):
        d = 2.0 * diff * (g / diff.size)
        return d, -d

    return _result(np.asarray(data), (pred, target), backward, "l2_loss")


# optimizer


@dataclass
class AdamState:
    """Adam hyper-parameters plus per-parameter moment buffers"""

    lr: float = 0.004
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: t.Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: t.Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise AutogradError("Adam betas must lie in (0, 1)")
        if self.step_count < 0:
            raise AutogradError("step_count must be >= 0")


def _real_view(values: np.ndarray) -> np.ndarray:
    """Complex arrays as interleaved (re, im) reals; real arrays unchanged"""
    values = np.ascontiguousarray(values)
    if np.iscomplexobj(values):
        return values.view(values.real.dtype)
    return values


def adam_step(
    params: t.Mapping[str, np.ndarray],
    grads: t.Mapping[str, np.ndarray],
    s: AdamState,
) -> t.Tuple[t.Dict[str, np.ndarray], AdamState]:
    """One Adam update with bias correction; complex parameters are updated per component.

    Returns new parameter arrays and a new state; inputs are not modified.

    Raises:
        ShapeError: a gradient or moment buffer does not match its parameter
    """
    step = s.step_count + 1
    first, second = {}, {}
    updated = {}
    for name, value in params.items():
        if name not in grads:
            raise ShapeError(f"no gradient for parameter {name}")
        p, g = _real_view(value), _real_view(np.asarray(grads[name], dtype=value.dtype))
        if g.shape != p.shape:
            raise ShapeError(f"gradient dims {g.shape} != parameter dims {p.shape} for {name}")
        m = s.first_moment.get(name, np.zeros_like(p))
        v = s.second_moment.get(name, np.zeros_like(p))
        if m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"moment buffers do not match parameter {name}")
        m = s.beta1 * m + (1.0 - s.beta1) * g
        v = s.beta2 * v + (1.0 - s.beta2) * g * g
        m_hat = m / (1.0 - s.beta1**step)
        v_hat = v / (1.0 - s.beta2**step)
        p = (p - s.lr * m_hat / (np.sqrt(v_hat) + s.eps)).astype(p.dtype, copy=False)
        updated[name] = p.view(value.dtype) if np.iscomplexobj(value) else p
        first[name] = m.astype(p.dtype, copy=False)
        second[name] = v.astype(p.dtype, copy=False)
    return updated, replace(s, step_count=step, first_moment=first, second_moment=second)


class Adam:
    """Adam optimizer over a dict of named parameter arrays"""

    def __init__(self, lr: float = 0.004, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float):
        self.state = replace(self.state, lr=value)

    def step(
        self, params: t.Mapping[str, np.ndarray], grads: t.Mapping[str, np.ndarray]
    ) -> t.Dict[str, np.ndarray]:
        updated, self.state = adam_step(params, grads, self.state)
        return updated


def lr_schedule(epoch: int, base_lr: float, step: int = 2, gamma: float = 0.5) -> float:
    """Step decay: base_lr * gamma ** floor(epoch / step)"""
    if epoch < 0:
        raise AutogradError(f"epoch must be >= 0, got {epoch}")
    return base_lr * gamma ** (epoch // step)


# checkpoint file
#   magic "CFNOCKPT", version u32, count u32, then per tensor:
#   name length u32, UTF-8 name, rank u32, dims u32[rank], dtype tag u32, payload
# all integers and payloads little-endian, payload row-major

CHECKPOINT_MAGIC = b"CFNOCKPT"
CHECKPOINT_VERSION = 1
DTYPE_TAGS = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.complex64): 2,
    np.dtype(np.complex128): 3,
    np.dtype(np.uint8): 4,
}
TAG_DTYPES = {tag: dtype for dtype, tag in DTYPE_TAGS.items()}


def write_checkpoint(path: t.Union[str, os.PathLike], tensors: t.Mapping[str, np.ndarray]):
    """Write named arrays to a checkpoint file; insertion order is preserved"""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        value = np.asarray(value)
        if value.dtype not in DTYPE_TAGS:
            raise CheckpointFormatError(f"{name}: unsupported dtype {value.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        chunks.append(struct.pack("<I", DTYPE_TAGS[value.dtype]))
        chunks.append(value.astype(value.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))
    with open(path, "wb") as fd:
        fd.write(b"".join(chunks))


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.payload):
            raise CheckpointFormatError(f"truncated checkpoint reading {what}")
        chunk = self.payload[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what: str, count: int = 1) -> t.Tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count, what))


def read_checkpoint(path: t.Union[str, os.PathLike]) -> t.Dict[str, np.ndarray]:
    """Read a checkpoint written by write_checkpoint

    Raises:
        CheckpointFormatError: bad magic, unsupported version, unknown dtype tag,
            truncation or trailing bytes
    """
    with open(path, "rb") as fd:
        reader = _Reader(fd.read())
    if reader.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{os.fspath(path)} is not a checkpoint file")
    version, count = reader.u32("header", 2)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    tensors = {}
    for index in range(count):
        (length,) = reader.u32(f"name length of tensor {index}")
        try:
            name = reader.take(length, f"name of tensor {index}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"tensor {index}: name is not UTF-8") from e
        (rank,) = reader.u32(f"rank of {name}")
        dims = reader.u32(f"dims of {name}", rank) if rank else ()
        (tag,) = reader.u32(f"dtype of {name}")
        if tag not in TAG_DTYPES:
            raise CheckpointFormatError(f"{name}: unknown dtype tag {tag}")
        dtype = TAG_DTYPES[tag].newbyteorder("<")
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = reader.take(size, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype=dtype).astype(TAG_DTYPES[tag]).reshape(dims)
    if reader.offset != len(reader.payload):
        raise CheckpointFormatError("trailing bytes after the last tensor")
    return tensors


def encode_record(record: t.Mapping[str, t.Any]) -> np.ndarray:
    """JSON record as a u8 tensor, for self-describing checkpoints"""
    return np.frombuffer(json.dumps(record, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def decode_record(values: np.ndarray) -> t.Dict[str, t.Any]:
    try:
        return json.loads(bytes(np.asarray(values, dtype=np.uint8)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"malformed JSON record: {e}") from e
