"""Dense CNN forward kernels and reverse-mode gradients with respect to the input.

Tensors are plain ``numpy.float32`` arrays in NCHW layout. Every kernel
accumulates in float64 and rounds its output to float32, so consecutive layers
always consume exactly what the previous layer published.

Weights are constants: the tape only records what is needed to push an adjoint
back to the input image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .errors import ConfigurationError, InvalidArgumentError

__all__ = [
    "Conv2d",
    "ReLU",
    "MaxPool2d",
    "Flatten",
    "Linear",
    "LayerOp",
    "Tape",
    "forward_collect",
    "grad_wrt_input",
    "bilinear_upsample",
    "bilinear_matrix",
    "run_layers",
]


@dataclass(frozen=True, eq=False)
class Conv2d:
    name: str
    weight: np.ndarray  # outC x inC x kh x kw
    bias: np.ndarray  # outC
    stride: int = 1
    padding: int = 0
    kind = "conv2d"

    def __post_init__(self):
        object.__setattr__(self, "weight", np.asarray(self.weight, dtype=np.float32))
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float32))
        if self.weight.ndim != 4:
            raise ConfigurationError(f"conv {self.name!r}: weight must be outC x inC x kh x kw")
        if self.bias.shape != (self.weight.shape[0],):
            raise ConfigurationError(f"conv {self.name!r}: bias shape {self.bias.shape} does not match outC")
        if self.stride < 1 or self.padding < 0:
            raise ConfigurationError(f"conv {self.name!r}: bad stride/padding")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class ReLU:
    name: str
    kind = "relu"


@dataclass(frozen=True)
class MaxPool2d:
    name: str
    kernel: int = 2
    stride: int = 2
    kind = "maxpool"


@dataclass(frozen=True)
class Flatten:
    name: str
    kind = "flatten"


@dataclass(frozen=True, eq=False)
class Linear:
    name: str
    weight: np.ndarray  # out x in
    bias: np.ndarray
    kind = "linear"

    def __post_init__(self):
        object.__setattr__(self, "weight", np.asarray(self.weight, dtype=np.float32))
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float32))
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ConfigurationError(f"linear {self.name!r}: weight/bias shapes disagree")


LayerOp = Union[Conv2d, ReLU, MaxPool2d, Flatten, Linear]


# --------------------------------------------------------------------------
# kernels


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _conv_forward(op: Conv2d, x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    if c != op.in_channels:
        raise ConfigurationError(
            f"layer {op.name!r} expects {op.in_channels} input channels, got {c}"
        )
    k_h, k_w = op.weight.shape[2:]
    s, p = op.stride, op.padding
    h_out, w_out = _conv_out_size(h, k_h, s, p), _conv_out_size(w, k_w, s, p)
    if h_out < 1 or w_out < 1:
        raise ConfigurationError(f"layer {op.name!r}: input {h}x{w} too small for kernel")
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k_h, k_w), axis=(2, 3))[:, :, ::s, ::s][:, :, :h_out, :w_out]
    out = np.tensordot(win, op.weight.astype(np.float64), axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2)
    out += op.bias.astype(np.float64)[None, :, None, None]
    return out


def _conv_backward(op: Conv2d, grad_out: np.ndarray, in_shape) -> np.ndarray:
    n, c, h, w = in_shape
    k_h, k_w = op.weight.shape[2:]
    s, p = op.stride, op.padding
    h_out, w_out = grad_out.shape[2:]
    wt = op.weight.astype(np.float64)
    g = np.ascontiguousarray(np.moveaxis(grad_out, 1, -1))  # n h w o
    gp = np.zeros((n, h + 2 * p, w + 2 * p, c))
    for dy in range(k_h):
        for dx in range(k_w):
            gp[:, dy : dy + s * h_out : s, dx : dx + s * w_out : s] += g @ wt[:, :, dy, dx]
    return np.moveaxis(gp[:, p : p + h, p : p + w], -1, 1)


def _pool_windows(x: np.ndarray, k: int, s: int):
    n, c, h, w = x.shape
    h_out, w_out = (h - k) // s + 1, (w - k) // s + 1
    if h_out < 1 or w_out < 1:
        raise ConfigurationError(f"maxpool window {k} larger than input {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::s, ::s][:, :, :h_out, :w_out]
    return win.reshape(n, c, h_out, w_out, k * k)


def _maxpool_forward(op: MaxPool2d, x: np.ndarray):
    win = _pool_windows(x, op.kernel, op.stride)
    # np.argmax returns the first maximal element in row-major window order
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool_backward(op: MaxPool2d, grad_out: np.ndarray, idx: np.ndarray, in_shape):
    n, c, h, w = in_shape
    k, s = op.kernel, op.stride
    h_out, w_out = idx.shape[2:]
    rows = (np.arange(h_out) * s)[None, None, :, None] + idx // k
    cols = (np.arange(w_out) * s)[None, None, None, :] + idx % k
    flat = rows * w + cols
    grad = np.zeros((n, c, h * w))
    nc_index = np.arange(n * c).reshape(n, c, 1, 1) * (h * w)
    np.add.at(grad.reshape(-1), (nc_index + flat).reshape(-1), grad_out.reshape(-1))
    return grad.reshape(n, c, h, w)


# --------------------------------------------------------------------------
# forward / tape


@dataclass
class Tape:
    """Per-layer outputs of one forward pass plus the routing state backward needs."""

    batch: np.ndarray
    ops: tuple
    outputs: dict = field(default_factory=dict)
    shapes: list = field(default_factory=list)  # input shape of each op
    aux: list = field(default_factory=list)  # relu masks / pool argmax / None


def run_layers(ops: Sequence[LayerOp], batch: np.ndarray, dtype=np.float32, tape: Tape | None = None):
    """Evaluate ``ops`` on ``batch``; returns a dict of every layer's output.

    With ``dtype=np.float64`` nothing is rounded between layers (used by the
    finite-difference oracles).
    """
    x = np.asarray(batch, dtype=dtype)
    outputs = {}
    for op in ops:
        in_shape = x.shape
        aux = None
        if isinstance(op, Conv2d):
            if x.ndim != 4:
                raise ConfigurationError(f"conv {op.name!r} needs a 4-d input, got shape {x.shape}")
            y = _conv_forward(op, x)
        elif isinstance(op, ReLU):
            aux = x > 0
            y = np.where(aux, x, 0)
        elif isinstance(op, MaxPool2d):
            y, aux = _maxpool_forward(op, x)
        elif isinstance(op, Flatten):
            y = x.reshape(x.shape[0], -1)
        elif isinstance(op, Linear):
            if x.ndim != 2 or x.shape[1] != op.weight.shape[1]:
                raise ConfigurationError(
                    f"linear {op.name!r} expects {op.weight.shape[1]} features, got shape {x.shape}"
                )
            y = x.astype(np.float64) @ op.weight.astype(np.float64).T + op.bias
        else:
            raise ConfigurationError(f"unknown layer op {op!r}")
        x = np.asarray(y, dtype=dtype)
        outputs[op.name] = x
        if tape is not None:
            tape.shapes.append(in_shape)
            tape.aux.append(aux)
    return outputs


def forward_collect(model, batch: np.ndarray, layers=()):
    """Run ``model`` on an N x 3 x H x W batch.

    Returns ``(activations, logits, tape)`` where ``activations`` maps each
    requested layer name to its output.
    """
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4:
        raise ConfigurationError(f"batch must be N x C x H x W, got shape {batch.shape}")
    expected = tuple(getattr(model, "input_shape", batch.shape[1:]))
    if tuple(batch.shape[1:]) != expected:
        raise ConfigurationError(f"batch images are {batch.shape[1:]}, model expects {expected}")
    names = {op.name for op in model.layers}
    missing = set(layers) - names
    if missing:
        raise ConfigurationError(f"unknown layers requested: {sorted(missing)}")
    tape = Tape(batch=batch.copy(), ops=tuple(model.layers))
    outputs = run_layers(model.layers, batch, tape=tape)
    tape.outputs = outputs
    acts = {name: outputs[name] for name in layers}
    logits = outputs[model.layers[-1].name]
    return acts, logits, tape


Objective = Callable[[Mapping[str, np.ndarray], np.ndarray], tuple]


def grad_wrt_input(objective: Objective, batch: np.ndarray, tape: Tape) -> np.ndarray:
    """Gradient of a scalar objective with respect to the input batch.

    ``objective(outputs, logits)`` must return ``(value, adjoints)`` where
    ``adjoints`` maps layer names (or ``"logits"``) to d value / d output.
    ReLU kinks take subgradient 0; pooling ties route to the first maximum.
    """
    batch = np.asarray(batch, dtype=np.float32)
    if batch.shape != tape.batch.shape or not np.array_equal(batch, tape.batch):
        raise InvalidArgumentError("tape was recorded on a different batch")
    logits = tape.outputs[tape.ops[-1].name]
    _, seeds = objective(tape.outputs, logits)
    seeds = dict(seeds)
    if "logits" in seeds:
        seeds[tape.ops[-1].name] = seeds.pop("logits")
    index = {op.name: i for i, op in enumerate(tape.ops)}
    unknown = set(seeds) - set(index)
    if unknown:
        raise InvalidArgumentError(f"adjoints for unknown layers: {sorted(unknown)}")
    if not seeds:
        return np.zeros_like(batch)
    last = max(index[name] for name in seeds)
    grad = None
    for i in range(last, -1, -1):
        op = tape.ops[i]
        if op.name in seeds:
            seed = np.asarray(seeds[op.name], dtype=np.float64)
            grad = seed if grad is None else grad + seed
        if grad is None:
            continue
        in_shape = tape.shapes[i]
        aux = tape.aux[i]
        if isinstance(op, Conv2d):
            grad = _conv_backward(op, grad, in_shape)
        elif isinstance(op, ReLU):
            grad = np.where(aux, grad, 0.0)
        elif isinstance(op, MaxPool2d):
            grad = _maxpool_backward(op, grad, aux, in_shape)
        elif isinstance(op, Flatten):
            grad = grad.reshape(in_shape)
        elif isinstance(op, Linear):
            grad = grad @ op.weight.astype(np.float64)
    return grad.astype(np.float32)


# --------------------------------------------------------------------------
# bilinear upsampling (align-corners)


def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """dst x src interpolation matrix with corner samples mapped onto corners."""
    if src < 1 or dst < src:
        raise InvalidArgumentError(f"cannot upsample {src} -> {dst}")
    m = np.zeros((dst, src))
    if src == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(dst) * ((src - 1) / (dst - 1)) if dst > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    m[np.arange(dst), lo] = 1.0 - frac
    m[np.arange(dst), lo + 1] += frac
    return m


def _upsample64(maps: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    uy = bilinear_matrix(maps.shape[-2], target_h)
    ux = bilinear_matrix(maps.shape[-1], target_w)
    return np.einsum("ih,...hw,jw->...ij", uy, maps.astype(np.float64), ux, optimize=True)


def bilinear_upsample(maps: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Upsample a C x h x w (or any ... x h x w) map to target size."""
    maps = np.asarray(maps)
    if maps.ndim < 2:
        raise InvalidArgumentError("map must have at least two spatial dimensions")
    h, w = maps.shape[-2:]
    if target_h < h or target_w < w:
        raise InvalidArgumentError(f"target {target_h}x{target_w} is smaller than source {h}x{w}")
    return _upsample64(maps, target_h, target_w).astype(np.float32)


def upsample_adjoint(grad: np.ndarray, src_h: int, src_w: int) -> np.ndarray:
    """Transpose of ``bilinear_upsample``: pulls a target-size adjoint back to source size."""
    uy = bilinear_matrix(src_h, grad.shape[-2])
    ux = bilinear_matrix(src_w, grad.shape[-1])
    return np.einsum("ih,...ij,jw->...hw", uy, np.asarray(grad, dtype=np.float64), ux, optimize=True)
