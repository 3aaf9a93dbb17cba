"""Dense 4-D float64 tensor operations and their adjoints.

Tensors are plain ``numpy.ndarray`` objects of shape (n, c, h, w) and dtype
float64.  Every operation returns a fresh array and never mutates its inputs.

Batched products go through ``np.matmul`` on stacked operands, which runs one
GEMM per leading index.  That keeps every sample's result independent of how
many other samples share the batch, which the crop/uncrop equivalence relies on.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


class ParameterError(ValueError):
    """Raised when tensor shapes or operator parameters are inconsistent."""


def as_tensor(x, name: str = "input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ParameterError(f"{name} must be 4-D (n, c, h, w), got shape {arr.shape}")
    return arr


@dataclass
class ConvParams:
    """Weights and geometry of a grouped, dilated 2-D convolution.

    ``weight`` has shape (out_channels, in_channels // groups, k_h, k_w).
    """

    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    dilation: int = 1
    groups: int = 1
    padding: int | None = None
    _pad: int = field(init=False, repr=False)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 4:
            raise ParameterError(f"kernel bank must be 4-D, got {self.weight.shape}")
        if self.bias is None:
            self.bias = np.zeros(self.out_channels)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.bias.shape[0] != self.out_channels:
            raise ParameterError("bias length must equal out_channels")
        for attr in ("stride", "dilation", "groups"):
            if int(getattr(self, attr)) < 1:
                raise ParameterError(f"{attr} must be a positive integer")
        if self.out_channels % self.groups:
            raise ParameterError(
                f"out_channels={self.out_channels} not divisible by groups={self.groups}"
            )
        if self.padding is None:
            self._pad = same_padding(self.kernel[0], self.dilation)
        else:
            if self.padding < 0:
                raise ParameterError("padding must be nonnegative")
            self._pad = int(self.padding)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def pad(self) -> int:
        return self._pad

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return conv_output_hw(h, w, self.kernel, self.stride, self.dilation, self.pad)


def same_padding(k: int, dilation: int = 1) -> int:
    """Padding that keeps spatial dims constant for odd ``k`` at stride 1."""
    return dilation * (k - 1) // 2


def conv_output_hw(h, w, kernel, stride=1, dilation=1, pad=0):
    kh, kw = kernel
    eh = dilation * (kh - 1) + 1
    ew = dilation * (kw - 1) + 1
    if eh > h + 2 * pad or ew > w + 2 * pad:
        raise ParameterError(
            f"effective kernel {eh}x{ew} exceeds padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    return (h + 2 * pad - eh) // stride + 1, (w + 2 * pad - ew) // stride + 1


def _check_conv(x: np.ndarray, p: ConvParams):
    if x.shape[1] != p.in_channels:
        raise ParameterError(
            f"input has {x.shape[1]} channels, kernel bank expects {p.in_channels}"
        )
    if x.shape[1] % p.groups:
        raise ParameterError(f"in_channels={x.shape[1]} not divisible by groups={p.groups}")
    return p.output_hw(x.shape[2], x.shape[3])


def _im2col(x, p: ConvParams, ho, wo):
    # -> (n, groups, cg*kh*kw, ho*wo)
    n, c, _, _ = x.shape
    kh, kw = p.kernel
    d, s, pad = p.dilation, p.stride, p.pad
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh * kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * d, j * d
            cols[:, :, i * kw + j] = xp[:, :, y0:y0 + s * (ho - 1) + 1:s, x0:x0 + s * (wo - 1) + 1:s]
    cg = c // p.groups
    return cols.reshape(n, p.groups, cg * kh * kw, ho * wo)


def conv2d(x, p: ConvParams) -> np.ndarray:
    x = as_tensor(x)
    ho, wo = _check_conv(x, p)
    n = x.shape[0]
    cols = _im2col(x, p, ho, wo)
    g = p.groups
    og = p.out_channels // g
    wmat = p.weight.reshape(g, og, -1)
    out = np.matmul(wmat[None], cols)  # (n, g, og, ho*wo)
    out = out.reshape(n, p.out_channels, ho, wo)
    out += p.bias[None, :, None, None]
    return out


def conv2d_adjoint(x, p: ConvParams, out_grad):
    """Gradients of <out_grad, conv2d(x, p)> w.r.t. input, weight and bias."""
    x = as_tensor(x)
    ho, wo = _check_conv(x, p)
    out_grad = as_tensor(out_grad, "out_grad")
    n, c, h, w = x.shape
    if out_grad.shape != (n, p.out_channels, ho, wo):
        raise ParameterError(
            f"out_grad shape {out_grad.shape} != conv output {(n, p.out_channels, ho, wo)}"
        )
    g = p.groups
    og = p.out_channels // g
    kh, kw = p.kernel
    cols = _im2col(x, p, ho, wo)
    gmat = out_grad.reshape(n, g, og, ho * wo)
    weight_grad = np.matmul(gmat, cols.transpose(0, 1, 3, 2)).sum(axis=0)
    weight_grad = weight_grad.reshape(p.weight.shape)
    bias_grad = out_grad.sum(axis=(0, 2, 3))

    wmat = p.weight.reshape(g, og, -1)
    dcols = np.matmul(wmat.transpose(0, 2, 1)[None], gmat)
    dcols = dcols.reshape(n, c, kh * kw, ho, wo)
    d, s, pad = p.dilation, p.stride, p.pad
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * d, j * d
            dxp[:, :, y0:y0 + s * (ho - 1) + 1:s, x0:x0 + s * (wo - 1) + 1:s] += dcols[:, :, i * kw + j]
    input_grad = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return np.ascontiguousarray(input_grad), weight_grad, bias_grad


# -- resampling ---------------------------------------------------------------

_FACTORS = {Fraction(1, 2), Fraction(2), Fraction(4)}


def _as_factor(factor) -> Fraction:
    f = Fraction(factor).limit_denominator(8)
    if f not in _FACTORS:
        raise ParameterError(f"resample factor must be one of 1/2, 2, 4; got {factor}")
    return f


def interp_matrix(n_in: int, factor, mode: str) -> np.ndarray:
    """1-D resampling operator of shape (n_out, n_in), half-pixel centres."""
    f = _as_factor(factor)
    n_out = n_in * f
    if n_out.denominator != 1:
        raise ParameterError(f"extent {n_in} not divisible for factor {f}")
    n_out = int(n_out)
    centres = (np.arange(n_out) + 0.5) / float(f) - 0.5
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    if mode == "nearest":
        src = np.clip(np.floor(centres + 0.5).astype(int), 0, n_in - 1)
        m[rows, src] = 1.0
    elif mode == "bilinear":
        c = np.clip(centres, 0.0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        t = c - lo
        np.add.at(m, (rows, lo), 1.0 - t)
        np.add.at(m, (rows, hi), t)
    else:
        raise ParameterError(f"unknown resample mode {mode!r}")
    return m


def resample(x, factor, mode: str = "bilinear") -> np.ndarray:
    x = as_tensor(x)
    f = _as_factor(factor)
    if f < 1 and (x.shape[2] % 2 or x.shape[3] % 2):
        raise ParameterError(f"factor 1/2 needs even dims, got {x.shape[2]}x{x.shape[3]}")
    ah = interp_matrix(x.shape[2], f, mode)
    aw = interp_matrix(x.shape[3], f, mode)
    return np.matmul(np.matmul(ah, x), aw.T)


def resample_adjoint(x_shape, factor, mode, out_grad) -> np.ndarray:
    ah = interp_matrix(x_shape[2], factor, mode)
    aw = interp_matrix(x_shape[3], factor, mode)
    return np.matmul(np.matmul(ah.T, out_grad), aw)


# -- pointwise ------------------------------------------------------------------

def eltwise(a, b, kind: str = "sum") -> np.ndarray:
    a, b = as_tensor(a, "a"), as_tensor(b, "b")
    if a.shape != b.shape:
        raise ParameterError(f"eltwise dims differ: {a.shape} vs {b.shape}")
    if kind == "sum":
        return a + b
    if kind == "max":
        return np.maximum(a, b)
    if kind == "product":
        return a * b
    raise ParameterError(f"unknown eltwise kind {kind!r}")


def eltwise_adjoint(a, b, kind, out_grad):
    if kind == "sum":
        return out_grad.copy(), out_grad.copy()
    if kind == "max":
        # ties route the gradient to the first operand
        first = a >= b
        return np.where(first, out_grad, 0.0), np.where(first, 0.0, out_grad)
    if kind == "product":
        return out_grad * b, out_grad * a
    raise ParameterError(f"unknown eltwise kind {kind!r}")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x, kind: str = "relu") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ParameterError(f"unknown activation {kind!r}")


def activation_adjoint(x, kind, out_grad):
    if kind == "relu":
        return np.where(x > 0, out_grad, 0.0)
    if kind == "sigmoid":
        y = sigmoid(x)
        return out_grad * y * (1.0 - y)
    raise ParameterError(f"unknown activation {kind!r}")


def softmax_channels(x) -> np.ndarray:
    x = as_tensor(x)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_adjoint(y, out_grad):
    """Adjoint given the softmax output ``y``."""
    return y * (out_grad - (out_grad * y).sum(axis=1, keepdims=True))


# -- pooling and normalisation ---------------------------------------------------

def pool_avg(x, window: int = 2) -> np.ndarray:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ParameterError(f"avg-pool window {window} needs divisible dims, got {h}x{w}")
    return x.reshape(n, c, h // window, window, w // window, window).mean(axis=(3, 5))


def pool_avg_adjoint(x_shape, window, out_grad):
    g = np.repeat(np.repeat(out_grad, window, axis=2), window, axis=3)
    return g / (window * window)


def batchnorm(x, scale, shift, running_mean, running_var, train: bool = False,
              eps: float = 1e-8):
    """Per-channel batch normalisation.

    Returns ``(out, cache)``.  In train mode the cache holds the batch mean and
    (biased) variance so callers can update running statistics; in inference
    mode only the frozen running statistics are read.
    """
    x = as_tensor(x)
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mean = np.asarray(running_mean, dtype=np.float64)
        var = np.asarray(running_var, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * scale[None, :, None, None] + shift[None, :, None, None]
    return out, (xhat, inv, mean, var, train)


def batchnorm_adjoint(cache, scale, out_grad):
    xhat, inv, _, _, train = cache
    dscale = (out_grad * xhat).sum(axis=(0, 2, 3))
    dshift = out_grad.sum(axis=(0, 2, 3))
    dxhat = out_grad * scale[None, :, None, None]
    if not train:
        return dxhat * inv[None, :, None, None], dscale, dshift
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    dx = (inv[None, :, None, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    return dx, dscale, dshift
