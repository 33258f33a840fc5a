"""Dense float64 tensor operations with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects in float64, laid out
``[batch, channel, height, width]`` for 4-D data. Learnable arrays are
wrapped in :class:`ParamTensor`, which carries a gradient buffer that the
backward passes *accumulate* into; callers zero it once per step.

Each layer object caches what its backward pass needs during ``forward``
and must be called as forward -> backward pairs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when tensor extents violate an operation's contract."""


@dataclass
class ParamTensor:
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0.0


def _check_4d(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D [B,C,H,W], got shape {x.shape}")


# ---------------------------------------------------------------- conv2d


def conv2d_forward(x, kernel, bias, stride=1, padding=0):
    """Cross-correlation of ``x`` [B,Cin,H,W] with ``kernel`` [Cout,Cin,k,k].

    Returns ``(out, cache)``; ``cache`` feeds :func:`conv2d_backward`.
    """
    _check_4d(x)
    cout, cin, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels "
            f"(shape {x.shape}), kernel expects {cin} (shape {kernel.shape})"
        )
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    b, _, h, w = x.shape
    k = kh
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, k={k}")

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (B, OH, OW, Cin, k, k) -> rows of receptive fields
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, cin * k * k)
    wmat = kernel.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias
    out = out.reshape(b, oh, ow, cout).transpose(0, 3, 1, 2)
    cache = (x.shape, xp.shape, cols, kernel, stride, padding, (oh, ow))
    return np.ascontiguousarray(out), cache


def conv2d_backward(dout, cache):
    """Return ``(dx, dkernel, dbias)`` for upstream gradient ``dout``."""
    x_shape, xp_shape, cols, kernel, stride, padding, (oh, ow) = cache
    b, cin, h, w = x_shape
    cout, _, k, _ = kernel.shape
    dflat = dout.transpose(0, 2, 3, 1).reshape(b * oh * ow, cout)
    dkernel = (dflat.T @ cols).reshape(kernel.shape)
    dbias = dflat.sum(axis=0)
    dcols = (dflat @ kernel.reshape(cout, -1)).reshape(b, oh, ow, cin, k, k)
    dxp = np.zeros(xp_shape, dtype=DTYPE)
    hi = stride * (oh - 1) + 1
    wi = stride * (ow - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + hi:stride, j:j + wi:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        dxp = dxp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(dxp), dkernel, dbias


class Conv2d:
    def __init__(self, kernel: ParamTensor, bias: ParamTensor | None, stride=1, padding=0):
        self.kernel = kernel
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self._cache = None

    def params(self):
        return [self.kernel] + ([self.bias] if self.bias is not None else [])

    def forward(self, x):
        bias = self.bias.value if self.bias is not None else None
        out, self._cache = conv2d_forward(x, self.kernel.value, bias, self.stride, self.padding)
        return out

    def backward(self, dout):
        dx, dk, db = conv2d_backward(dout, self._cache)
        self.kernel.grad += dk
        if self.bias is not None:
            self.bias.grad += db
        return dx


# ------------------------------------------------------------ batch norm


class BatchNorm2d:
    """Per-channel batch normalization over (B, H, W).

    ``training`` selects batch statistics (and updates the running
    estimates) versus the stored running statistics.
    """

    def __init__(self, gamma: ParamTensor, beta: ParamTensor, momentum=BN_MOMENTUM, eps=BN_EPS):
        self.gamma = gamma
        self.beta = beta
        c = gamma.shape[0]
        self.running_mean = np.zeros(c, dtype=DTYPE)
        self.running_var = np.ones(c, dtype=DTYPE)
        self.momentum = momentum
        self.eps = eps
        self.training = True
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x):
        _check_4d(x)
        b, c, h, w = x.shape
        if c != self.gamma.shape[0]:
            raise ShapeError(f"batch_norm expects {self.gamma.shape[0]} channels, got {c}")
        g = self.gamma.value.reshape(1, c, 1, 1)
        bt = self.beta.value.reshape(1, c, 1, 1)
        if self.training:
            n = b * h * w
            if n < 2:
                raise ShapeError(f"batch_norm in train mode needs B*H*W >= 2, got {n}")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            # unbiased estimate for the running variance, as torch does
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var * n / (n - 1)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        self._cache = (xhat, inv_std, self.training)
        return xhat * g + bt

    def backward(self, dout):
        xhat, inv_std, training = self._cache
        c = xhat.shape[1]
        self.gamma.grad += (dout * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dout.sum(axis=(0, 2, 3))
        dxhat = dout * self.gamma.value.reshape(1, c, 1, 1)
        inv = inv_std.reshape(1, c, 1, 1)
        if not training:
            return dxhat * inv
        mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return inv * (dxhat - mean_d - xhat * mean_dx)


# ----------------------------------------------------------- activations


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0.0)


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


class Sigmoid:
    def __init__(self):
        self._out = None

    def forward(self, x):
        self._out = sigmoid(np.asarray(x, dtype=DTYPE))
        return self._out

    def backward(self, dout):
        s = self._out
        return dout * s * (1.0 - s)


# -------------------------------------------------------------- resample


def bilinear_matrix(n_in, n_out):
    """Interpolation weights [n_out, n_in] with half-pixel centers.

    Source coordinate for output index i is (i + 0.5) * n_in / n_out - 0.5,
    clamped at the low edge; rows sum to one.
    """
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


class UpsampleBilinear:
    def __init__(self, out_h, out_w):
        self.out_h = out_h
        self.out_w = out_w
        self._mats = None

    def forward(self, x):
        _check_4d(x)
        h, w = x.shape[2:]
        if self.out_h < h or self.out_w < w:
            raise ShapeError(
                f"upsample_bilinear only enlarges: ({h},{w}) -> ({self.out_h},{self.out_w})"
            )
        if (h, w) == (self.out_h, self.out_w):
            self._mats = None
            return x.copy()
        ah = bilinear_matrix(h, self.out_h)
        aw = bilinear_matrix(w, self.out_w)
        self._mats = (ah, aw)
        return np.ascontiguousarray(ah @ x @ aw.T)

    def backward(self, dout):
        if self._mats is None:
            return dout.copy()
        ah, aw = self._mats
        return np.ascontiguousarray(ah.T @ dout @ aw)


def upsample_bilinear(x, out_h, out_w):
    return UpsampleBilinear(out_h, out_w).forward(x)


# ----------------------------------------------------------------- concat


def concat_channels(*tensors):
    """Concatenate along the channel axis; returns ``(out, split_sizes)``."""
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in tensors:
        _check_4d(t)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(
                f"concat_channels batch/spatial mismatch: {ref} vs {t.shape}"
            )
    sizes = [t.shape[1] for t in tensors]
    return np.concatenate(tensors, axis=1), sizes


def split_channels(dout, sizes):
    """Backward of :func:`concat_channels`: slice ``dout`` back per input."""
    bounds = np.cumsum([0] + list(sizes))
    return [dout[:, bounds[i]:bounds[i + 1]] for i in range(len(sizes))]


# ------------------------------------------------------------ PTSR1 files

PTSR_MAGIC = b"PTSR1\0"


def save_tensor(path, array):
    """Write ``array`` as a PTSR1 file: magic, u32 ndim, u32 extents, f64 data (all LE)."""
    a = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(PTSR_MAGIC)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes(order="C"))


def load_tensor(path):
    data = Path(path).read_bytes()
    if data[:6] != PTSR_MAGIC:
        raise ValueError(f"{path}: not a PTSR1 file")
    (ndim,) = struct.unpack_from("<I", data, 6)
    dims = struct.unpack_from(f"<{ndim}I", data, 10)
    off = 10 + 4 * ndim
    n = int(np.prod(dims)) if ndim else 1
    if len(data) - off != 8 * n:
        raise ValueError(f"{path}: payload holds {len(data) - off} bytes, expected {8 * n}")
    return np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(DTYPE).reshape(dims)
