"""Static channel gating, decoder fusion stages and the heatmap head."""

from __future__ import annotations

import numpy as np

from .tensor_core import (
    BatchNorm2d,
    Conv2d,
    ParamTensor,
    ReLU,
    ShapeError,
    UpsampleBilinear,
    concat_channels,
    sigmoid,
    split_channels,
)


def glorot_kernel(rng, cout, cin, k):
    fan_in = cin * k * k
    fan_out = cout * k * k
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return ParamTensor(rng.uniform(-limit, limit, size=(cout, cin, k, k)))


class GateBlock:
    """Multiplies each channel by sigmoid(gamma[c]); gamma starts at 0."""

    def __init__(self, channels):
        self.gamma = ParamTensor(np.zeros((1, channels, 1, 1)))
        self._cache = None

    @property
    def channels(self):
        return self.gamma.shape[1]

    def params(self):
        return [self.gamma]

    def gate(self):
        return sigmoid(self.gamma.value)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"GateBlock has {self.channels} channels, input shape {x.shape}")
        g = self.gate()
        self._cache = (x, g)
        return x * g

    def backward(self, dout):
        x, g = self._cache
        self.gamma.grad += (dout * x).sum(axis=(0, 2, 3), keepdims=True) * g * (1.0 - g)
        return dout * g


class ConvBlock:
    """3x3 conv -> batch norm -> ReLU."""

    def __init__(self, rng, cin, cout, stride=1):
        self.conv = Conv2d(glorot_kernel(rng, cout, cin, 3), ParamTensor(np.zeros(cout)),
                           stride=stride, padding=1)
        self.norm = BatchNorm2d(ParamTensor(np.ones(cout)), ParamTensor(np.zeros(cout)))
        self.act = ReLU()

    def params(self):
        return self.conv.params() + self.norm.params()

    def set_training(self, flag):
        self.norm.training = flag

    def forward(self, x):
        return self.act.forward(self.norm.forward(self.conv.forward(x)))

    def backward(self, dout):
        return self.conv.backward(self.norm.backward(self.act.backward(dout)))


class _Fusion:
    def __init__(self, conv: ConvBlock, gate: GateBlock | None):
        self.conv = conv
        self.gate = gate
        self._up = None
        self._sizes = None

    def params(self):
        return (self.gate.params() if self.gate else []) + self.conv.params()

    def _join(self, prev, f, c=None):
        parts = []
        if prev is not None:
            self._up = UpsampleBilinear(*f.shape[2:])
            parts.append(self._up.forward(prev))
        else:
            self._up = None
        parts.append(f)
        if c is not None:
            parts.append(c)
        x, self._sizes = concat_channels(*parts)
        return x

    def _split(self, dx):
        grads = split_channels(dx, self._sizes)
        dprev = None
        if self._up is not None:
            dprev = self._up.backward(grads.pop(0))
        return dprev, grads


class ContextFusion(_Fusion):
    """ConvBlock(GateBlock(Up(prev) ++ f ++ c)).

    ``prev`` may be ``None`` for the bottleneck stage, where there is no
    earlier decoder output to upsample.
    """

    def __init__(self, rng, prev_ch, f_ch, c_ch, out_ch):
        super().__init__(ConvBlock(rng, prev_ch + f_ch + c_ch, out_ch), GateBlock(prev_ch + f_ch + c_ch))

    def forward(self, prev, f, c):
        if f.shape[0] != c.shape[0] or f.shape[2:] != c.shape[2:]:
            raise ShapeError(f"pyramid feature {f.shape} and context feature {c.shape} misaligned")
        return self.conv.forward(self.gate.forward(self._join(prev, f, c)))

    def backward(self, dout):
        dprev, (df, dc) = self._split(self.gate.backward(self.conv.backward(dout)))
        return dprev, df, dc


class PlainFusion(_Fusion):
    """ConvBlock(Up(prev) ++ f), used where no context feature exists."""

    def __init__(self, rng, prev_ch, f_ch, out_ch):
        if prev_ch < 1 or f_ch < 1:
            raise ShapeError("PlainFusion needs non-empty prev and f")
        super().__init__(ConvBlock(rng, prev_ch + f_ch, out_ch), None)

    def forward(self, prev, f):
        return self.conv.forward(self._join(prev, f))

    def backward(self, dout):
        dprev, (df,) = self._split(self.conv.backward(dout))
        return dprev, df


class PredictionHead:
    """Bilinear upsample to the frame size, then a 1x1 conv to one logit channel."""

    def __init__(self, rng, cin):
        self.conv = Conv2d(glorot_kernel(rng, 1, cin, 1), ParamTensor(np.zeros(1)))
        self._up = None

    def params(self):
        return self.conv.params()

    def forward(self, x, out_h, out_w):
        self._up = UpsampleBilinear(out_h, out_w)
        return self.conv.forward(self._up.forward(x))

    def backward(self, dout):
        return self._up.backward(self.conv.backward(dout))
