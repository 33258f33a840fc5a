"""Toy dual-encoder gated pyramid network.

Layout for ``pyramid_depth = D`` and base width ``w``:

* pyramid encoder: f_0 = ConvBlock(3 -> w) at full resolution, then D
  stride-2 ConvBlocks; f_s has ``w * 2**s`` channels at ``H / 2**s``.
* context encoder (input at H/2): D-1 stride-2 ConvBlocks; c_k has
  ``w * 2**k`` channels at ``H / 2**(k+1)``, the resolution of f_{k+1}.
* decoder, deepest first: stage D fuses f_D with c_{D-1} (gated, no
  previous map); stages D-1..2 gate Up(prev) ++ f_j ++ c_{j-1}; stages 1
  and 0 fuse Up(prev) ++ f_j without context. Stage j outputs
  ``w * 2**j`` channels.
* head: upsample to H x W, 1x1 conv to one logit map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .gating import ContextFusion, ConvBlock, PlainFusion, PredictionHead
from .tensor_core import ShapeError


@dataclass
class ModelConfig:
    input_h: int = 64
    input_w: int = 64
    base_channels: int = 8
    pyramid_depth: int = 3
    sigma: float = 5.0
    p_drop: float = 0.01

    def __post_init__(self):
        step = 2 ** self.pyramid_depth
        if self.pyramid_depth < 2:
            raise ValueError("pyramid_depth must be >= 2 so at least one stage carries context")
        if self.input_h % step or self.input_w % step:
            raise ValueError(
                f"input {self.input_h}x{self.input_w} not divisible by 2**{self.pyramid_depth}"
            )
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError(f"p_drop must be in [0, 1], got {self.p_drop}")
        if self.sigma <= 0 or self.base_channels < 1:
            raise ValueError("sigma and base_channels must be positive")

    def to_dict(self):
        return asdict(self)


class PluccModel:
    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        w, depth = config.base_channels, config.pyramid_depth
        width = [w * 2 ** s for s in range(depth + 1)]

        self.pyramid = [ConvBlock(rng, 3, width[0], stride=1)]
        for s in range(1, depth + 1):
            self.pyramid.append(ConvBlock(rng, width[s - 1], width[s], stride=2))

        # context[k - 1] produces c_k
        self.context = []
        cin = 3
        for k in range(1, depth):
            self.context.append(ConvBlock(rng, cin, width[k], stride=2))
            cin = width[k]

        # decoder[i] handles pyramid level j = depth - i
        self.decoder = [ContextFusion(rng, 0, width[depth], width[depth - 1], width[depth])]
        for j in range(depth - 1, -1, -1):
            if j >= 2:
                self.decoder.append(ContextFusion(rng, width[j + 1], width[j], width[j - 1], width[j]))
            else:
                self.decoder.append(PlainFusion(rng, width[j + 1], width[j], width[j]))
        self.head = PredictionHead(rng, width[0])
        self.training = True

    # ---------------------------------------------------------- bookkeeping

    def _modules(self):
        for i, m in enumerate(self.pyramid):
            yield f"pyramid.{i}", m
        for i, m in enumerate(self.context):
            yield f"context.{i}", m
        for i, m in enumerate(self.decoder):
            yield f"decoder.{i}", m
        yield "head", self.head

    def named_params(self):
        out = {}
        for prefix, m in self._modules():
            blocks = [("", m)]
            if hasattr(m, "conv") and isinstance(m.conv, ConvBlock):
                blocks = [("gate.", m.gate)] if m.gate is not None else []
                blocks.append(("block.", m.conv))
            for sub, blk in blocks:
                if isinstance(blk, ConvBlock):
                    out[f"{prefix}.{sub}conv.kernel"] = blk.conv.kernel
                    out[f"{prefix}.{sub}conv.bias"] = blk.conv.bias
                    out[f"{prefix}.{sub}norm.gamma"] = blk.norm.gamma
                    out[f"{prefix}.{sub}norm.beta"] = blk.norm.beta
                elif isinstance(blk, PredictionHead):
                    out[f"{prefix}.conv.kernel"] = blk.conv.kernel
                    out[f"{prefix}.conv.bias"] = blk.conv.bias
                else:
                    out[f"{prefix}.{sub}gamma"] = blk.gamma
        return out

    def _norms(self):
        blocks = {}
        for prefix, m in self._modules():
            if isinstance(m, ConvBlock):
                blocks[f"{prefix}.norm"] = m.norm
            elif hasattr(m, "conv") and isinstance(m.conv, ConvBlock):
                blocks[f"{prefix}.block.norm"] = m.conv.norm
        return blocks

    def named_buffers(self):
        """Batch-norm running statistics, keyed like the parameters."""
        out = {}
        for name, norm in self._norms().items():
            out[f"{name}.running_mean"] = norm.running_mean
            out[f"{name}.running_var"] = norm.running_var
        return out

    def set_buffer(self, name, value):
        owner, stat = name.rsplit(".", 1)
        setattr(self._norms()[owner], stat, np.array(value, dtype=np.float64))

    def params(self):
        return list(self.named_params().values())

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def train(self, flag=True):
        self.training = flag
        for norm in self._norms().values():
            norm.training = flag
        return self

    def eval(self):
        return self.train(False)

    # ------------------------------------------------------------- forward

    def _check_inputs(self, image, context):
        cfg = self.config
        h, w = cfg.input_h, cfg.input_w
        if image.ndim != 4 or image.shape[1:] != (3, h, w):
            raise ShapeError(f"image must be [B,3,{h},{w}], got {image.shape}")
        if context.ndim != 4 or context.shape[1:] != (3, h // 2, w // 2):
            raise ShapeError(f"context must be [B,3,{h // 2},{w // 2}], got {context.shape}")
        if image.shape[0] != context.shape[0]:
            raise ShapeError("image and context batch sizes differ")

    def forward(self, image, context):
        self._check_inputs(image, context)
        feats = []
        x = image
        for blk in self.pyramid:
            x = blk.forward(x)
            feats.append(x)
        ctx = []
        x = context
        for blk in self.context:
            x = blk.forward(x)
            ctx.append(x)

        depth = self.config.pyramid_depth
        y = self.decoder[0].forward(None, feats[depth], ctx[depth - 2])
        for i, stage in enumerate(self.decoder[1:], start=1):
            j = depth - i
            if isinstance(stage, ContextFusion):
                y = stage.forward(y, feats[j], ctx[j - 2])
            else:
                y = stage.forward(y, feats[j])
        return self.head.forward(y, self.config.input_h, self.config.input_w)

    def forward_with_context_dropout(self, image, context, rng, p_drop=None):
        """Forward pass where each sample's image is zeroed with prob. ``p_drop``.

        Returns ``(logits, dropped)`` with ``dropped`` a boolean mask over the batch.
        """
        if not self.training:
            raise RuntimeError("context-driven dropout is a training-time operation")
        p = self.config.p_drop if p_drop is None else p_drop
        dropped = draw_dropout_mask(rng, image.shape[0], p)
        if dropped.any():
            image = image.copy()
            image[dropped] = 0.0
        return self.forward(image, context), dropped

    def backward(self, dlogits):
        """Accumulate parameter gradients; returns (d_image, d_context)."""
        depth = self.config.pyramid_depth
        dy = self.head.backward(dlogits)
        dfeats = [None] * (depth + 1)
        dctx = [None] * (depth - 1)
        for i in range(len(self.decoder) - 1, 0, -1):
            j = depth - i
            stage = self.decoder[i]
            if isinstance(stage, ContextFusion):
                dy, dfeats[j], dctx[j - 2] = stage.backward(dy)
            else:
                dy, dfeats[j] = stage.backward(dy)
        _, dfeats[depth], dctx[depth - 2] = self.decoder[0].backward(dy)

        g = None
        for k in range(depth - 2, -1, -1):
            g = dctx[k] if g is None else g + dctx[k]
            g = self.context[k].backward(g)
        dcontext = g

        g = None
        for s in range(depth, -1, -1):
            g = dfeats[s] if g is None else g + dfeats[s]
            g = self.pyramid[s].backward(g)
        return g, dcontext


def draw_dropout_mask(rng, n, p):
    """Boolean mask of samples whose image is withheld."""
    return rng.random(n) < p


def count_parameters(model) -> int:
    """Total learnable scalars; accepts a model, a layer or a list of ParamTensors."""
    if isinstance(model, (list, tuple)):
        params = model
    elif hasattr(model, "named_params"):
        params = model.named_params().values()
    else:
        params = model.params()
    return int(sum(p.size for p in params))
