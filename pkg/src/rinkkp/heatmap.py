"""Gaussian heatmap labels, spatial softmax, KL loss and peak extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_SIGMA = 5.0


@dataclass
class HeatmapLabel:
    grid: np.ndarray  # [1, 1, H, W]
    mu_x: float
    mu_y: float
    sigma: float


def gaussian_label(mu_x, mu_y, sigma, h, w) -> HeatmapLabel:
    """Unnormalized Gaussian peaked at the (possibly fractional) center.

    Values are evaluated at integer pixel coordinates; the center is not
    rounded.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not (0 <= mu_x < w and 0 <= mu_y < h):
        raise ValueError(f"label center ({mu_x}, {mu_y}) outside {w}x{h} grid")
    dx2 = (np.arange(w, dtype=np.float64) - mu_x) ** 2
    dy2 = (np.arange(h, dtype=np.float64) - mu_y) ** 2
    d2 = dy2[:, None] + dx2[None, :]
    grid = np.exp(-d2 / (2.0 * sigma * sigma))
    return HeatmapLabel(grid.reshape(1, 1, h, w), float(mu_x), float(mu_y), float(sigma))


def normalize_label(label: HeatmapLabel) -> HeatmapLabel:
    total = label.grid.sum()
    if not total > 0:
        raise ValueError("cannot normalize a label with non-positive mass")
    return HeatmapLabel(label.grid / total, label.mu_x, label.mu_y, label.sigma)


def spatial_softmax(logits):
    """Softmax over the H*W plane of each sample in ``logits`` [B,1,H,W]."""
    b = logits.shape[0]
    flat = logits.reshape(b, -1)
    z = flat - flat.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).reshape(logits.shape)


def softmax_backward(probs, dprobs):
    """Vector-Jacobian product of :func:`spatial_softmax`."""
    b = probs.shape[0]
    p = probs.reshape(b, -1)
    d = dprobs.reshape(b, -1)
    inner = (p * d).sum(axis=1, keepdims=True)
    return (p * (d - inner)).reshape(probs.shape)


def kl_loss(target, probs):
    """Batch-mean KL(target || probs) with ``0 * log(0/q) = 0``.

    ``target`` and ``probs`` are [B,1,H,W] distributions (``target`` may
    also be a single :class:`HeatmapLabel`). Returns the loss and its
    gradient with respect to the pre-softmax logits, ``(probs - target)/B``.
    """
    if isinstance(target, HeatmapLabel):
        target = target.grid
    target = np.broadcast_to(target, probs.shape)
    b = probs.shape[0]
    support = target > 0
    if np.any(probs[support] <= 0):
        raise ValueError("predicted heatmap has exact zeros where the label has mass")
    t = target[support]
    loss = float(np.sum(t * (np.log(t) - np.log(probs[support]))) / b)
    grad_logits = (probs - target) / b
    return loss, grad_logits


def peak_extract(heatmap):
    """Argmax (x, y) per sample; ties go to the smallest row-major index."""
    b = heatmap.shape[0]
    w = heatmap.shape[-1]
    idx = np.argmax(heatmap.reshape(b, -1), axis=1)
    return [(int(i % w), int(i // w)) for i in idx]


def bbox_center(xmin, ymin, xmax, ymax):
    if xmax < xmin or ymax < ymin:
        raise ValueError(f"inverted bounding box ({xmin}, {ymin}, {xmax}, {ymax})")
    return ((xmin + xmax) / 2.0, (ymin + ymax) / 2.0)
