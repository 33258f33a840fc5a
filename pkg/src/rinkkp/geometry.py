"""Image-to-rink mapping: homographies, template scaling and RSLE."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PUCK_RADIUS_M = 0.0381


class PointAtInfinity(ValueError):
    pass


@dataclass(frozen=True)
class RinkSpec:
    length_m: float = 61.0
    width_m: float = 25.9
    template_w: float = 1280
    template_h: float = 720

    def __post_init__(self):
        if min(self.length_m, self.width_m, self.template_w, self.template_h) <= 0:
            raise ValueError("rink and template dimensions must be positive")


class Homography:
    """3x3 projective map from the image plane onto the rink template."""

    def __init__(self, h):
        m = np.asarray(h, dtype=np.float64).reshape(3, 3)
        det = np.linalg.det(m)
        if abs(det) <= 1e-12 * max(np.abs(m).max(), 1.0) ** 3:
            raise ValueError(f"singular homography (det={det:g})")
        self.h = m

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    def to_list(self):
        return [float(v) for v in self.h.ravel()]

    def inverse(self):
        """Closed-form adjugate inverse."""
        a = self.h
        adj = np.array([
            [a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1], a[0, 2] * a[2, 1] - a[0, 1] * a[2, 2], a[0, 1] * a[1, 2] - a[0, 2] * a[1, 1]],
            [a[1, 2] * a[2, 0] - a[1, 0] * a[2, 2], a[0, 0] * a[2, 2] - a[0, 2] * a[2, 0], a[0, 2] * a[1, 0] - a[0, 0] * a[1, 2]],
            [a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0], a[0, 1] * a[2, 0] - a[0, 0] * a[2, 1], a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]],
        ])
        det = a[0, 0] * adj[0, 0] + a[0, 1] * adj[1, 0] + a[0, 2] * adj[2, 0]
        return Homography(adj / det)

    def __call__(self, x, y):
        return apply_homography(self, x, y)


def apply_homography(h, x, y):
    m = h.h if isinstance(h, Homography) else np.asarray(h, dtype=np.float64).reshape(3, 3)
    px = m[0, 0] * x + m[0, 1] * y + m[0, 2]
    py = m[1, 0] * x + m[1, 1] * y + m[1, 2]
    pz = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(pz) < 1e-12:
        raise PointAtInfinity(f"({x}, {y}) maps to the line at infinity")
    return (px / pz, py / pz)


def homography_from_points(src, dst):
    """Solve the 4-point DLT with h33 fixed to 1."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    sol = np.linalg.solve(a, b)
    return Homography(np.append(sol, 1.0))


def to_rink(warped, rink: RinkSpec = RinkSpec()):
    x, y = warped
    return (x / rink.template_w * rink.length_m, y / rink.template_h * rink.width_m)


def in_rink(point_m, rink: RinkSpec = RinkSpec()):
    x, y = point_m
    return 0.0 <= x <= rink.length_m and 0.0 <= y <= rink.width_m


def image_to_rink(h, point_px, rink: RinkSpec = RinkSpec()):
    return to_rink(apply_homography(h, *point_px), rink)


def rsle(pred_rink, gt_rink):
    """Euclidean rink-space error in meters."""
    return math.hypot(pred_rink[0] - gt_rink[0], pred_rink[1] - gt_rink[1])


def pixel_distance(pred, gt):
    return math.hypot(pred[0] - gt[0], pred[1] - gt[1])
