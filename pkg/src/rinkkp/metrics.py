"""Threshold-accuracy evaluation in pixel space and rink space.

"Average precision" here is the percentage of frames whose single
prediction lands within a distance threshold of the ground truth. Frames
without a visible ground-truth puck are excluded from every statistic.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

from .geometry import PUCK_RADIUS_M, Homography, RinkSpec, image_to_rink, in_rink, pixel_distance, rsle

log = logging.getLogger(__name__)

TAUS = (5, 10, 25, 50)
RADIUS_MULTIPLES = (1, 2, 4)


class EmptyEvaluation(ValueError):
    """No detection carries ground truth, so a rate has no denominator."""


@dataclass
class Detection:
    frame_id: str
    pred_px: tuple
    gt_px: Optional[tuple] = None
    homography: Optional[Homography] = None


@dataclass
class MetricsReport:
    ap_per_tau: dict = field(default_factory=dict)
    map_tau: Optional[float] = None
    d_pixel_mean: Optional[float] = None
    ap_r: Optional[float] = None
    ap_r2: Optional[float] = None
    ap_r4: Optional[float] = None
    rsle_avg: Optional[float] = None
    n_evaluated: int = 0
    n_skipped: int = 0

    def to_dict(self):
        d = asdict(self)
        d["ap_per_tau"] = {str(k): v for k, v in self.ap_per_tau.items()}
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _visible(detections):
    return [d for d in detections if d.gt_px is not None]


def _percent(hits, total):
    return 100.0 * hits / total


def ap_at_tau(detections, tau):
    vis = _visible(detections)
    if not vis:
        raise EmptyEvaluation("no detections with ground truth")
    hits = sum(pixel_distance(d.pred_px, d.gt_px) <= tau for d in vis)
    return _percent(hits, len(vis))


def map_tau(detections, taus=TAUS):
    return sum(ap_at_tau(detections, t) for t in taus) / len(taus)


def rink_errors(detections, rink: RinkSpec = RinkSpec()):
    """RSLE per visible frame with a homography, plus the count lacking one."""
    errors = []
    missing = 0
    for d in _visible(detections):
        if d.homography is None:
            missing += 1
            continue
        pred = image_to_rink(d.homography, d.pred_px, rink)
        gt = image_to_rink(d.homography, d.gt_px, rink)
        if not in_rink(pred, rink):
            log.warning("frame %s: prediction maps outside the rink at %s", d.frame_id, pred)
        errors.append(rsle(pred, gt))
    if missing:
        log.warning("%d ground-truth frame(s) lack a homography; skipped for rink metrics", missing)
    return errors, missing


def rink_ap(detections, rink: RinkSpec = RinkSpec(), multiple=1):
    errors, _ = rink_errors(detections, rink)
    if not errors:
        raise EmptyEvaluation("no ground-truth frames with a homography")
    radius = multiple * PUCK_RADIUS_M
    return _percent(sum(e <= radius for e in errors), len(errors))


def summarize(detections, rink: RinkSpec = RinkSpec()) -> MetricsReport:
    """Every report statistic at once.

    ``n_evaluated`` counts frames with ground truth; ``n_skipped`` counts
    frames without ground truth plus ground-truth frames that had to be
    left out of the rink-space statistics for lack of a homography.
    """
    vis = _visible(detections)
    report = MetricsReport(n_evaluated=len(vis), n_skipped=len(detections) - len(vis))
    if not vis:
        report.ap_per_tau = {t: None for t in TAUS}
        return report

    dists = [pixel_distance(d.pred_px, d.gt_px) for d in vis]
    report.ap_per_tau = {t: _percent(sum(x <= t for x in dists), len(dists)) for t in TAUS}
    report.map_tau = sum(report.ap_per_tau.values()) / len(TAUS)
    report.d_pixel_mean = math.fsum(dists) / len(dists)

    errors, missing = rink_errors(vis, rink)
    report.n_skipped += missing
    if errors:
        aps = [_percent(sum(e <= m * PUCK_RADIUS_M for e in errors), len(errors)) for m in RADIUS_MULTIPLES]
        report.ap_r, report.ap_r2, report.ap_r4 = aps
        report.rsle_avg = math.fsum(errors) / len(errors)
    return report
