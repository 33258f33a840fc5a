"""Seeded synthetic rink scenes standing in for broadcast frames.

Each "match" has its own team colours, rink markings and a fixed
perspective homography onto the 1280x720 rink template. Players are
ellipses scattered around the puck so the player-only context image
carries information about where the puck is.

Output layout under ``out_dir``::

    manifest.jsonl          one Annotation per line
    stats.json              per-channel mean/std of train images in [0, 1]
    images/<frame_id>.ppm   full-resolution frame (P6)
    context/<frame_id>.ppm  half-resolution player-only context (P6)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import RinkSpec, homography_from_points

SPLITS = ("train", "val", "test")


@dataclass
class SceneSpec:
    frame_h: int = 64
    frame_w: int = 64
    n_players: tuple = (3, 6)
    puck_radius_px: int = 2
    blur_prob: float = 0.2
    occlusion_prob: float = 0.05
    absent_prob: float = 0.02
    player_spread_px: float = 10.0
    n_matches: int = 10
    seed: int = 0

    def __post_init__(self):
        self.n_players = tuple(self.n_players)
        if self.puck_radius_px < 1:
            raise ValueError("puck_radius_px must be >= 1")
        for name in ("blur_prob", "occlusion_prob", "absent_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.frame_h % 2 or self.frame_w % 2:
            raise ValueError("frame dimensions must be even (context is half resolution)")
        if self.n_matches < 3:
            raise ValueError("need at least 3 matches to populate train/val/test")
        lo, hi = self.n_players
        if not 0 <= lo <= hi:
            raise ValueError(f"bad n_players range {self.n_players}")


@dataclass
class Annotation:
    frame_id: str
    image_path: str
    context_path: str
    bbox: Optional[list]
    homography: list
    split: str

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=False)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("frame_id", "image_path", "context_path", "bbox", "homography", "split")})


@dataclass
class Ellipse:
    cx: float
    cy: float
    ax: float  # semi-axis along x
    ay: float  # semi-axis along y
    color: tuple = field(default=(0, 0, 0))


def match_of(frame_id):
    """Match index encoded in a frame id such as ``m03_f00042``."""
    return int(frame_id.split("_")[0][1:])


# ------------------------------------------------------------------ PPM io


def write_ppm(path, rgb):
    """``rgb`` is an [H, W, 3] uint8 array."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    if tokens[0] != "P6":
        raise ValueError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    pos += 1
    return np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos).reshape(h, w, 3)


# ---------------------------------------------------------------- drawing


def _ellipse_mask(e: Ellipse, ys, xs):
    return ((xs - e.cx) / e.ax) ** 2 + ((ys - e.cy) / e.ay) ** 2 <= 1.0


def _paint(canvas, e: Ellipse, ys, xs):
    canvas[_ellipse_mask(e, ys, xs)] = e.color


def render_context(players, frame_h, frame_w):
    """Player-only context at half resolution, [H/2, W/2, 3] uint8.

    A context pixel (u, v) covers frame pixels 2u..2u+1, so it is sampled
    at frame coordinate 2u + 0.5. Everything outside the players is zero.
    """
    h, w = frame_h // 2, frame_w // 2
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64) * 2 + 0.5
    ctx = np.zeros((h, w, 3), dtype=np.uint8)
    for p in players:
        _paint(ctx, p, ys, xs)
    return ctx


def _blur3(img):
    k = np.array([1.0, 2.0, 1.0]) / 4.0
    p = np.pad(img.astype(np.float64), ((1, 1), (1, 1), (0, 0)), mode="edge")
    rows = k[0] * p[:-2] + k[1] * p[1:-1] + k[2] * p[2:]
    return k[0] * rows[:, :-2] + k[1] * rows[:, 1:-1] + k[2] * rows[:, 2:]


def _match_style(rng, spec: SceneSpec):
    teams = [tuple(int(v) for v in rng.integers(20, 236, size=3)) for _ in range(2)]
    line_x = int(rng.integers(0, spec.frame_w))
    line_color = (200, 40, 40) if rng.random() < 0.5 else (40, 60, 200)
    return teams, line_x, line_color


def _match_homography(rng, spec: SceneSpec, rink: RinkSpec):
    """Frame rectangle -> jittered quad covering part of the template."""
    tw, th = rink.template_w, rink.template_h
    rw = rng.uniform(0.4, 0.7) * tw
    rh = rng.uniform(0.4, 0.7) * th
    x0 = rng.uniform(0.0, tw - rw)
    y0 = rng.uniform(0.0, th - rh)
    corners = [(x0, y0), (x0 + rw, y0), (x0 + rw, y0 + rh), (x0, y0 + rh)]
    dst = []
    for cx, cy in corners:
        jx = rng.uniform(-0.15, 0.15) * rw
        jy = rng.uniform(-0.15, 0.15) * rh
        dst.append((float(np.clip(cx + jx, 1.0, tw - 1.0)), float(np.clip(cy + jy, 1.0, th - 1.0))))
    src = [(0.0, 0.0), (spec.frame_w, 0.0), (spec.frame_w, spec.frame_h), (0.0, spec.frame_h)]
    return homography_from_points(src, dst)


def _split_of_matches(n_matches):
    n_val = max(1, round(0.2 * n_matches))
    n_test = max(1, round(0.2 * n_matches))
    n_train = n_matches - n_val - n_test
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


def render_frame(rng, spec: SceneSpec, style):
    """Draw one frame; returns (image uint8 [H,W,3], context, bbox or None)."""
    h, w, r = spec.frame_h, spec.frame_w, spec.puck_radius_px
    teams, line_x, line_color = style
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    shade = 205 + 15 * (ys / h)
    img = np.stack([shade - 10, shade, shade + 10], axis=-1)
    img += rng.normal(0.0, 4.0, size=img.shape)
    img[:, max(line_x - 1, 0):line_x + 1] = line_color

    cx = int(rng.integers(r, w - r))
    cy = int(rng.integers(r, h - r))
    visible = rng.random() >= spec.absent_prob
    occluded = rng.random() < spec.occlusion_prob

    lo, hi = spec.n_players
    players = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        px = float(np.clip(cx + rng.normal(0.0, spec.player_spread_px), 0, w - 1))
        py = float(np.clip(cy + rng.normal(0.0, spec.player_spread_px), 0, h - 1))
        team = teams[int(rng.integers(0, 2))]
        players.append(Ellipse(px, py, rng.uniform(2.5, 4.0), rng.uniform(4.0, 7.0), team))
    if visible and occluded:
        team = teams[int(rng.integers(0, 2))]
        players.append(Ellipse(cx + rng.uniform(-1, 1), cy + rng.uniform(-1, 1),
                               r + rng.uniform(2.0, 3.0), r + rng.uniform(3.0, 5.0), team))

    blocker = players[-1] if (visible and occluded) else None
    for p in players:
        if p is blocker:
            continue
        _paint(img, p, ys, xs)
    if visible:
        img[(xs - cx) ** 2 + (ys - cy) ** 2 <= r * r] = (15, 15, 20)
    if blocker is not None:
        _paint(img, blocker, ys, xs)

    if rng.random() < spec.blur_prob:
        img = _blur3(img)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    ctx = render_context(players, h, w)
    bbox = [cx - r, cy - r, cx + r, cy + r] if visible else None
    return img, ctx, bbox


def generate(spec: SceneSpec, n_frames, out_dir, rink: RinkSpec = RinkSpec()):
    """Render ``n_frames`` frames and write the manifest; returns the Annotations."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    annotations = []
    if n_frames > 0:
        (out / "images").mkdir(exist_ok=True)
        (out / "context").mkdir(exist_ok=True)
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_matches)
    match_rngs = [np.random.default_rng(s) for s in seeds]
    styles = [_match_style(g, spec) for g in match_rngs]
    homs = [_match_homography(g, spec, rink) for g in match_rngs]
    splits = _split_of_matches(spec.n_matches)

    train_sum = np.zeros(3)
    train_sq = np.zeros(3)
    n_train_px = 0
    for i in range(n_frames):
        m = i * spec.n_matches // n_frames
        frame_id = f"m{m:02d}_f{i:05d}"
        img, ctx, bbox = render_frame(match_rngs[m], spec, styles[m])
        write_ppm(out / "images" / f"{frame_id}.ppm", img)
        write_ppm(out / "context" / f"{frame_id}.ppm", ctx)
        annotations.append(Annotation(
            frame_id=frame_id,
            image_path=f"images/{frame_id}.ppm",
            context_path=f"context/{frame_id}.ppm",
            bbox=bbox,
            homography=homs[m].to_list(),
            split=splits[m],
        ))
        if splits[m] == "train":
            px = img.reshape(-1, 3) / 255.0
            train_sum += px.sum(axis=0)
            train_sq += (px * px).sum(axis=0)
            n_train_px += px.shape[0]

    with open(out / "manifest.jsonl", "w") as fh:
        for a in annotations:
            fh.write(a.to_json() + "\n")
    if n_train_px:
        mean = train_sum / n_train_px
        std = np.sqrt(np.maximum(train_sq / n_train_px - mean ** 2, 1e-12))
        stats = {"mean": [float(v) for v in mean], "std": [float(v) for v in std],
                 "frame_h": spec.frame_h, "frame_w": spec.frame_w}
        (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    return annotations


def load_manifest(data_dir):
    path = Path(data_dir) / "manifest.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest at {path}")
    with open(path) as fh:
        return [Annotation.from_dict(json.loads(line)) for line in fh if line.strip()]
