"""Training: augmentation, SGD with momentum, plateau LR schedule, checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .heatmap import bbox_center, gaussian_label, kl_loss, normalize_label, peak_extract, spatial_softmax
from .model import ModelConfig, PluccModel
from .synthdata import load_manifest, read_ppm
from .tensor_core import load_tensor, save_tensor

log = logging.getLogger(__name__)

FLIP_PROB = 0.5
BLUR_PROB = 0.3
NOISE_PROB = 0.5
NOISE_STD = 0.02  # fraction of the pixel value range
PLATEAU_MIN_DELTA = 1e-6
CHECKPOINT_FORMAT = "rinkkp-checkpoint-1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AugmentFlags:
    flip: bool = True
    blur: bool = True
    noise: bool = True
    normalize: bool = True


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 10
    lr: float = 1e-3
    momentum: float = 0.9
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    sigma: float = 5.0
    p_drop: float = 0.01
    seed: int = 0
    augment: AugmentFlags = field(default_factory=AugmentFlags)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentFlags(**self.augment)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------- optimizer


class SGDMomentum:
    """v <- momentum * v + grad;  w <- w - lr * v."""

    def __init__(self, named_params, momentum=0.9):
        self.params = dict(named_params)
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def step(self, lr):
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.value -= lr * v


def sgd_momentum_step(params, velocity, lr, momentum=0.9):
    """Functional form over parallel lists of ParamTensors and velocity arrays."""
    for p, v in zip(params, velocity):
        v *= momentum
        v += p.grad
        p.value -= lr * v


class ReduceOnPlateau:
    """Multiply the rate by ``factor`` after ``patience`` epochs without improvement.

    An epoch improves when its validation loss beats the best so far by at
    least ``min_delta``.
    """

    def __init__(self, lr, factor=0.1, patience=5, min_delta=PLATEAU_MIN_DELTA):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss):
        """Record one epoch; returns True when the loss improved."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
        return False


# ----------------------------------------------------------- augmentation


def hflip(x):
    return np.ascontiguousarray(x[..., ::-1])


def blur3(image):
    """3x3 binomial Gaussian blur per channel; edge-replicated borders."""
    k = np.array([0.25, 0.5, 0.25])
    p = np.pad(image, ((0, 0), (1, 1), (1, 1)), mode="edge")
    rows = k[0] * p[:, :-2] + k[1] * p[:, 1:-1] + k[2] * p[:, 2:]
    return k[0] * rows[:, :, :-2] + k[1] * rows[:, :, 1:-1] + k[2] * rows[:, :, 2:]


def normalize_inputs(image, context, stats):
    """Raw [0, 255] arrays -> standardized image and [0, 1] context."""
    img = image / 255.0
    if stats is not None:
        mean = np.asarray(stats["mean"]).reshape(-1, 1, 1)
        std = np.asarray(stats["std"]).reshape(-1, 1, 1)
        img = (img - mean) / std
    return img, context / 255.0


def augment(image, context, center, rng, flags: AugmentFlags = AugmentFlags(), stats=None):
    """Randomly augment one training sample given as raw [0, 255] float arrays.

    ``image`` is [3, H, W], ``context`` [3, H/2, W/2] and ``center`` an
    (x, y) pair or None. A flip mirrors all three (x -> W - 1 - x); blur and
    noise touch the image only.
    """
    w = image.shape[-1]
    if flags.flip and rng.random() < FLIP_PROB:
        image, context = hflip(image), hflip(context)
        if center is not None:
            center = (w - 1 - center[0], center[1])
    if flags.blur and rng.random() < BLUR_PROB:
        image = blur3(image)
    if flags.noise and rng.random() < NOISE_PROB:
        image = image + rng.normal(0.0, NOISE_STD * 255.0, size=image.shape)
    if flags.normalize:
        image, context = normalize_inputs(image, context, stats)
    return image, context, center


# ------------------------------------------------------------------- data


@dataclass
class FrameSet:
    frame_ids: list
    images: np.ndarray  # [N, 3, H, W] raw 0..255
    contexts: np.ndarray  # [N, 3, H/2, W/2] raw 0..255
    centers: list  # (x, y) or None
    homographies: list


def load_split(data_dir, split):
    data_dir = Path(data_dir)
    anns = [a for a in load_manifest(data_dir) if a.split == split]
    if not anns:
        raise ValueError(f"split '{split}' is empty in {data_dir}")
    images = np.stack([read_ppm(data_dir / a.image_path).transpose(2, 0, 1) for a in anns]).astype(np.float64)
    contexts = np.stack([read_ppm(data_dir / a.context_path).transpose(2, 0, 1) for a in anns]).astype(np.float64)
    centers = [bbox_center(*a.bbox) if a.bbox is not None else None for a in anns]
    return FrameSet([a.frame_id for a in anns], images, contexts, centers, [a.homography for a in anns])


def load_stats(data_dir):
    path = Path(data_dir) / "stats.json"
    return json.loads(path.read_text()) if path.is_file() else None


def label_batch(centers, sigma, h, w):
    return np.concatenate([normalize_label(gaussian_label(cx, cy, sigma, h, w)).grid for cx, cy in centers])


def prepare_eval(frames: FrameSet, idx, stats, normalize=True):
    imgs, ctxs = frames.images[idx], frames.contexts[idx]
    if normalize:
        imgs, ctxs = normalize_inputs(imgs, ctxs, stats)
    return imgs, ctxs


def batch_loss(model, frames: FrameSet, sigma, stats, batch_size, normalize=True):
    """Mean KL over the labelled frames, eval mode, no augmentation."""
    model.eval()
    labelled = [i for i, c in enumerate(frames.centers) if c is not None]
    total = 0.0
    h, w = frames.images.shape[2:]
    for start in range(0, len(labelled), batch_size):
        idx = labelled[start:start + batch_size]
        imgs, ctxs = prepare_eval(frames, idx, stats, normalize)
        probs = spatial_softmax(model.forward(imgs, ctxs))
        loss, _ = kl_loss(label_batch([frames.centers[i] for i in idx], sigma, h, w), probs)
        total += loss * len(idx)
    return total / max(len(labelled), 1)


def predict(model, frames: FrameSet, stats, batch_size=10, normalize=True, zero_image=False):
    """Peak (x, y) for every frame, in eval mode."""
    model.eval()
    peaks = []
    for start in range(0, len(frames.frame_ids), batch_size):
        idx = list(range(start, min(start + batch_size, len(frames.frame_ids))))
        imgs, ctxs = prepare_eval(frames, idx, stats, normalize)
        if zero_image:
            imgs = np.zeros_like(imgs)
        peaks.extend(peak_extract(spatial_softmax(model.forward(imgs, ctxs))))
    return peaks


# ------------------------------------------------------------ checkpoints


def _fname(name):
    return f"{name}.ptsr"


def save_checkpoint(path, model: PluccModel, train_config=None, optimizer=None, stats=None, lr=None):
    path = Path(path)
    for sub in ("params", "buffers", "velocity"):
        (path / sub).mkdir(parents=True, exist_ok=True)
    manifest = {"format": CHECKPOINT_FORMAT, "model_config": model.config.to_dict(),
                "train_config": train_config.to_dict() if train_config else None,
                "norm_stats": stats, "lr": lr, "params": {}, "buffers": {}, "velocity": {}}
    for name, p in model.named_params().items():
        save_tensor(path / "params" / _fname(name), p.value)
        manifest["params"][name] = f"params/{_fname(name)}"
    for name, buf in model.named_buffers().items():
        save_tensor(path / "buffers" / _fname(name), buf)
        manifest["buffers"][name] = f"buffers/{_fname(name)}"
    if optimizer is not None:
        for name, v in optimizer.velocity.items():
            save_tensor(path / "velocity" / _fname(name), v)
            manifest["velocity"][name] = f"velocity/{_fname(name)}"
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Returns ``(model, manifest)``; velocities are under ``manifest['velocity_arrays']``."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{mpath}: unknown checkpoint format {manifest.get('format')!r}")
    model = PluccModel(ModelConfig(**manifest["model_config"]))
    params = model.named_params()
    if set(params) != set(manifest["params"]):
        raise ValueError("checkpoint parameters do not match the model layout")
    for name, rel in manifest["params"].items():
        arr = load_tensor(path / rel)
        if arr.shape != params[name].shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {params[name].shape}")
        params[name].value[...] = arr
    for name, rel in manifest["buffers"].items():
        model.set_buffer(name, load_tensor(path / rel))
    manifest["velocity_arrays"] = {n: load_tensor(path / rel) for n, rel in manifest["velocity"].items()}
    return model, manifest


# ------------------------------------------------------------------ train


def train(model_config: ModelConfig, train_config: TrainConfig, data_dir, out_dir):
    """Train on the manifest in ``data_dir``; writes ``out_dir/checkpoint`` and ``out_dir/train_log.jsonl``.

    The retained checkpoint is the one with the best validation loss.
    Returns the list of per-epoch log records.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tc = train_config
    stats = load_stats(data_dir) if tc.augment.normalize else None
    train_set = load_split(data_dir, "train")
    val_set = load_split(data_dir, "val")
    h, w = train_set.images.shape[2:]
    if (h, w) != (model_config.input_h, model_config.input_w):
        raise ValueError(f"data frames are {h}x{w}, model expects {model_config.input_h}x{model_config.input_w}")

    model = PluccModel(model_config, seed=tc.seed)
    opt = SGDMomentum(model.named_params(), momentum=tc.momentum)
    sched = ReduceOnPlateau(tc.lr, tc.plateau_factor, tc.plateau_patience)
    rng = np.random.default_rng(tc.seed)
    labelled = np.array([i for i, c in enumerate(train_set.centers) if c is not None])
    if labelled.size == 0:
        raise ValueError("training split has no labelled frames")

    ckpt = out / "checkpoint"
    save_checkpoint(ckpt, model, tc, opt, stats, sched.lr)
    records = []
    log_path = out / "train_log.jsonl"
    log_path.write_text("")
    for epoch in range(1, tc.epochs + 1):
        lr = sched.lr
        model.train()
        order = labelled[rng.permutation(labelled.size)]
        total = 0.0
        for b, start in enumerate(range(0, order.size, tc.batch_size)):
            idx = order[start:start + tc.batch_size]
            imgs, ctxs, centers = [], [], []
            for i in idx:
                im, cx, c = augment(train_set.images[i], train_set.contexts[i], train_set.centers[i],
                                    rng, tc.augment, stats)
                imgs.append(im)
                ctxs.append(cx)
                centers.append(c)
            logits, _ = model.forward_with_context_dropout(np.stack(imgs), np.stack(ctxs), rng, tc.p_drop)
            probs = spatial_softmax(logits)
            try:
                loss, dlogits = kl_loss(label_batch(centers, tc.sigma, h, w), probs)
            except ValueError:
                loss = math.nan
            if not math.isfinite(loss):
                dump = {"epoch": epoch, "batch": b, "frame_ids": [train_set.frame_ids[i] for i in idx]}
                (out / "diverged.json").write_text(json.dumps(dump, indent=2) + "\n")
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}; see {out / 'diverged.json'}")
            model.zero_grad()
            model.backward(dlogits)
            opt.step(lr)
            total += loss * len(idx)
        train_loss = total / labelled.size
        val_loss = batch_loss(model, val_set, tc.sigma, stats, tc.batch_size, tc.augment.normalize)
        improved = sched.step(val_loss)
        if improved:
            save_checkpoint(ckpt, model, tc, opt, stats, sched.lr)
        rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr}
        records.append(rec)
        with open(log_path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")
        log.info("epoch %d train %.4f val %.4f lr %g", epoch, train_loss, val_loss, lr)
    return records
