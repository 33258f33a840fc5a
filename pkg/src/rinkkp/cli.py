"""Command-line entry point: ``rinkkp {gen,train,eval,ablate-sigma,ablate-dropout}``.

Config files are flat JSON objects with dotted keys, for example::

    {"scene.n_matches": 10, "model.base_channels": 8, "train.epochs": 15,
     "train.augment.flip": true}

Command-line flags override file values. Exit codes: 0 success, 1 usage
error, 2 runtime failure. Successful commands end with ``OK <path>``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import Homography, RinkSpec
from .metrics import TAUS, Detection, summarize
from .model import ModelConfig
from .synthdata import SPLITS, SceneSpec, generate, load_manifest
from .train import AugmentFlags, TrainConfig, load_checkpoint, load_split, predict, train

log = logging.getLogger("rinkkp")

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)


def _known_keys():
    keys = {}
    for section, cls in (("model", ModelConfig), ("train", TrainConfig), ("scene", SceneSpec)):
        for f in dataclasses.fields(cls):
            if f.name == "augment":
                for af in dataclasses.fields(AugmentFlags):
                    keys[f"train.augment.{af.name}"] = af
            else:
                keys[f"{section}.{f.name}"] = f
    return keys


def build_run_config(flat: dict) -> RunConfig:
    """Build a RunConfig from dotted keys; unknown keys are rejected."""
    known = _known_keys()
    unknown = sorted(set(flat) - set(known))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    sections = {"model": {}, "train": {}, "scene": {}}
    augment = {}
    for key, value in flat.items():
        parts = key.split(".")
        if parts[:2] == ["train", "augment"]:
            augment[parts[2]] = bool(value)
        else:
            sections[parts[0]][parts[1]] = value
    if augment:
        sections["train"]["augment"] = AugmentFlags(**augment)
    try:
        return RunConfig(ModelConfig(**sections["model"]), TrainConfig(**sections["train"]),
                         SceneSpec(**sections["scene"]))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def load_config(path, overrides=None) -> RunConfig:
    flat = {}
    if path:
        try:
            flat = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(flat, dict):
            raise UsageError(f"config {path} must be a JSON object")
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_run_config(flat)


def _seed(args_seed):
    if args_seed is not None:
        return args_seed
    env = os.environ.get("RINKKP_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"RINKKP_SEED must be an integer, got {env!r}") from exc
    return None


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def _fmt(v):
    return repr(float(v))


# --------------------------------------------------------------- commands


def cmd_gen(args):
    seed = _seed(args.seed)
    cfg = load_config(args.config, {**_parse_set(args.set), "scene.seed": seed})
    anns = generate(cfg.scene, args.frames, args.out)
    counts = {s: sum(a.split == s for a in anns) for s in SPLITS}
    manifest = Path(args.out) / "manifest.jsonl"
    print(f"manifest {manifest}")
    print("splits " + " ".join(f"{s}={counts[s]}" for s in SPLITS))
    return manifest


def _train_overrides(args):
    o = _parse_set(args.set)
    o["train.seed"] = _seed(args.seed)
    o["train.epochs"] = getattr(args, "epochs", None)
    return o


def cmd_train(args):
    cfg = load_config(args.config, _train_overrides(args))
    if not (Path(args.data) / "manifest.jsonl").is_file():
        raise FileNotFoundError(f"no manifest.jsonl in {args.data}")
    records = train(cfg.model, cfg.train, args.data, args.out)
    if records:
        last = records[-1]
        print(f"epochs {len(records)} train_loss {last['train_loss']:.6f} val_loss {last['val_loss']:.6f}")
    return Path(args.out) / "checkpoint"


def _frames_detections(frames, peaks):
    return [Detection(fid, tuple(p), c, Homography(h) if h is not None else None)
            for fid, p, c, h in zip(frames.frame_ids, peaks, frames.centers, frames.homographies)]


def _read_detections(path):
    preds = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                preds[str(rec["frame_id"])] = (float(rec["x"]), float(rec["y"]))
            except KeyError as exc:
                raise ValueError(f"{path}:{n}: detection record missing {exc}") from exc
    return preds


def evaluate_checkpoint(ckpt, data, split="test", zero_image=False):
    model, manifest = load_checkpoint(ckpt)
    frames = load_split(data, split)
    mc = model.config
    if frames.images.shape[2:] != (mc.input_h, mc.input_w):
        raise ValueError(
            f"checkpoint expects {mc.input_h}x{mc.input_w} frames, data has {frames.images.shape[2:]}"
        )
    tc = manifest.get("train_config") or {}
    normalize = tc.get("augment", {}).get("normalize", True)
    peaks = predict(model, frames, manifest.get("norm_stats"), normalize=normalize, zero_image=zero_image)
    return summarize(_frames_detections(frames, peaks), RinkSpec())


def cmd_eval(args):
    if args.detections:
        preds = _read_detections(args.detections)
        dets = []
        for a in load_manifest(args.data):
            if a.split != args.split:
                continue
            if a.frame_id not in preds:
                raise ValueError(f"no detection for frame {a.frame_id}")
            gt = None
            if a.bbox is not None:
                x0, y0, x1, y1 = a.bbox
                gt = ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
            dets.append(Detection(a.frame_id, preds[a.frame_id], gt, Homography(a.homography)))
        report = summarize(dets)
    else:
        if not args.ckpt:
            raise UsageError("eval needs --ckpt or --detections")
        report = evaluate_checkpoint(args.ckpt, args.data, args.split)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    return out


def cmd_ablate_sigma(args):
    cfg = load_config(args.config, _train_overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for sigma in _float_list(args.sigmas):
        mc = dataclasses.replace(cfg.model, sigma=sigma)
        tc = dataclasses.replace(cfg.train, sigma=sigma)
        run_dir = out / f"sigma_{sigma:g}"
        train(mc, tc, args.data, run_dir)
        report = evaluate_checkpoint(run_dir / "checkpoint", args.data, args.split)
        (run_dir / "report.json").write_text(report.to_json())
        rows.extend((sigma, tau, report.ap_per_tau[tau]) for tau in TAUS)
    path = out / "sigma_ablation.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sigma", "tau", "ap"])
        for sigma, tau, ap in rows:
            writer.writerow([f"{sigma:g}", tau, "" if ap is None else _fmt(ap)])
    return path


def cmd_ablate_dropout(args):
    cfg = load_config(args.config, _train_overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for p in _float_list(args.p):
        if not 0.0 <= p <= 1.0:
            raise UsageError(f"dropout probability {p} outside [0, 1]")
        mc = dataclasses.replace(cfg.model, p_drop=p)
        tc = dataclasses.replace(cfg.train, p_drop=p)
        run_dir = out / f"p_{p:g}"
        train(mc, tc, args.data, run_dir)
        for mode in ("full", "zeroed_image"):
            report = evaluate_checkpoint(run_dir / "checkpoint", args.data, args.split,
                                         zero_image=(mode == "zeroed_image"))
            records.append({"p_drop": p, "eval_mode": mode, "map_tau": report.map_tau,
                            "d_pixel_mean": report.d_pixel_mean, "ap_r": report.ap_r,
                            "rsle_avg": report.rsle_avg, "n_evaluated": report.n_evaluated})
    path = out / "dropout_ablation.json"
    path.write_text(json.dumps(records, indent=2) + "\n")
    with open(out / "dropout_ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(records[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(records)
    return path


# ----------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="rinkkp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True):
        p.add_argument("--config", help="flat dotted-key JSON config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        p.add_argument("--seed", type=int, help="seed (falls back to $RINKKP_SEED)")
        if data:
            p.add_argument("--data", required=True, help="dataset directory with manifest.jsonl")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p, data=False)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or an external detection file")
    p.add_argument("--ckpt")
    p.add_argument("--detections", help="JSON-lines of {frame_id, x, y}")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-sigma", help="train one model per label sigma")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--sigmas", default="2,5,10,15")
    p.add_argument("--epochs", type=int)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.set_defaults(func=cmd_ablate_sigma)

    p = sub.add_parser("ablate-dropout", help="compare context-driven dropout probabilities")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--p", default="0.0,0.01")
    p.add_argument("--epochs", type=int)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.set_defaults(func=cmd_ablate_dropout)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        path = args.func(args)
    except UsageError as exc:
        print(f"rinkkp: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"rinkkp: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"OK {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
