"""Generate a synthetic dataset, train the default toy model and report test metrics.

    python scripts/toy_experiment.py --out runs/toy --frames 300
"""

import argparse
import json
import logging
import time
from pathlib import Path

from rinkkp.cli import evaluate_checkpoint
from rinkkp.model import ModelConfig
from rinkkp.synthdata import SceneSpec, generate
from rinkkp.train import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--frames", type=int, default=300)
    ap.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    t0 = time.perf_counter()
    generate(SceneSpec(seed=args.seed), args.frames, out / "data")
    records = train(ModelConfig(), TrainConfig(epochs=args.epochs, seed=args.seed), out / "data", out / "run")
    report = evaluate_checkpoint(out / "run" / "checkpoint", out / "data", "test")
    (out / "report.json").write_text(report.to_json())

    summary = {
        "seconds": round(time.perf_counter() - t0, 1),
        "first_train_loss": records[0]["train_loss"] if records else None,
        "final_train_loss": records[-1]["train_loss"] if records else None,
        "report": report.to_dict(),
    }
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
