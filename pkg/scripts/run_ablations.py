"""Sigma and context-dropout ablations on one synthetic dataset, via the CLI.

    python scripts/run_ablations.py --out runs/ablations --frames 300 --epochs 15
"""

import argparse
import sys
from pathlib import Path

from rinkkp.cli import main as cli


def step(*argv):
    code = cli([str(a) for a in argv])
    if code:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--frames", type=int, default=300)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--sigmas", default="2,5,10,15")
    ap.add_argument("--p", default="0.0,0.01")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    data = out / "data"
    step("gen", "--out", data, "--frames", args.frames, "--seed", args.seed)
    step("ablate-sigma", "--data", data, "--out", out / "sigma", "--sigmas", args.sigmas,
         "--epochs", args.epochs, "--seed", args.seed)
    step("ablate-dropout", "--data", data, "--out", out / "dropout", "--p", args.p,
         "--epochs", args.epochs, "--seed", args.seed)
    print((out / "sigma" / "sigma_ablation.csv").read_text())
    print((out / "dropout" / "dropout_ablation.csv").read_text())


if __name__ == "__main__":
    main()
