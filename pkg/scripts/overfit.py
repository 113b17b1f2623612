"""Overfit the default 8-scene synthetic set with the full and weak objectives.

    python scripts/overfit.py --out runs/overfit [--epochs 200]

Each run goes through the CLI, so the output directories can be re-evaluated
with ``crowdcount eval``.
"""

import argparse
import time
from pathlib import Path

from crowdcount.cli import main


def run(argv):
    code = main([str(a) for a in argv])
    if code != 0:
        raise SystemExit(code)


if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("--out", type=Path, default=Path("runs/overfit"))
    p.add_argument("--epochs", type=int, default=200)
    args = p.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    cfg = args.out / "run.txt"
    cfg.write_text(f"optim.epochs = {args.epochs}\n")
    data = args.out / "data"
    run(["synth", "--config", cfg, "--out", data])
    for loss in ("full", "weak"):
        t0 = time.perf_counter()
        run(["train", "--config", cfg, "--data", data, "--loss", loss, "--out", args.out / loss])
        print(f"[{loss}] {time.perf_counter() - t0:.1f}s")
