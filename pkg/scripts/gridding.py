"""Receptive-field coverage of the three-column head versus uniform-rate stacks.

    python scripts/gridding.py [--out runs/gridding]

Prints each grid in ASCII ('#' reached, '.' hole) and writes a graymap per stack.
"""

import argparse
from pathlib import Path

import numpy as np

from crowdcount.config import RunConfig
from crowdcount.density import write_pgm
from crowdcount.mdc import DilationStack, MDCHead, receptive_coverage

UNIFORM = {"3x3 d2 x3": "3:2,3:2,3:2", "3x3 d1,2,3": "3:1,3:2,3:3", "3x3 d2,4,8": "3:2,3:4,3:8"}

if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("--out", type=Path, default=Path("runs/gridding"))
    args = p.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    head = MDCHead(64, RunConfig().model.mdc, np.random.default_rng(0))
    stacks = {f"column {i + 1}": s for i, s in enumerate(head.coverage_stacks())}
    stacks.update({k: DilationStack.parse(v) for k, v in UNIFORM.items()})
    for i, (name, stack) in enumerate(stacks.items()):
        cov = receptive_coverage(stack)
        print(f"{name}: radius {cov.radius}, holes {'yes' if cov.has_holes else 'no'}")
        print(cov.ascii(), end="\n\n")
        write_pgm(args.out / f"stack{i}.pgm", cov.grid().astype(np.float64))
