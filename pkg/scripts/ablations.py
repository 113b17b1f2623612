"""Short training runs over the ablation grid, one metrics line per variant.

    python scripts/ablations.py [--epochs 3]
"""

import argparse

from crowdcount.config import RunConfig, from_pairs
from crowdcount.data import synth_dataset
from crowdcount.model import CrowdCounter
from crowdcount.trainer import evaluate, train

VARIANTS = {
    "baseline": {},
    "F3-only": {"pfa.stages": "3"},
    "F2+F3": {"pfa.stages": "2,3"},
    "C1-only": {"mdc.columns": "1"},
    "C1+C2": {"mdc.columns": "1,2"},
    "no-shortcut": {"mdc.shortcut": "false"},
    "depth-stacked": {"mdc.stacking": "depth"},
    "depth-stacked (2,2,2)": {"mdc.stacking": "depth_fixed_rate"},
    "lambda2=0.1": {"loss.lambda2": "0.1"},
    "lambda2=1.0": {"loss.lambda2": "1.0"},
    "dm": {"loss.kind": "dm"},
    "weak": {"loss.kind": "weak"},
}

if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("--epochs", type=int, default=3)
    args = p.parse_args()

    scenes = synth_dataset(RunConfig().synth)
    for name, pairs in VARIANTS.items():
        cfg = from_pairs({**pairs, "optim.epochs": str(args.epochs)})
        model = CrowdCounter(cfg.model)
        log = train(model, scenes, cfg.loss, cfg.optim)
        print(f"{name:24s} final-loss={log[-1].loss:.4f} {evaluate(model, scenes).line()}", flush=True)
