#!/usr/bin/env python3
"""Desk-scale reaction-diffusion pipeline: data, training, evaluation, inference.

Usage: python scripts/train_rd_desk.py [workdir]

Runs the unsupervised operator training at the desk preset and leaves metrics,
a checkpoint, an evaluation report, and 200x200 prediction CSVs in the workdir.
"""

import sys
from pathlib import Path

from invop.cli import main

work = Path(sys.argv[1] if len(sys.argv) > 1 else "rd_desk")
train_ds = work / "train"
test_ds = work / "test"

steps = [
    ["gen-data", "--set", "problem=reaction_diffusion", "--set", "n=200",
     "--set", "seed=100", "--set", f"out={train_ds}", "--force"],
    ["gen-data", "--set", "problem=reaction_diffusion", "--set", "n=50",
     "--set", "seed=200", "--set", f"out={test_ds}", "--force"],
    ["train", "--set", f"dataset={train_ds}", "--set", f"test_dataset={test_ds}",
     "--set", f"out={work}/run", "--set", "model_preset=desk",
     "--set", "mode=unsupervised", "--set", "steps=25000",
     "--set", "batch_size=100", "--set", "lr=0.01", "--set", "eval_every=2500"],
    ["eval", "--set", f"checkpoint={work}/run/checkpoint",
     "--set", f"dataset={test_ds}", "--set", f"out={work}/eval.json"],
    ["infer", "--set", f"checkpoint={work}/run/checkpoint",
     "--set", f"dataset={test_ds}", "--set", "nx=200", "--set", "ny=200",
     "--set", f"out_u={work}/u_pred.csv", "--set", f"out_s={work}/s_pred.csv"],
]
for args in steps:
    code = main(args)
    if code != 0:
        sys.exit(code)
print(f"artifacts under {work}/")
