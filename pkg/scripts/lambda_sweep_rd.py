#!/usr/bin/env python3
"""Loss-weight sensitivity sweep on the desk reaction-diffusion benchmark.

Usage: python scripts/lambda_sweep_rd.py [workdir]

Sweeps (lam1, lam2) over the ladder used in the sensitivity study and writes a
CSV of test errors.  Expect (1,100) to come out ahead of (100,1).
"""

import sys
from pathlib import Path

from invop.cli import main

work = Path(sys.argv[1] if len(sys.argv) > 1 else "rd_sweep")
train_ds = work / "train"
test_ds = work / "test"

for args in (
    ["gen-data", "--set", "problem=reaction_diffusion", "--set", "n=200",
     "--set", "seed=100", "--set", f"out={train_ds}", "--force"],
    ["gen-data", "--set", "problem=reaction_diffusion", "--set", "n=50",
     "--set", "seed=200", "--set", f"out={test_ds}", "--force"],
    ["sweep", "--set", f"dataset={train_ds}", "--set", f"test_dataset={test_ds}",
     "--set", "lambdas=100:1,10:1,1:1,1:0.1,0.1:1,1:10,1:100",
     "--set", "model_preset=desk", "--set", "steps=12000",
     "--set", "batch_size=100", "--set", "lr=0.01",
     "--set", f"out={work}/sweep.csv"],
):
    code = main(args)
    if code != 0:
        sys.exit(code)
print(f"table at {work}/sweep.csv")
