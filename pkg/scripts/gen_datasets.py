#!/usr/bin/env python3
"""Generate desk-scale datasets for the three benchmark problems.

Usage: python scripts/gen_datasets.py [out_root] [--full]

Desk sizes keep generation under a few minutes on a laptop; --full produces the
1000/1000 train/test splits used at full scale (Darcy takes a while on CPU).
"""

import sys
from pathlib import Path

from invop.cli import main

ROOT = Path(sys.argv[1] if len(sys.argv) > 1 and not sys.argv[1].startswith("-")
            else "data")
FULL = "--full" in sys.argv

SPLITS = {
    "train": (1000 if FULL else 200, 100),
    "test": (1000 if FULL else 50, 200),
}

for problem in ("reaction_diffusion", "helmholtz", "darcy"):
    for split, (n, seed) in SPLITS.items():
        if problem == "darcy" and not FULL:
            n = min(n, 120)  # fine-grid solves dominate; keep the desk run short
        out = ROOT / problem / split
        code = main(["gen-data", "--threads", "2",
                     "--set", f"problem={problem}", "--set", f"n={n}",
                     "--set", f"seed={seed}", "--set", f"out={out}", "--force"])
        if code != 0:
            sys.exit(code)
print(f"datasets under {ROOT}/")
