#!/usr/bin/env python3
"""Train the agent on a small static map (three seeds, early stopping)."""
import sys
from pathlib import Path

from gridplan.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "train_small.ini"

if __name__ == "__main__":
    sys.exit(main(["train", "-c", str(CONFIG), *sys.argv[1:]]))
