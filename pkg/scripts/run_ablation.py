#!/usr/bin/env python3
"""Run the component ablation grid (full, A1, A2, A3) on the dynamic arena."""
import sys
from pathlib import Path

from gridplan.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "ablation.ini"

if __name__ == "__main__":
    sys.exit(main(["ablate", "-c", str(CONFIG), *sys.argv[1:]]))
