#!/usr/bin/env python3
"""Sweep obstacle density for every algorithm; agents train at the base density."""
import sys
from pathlib import Path

from gridplan.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "density_sweep.ini"

if __name__ == "__main__":
    sys.exit(main(["sweep", "-c", str(CONFIG), *sys.argv[1:]]))
