#!/usr/bin/env python3
"""Benchmark the classical planners on static room-and-corridor maps."""
import sys
from pathlib import Path

from gridplan.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "static_suite.ini"

if __name__ == "__main__":
    sys.exit(main(["eval", "-c", str(CONFIG), *sys.argv[1:]]))
