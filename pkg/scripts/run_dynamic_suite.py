#!/usr/bin/env python3
"""Train the agent per seed, then compare it with planners on dynamic maps."""
import sys
from pathlib import Path

from gridplan.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "dynamic_suite.ini"

if __name__ == "__main__":
    sys.exit(main(["eval", "-c", str(CONFIG), *sys.argv[1:]]))
