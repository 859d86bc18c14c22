#!/usr/bin/env python3
"""Derive per-figure CSVs from a finished report directory."""
import sys

from gridplan.cli import main

if __name__ == "__main__":
    sys.exit(main(["plot-data", *sys.argv[1:]]))
