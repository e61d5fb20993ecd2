#!/usr/bin/env python3
"""
kinesim CLI - kinematic-token driving simulation toolkit

    python kinesim_cli.py gen-scenes --config scenes.cfg --seed 7 --out data/scenes
    python kinesim_cli.py tokenize --scenes data/scenes --out data/tokens.jsonl
    python kinesim_cli.py train --scenes data/scenes --tokens data/tokens.jsonl --seed 0 --out runs/base
"""

import sys

from kinesim.cli import main

if __name__ == "__main__":
    sys.exit(main())
