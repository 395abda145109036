#!/usr/bin/env python3
"""
fracstab entry point.

Runs the command line interface from a source checkout without installing
the package:

    python3 app.py reproduce example1
    python3 app.py verify
"""

import sys
from pathlib import Path

# Make the package importable when run from anywhere
sys.path.insert(0, str(Path(__file__).resolve().parent))

from fracstab.cli import main  # noqa: E402

if __name__ == '__main__':
    main()
