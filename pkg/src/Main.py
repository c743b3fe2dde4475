#!/usr/bin/env python3
"""
Main entry point for imexode.

This script provides the CLI for data generation, training, prediction and
the solver verification studies.
"""

import sys
from pathlib import Path

# Add the src directory to Python path for imports
sys.path.insert(0, str(Path(__file__).parent))

from imexode.cli import main

if __name__ == "__main__":
    sys.exit(main())
