#!/usr/bin/env python3
"""Run one shipped experiment configuration end to end.

Example:
    python scripts/run_experiment.py flow configs/atiyah_flow.yaml runs/atiyah
"""

import sys

from hymlab.cli import main

if __name__ == "__main__":
    if len(sys.argv) != 4:
        print(__doc__)
        sys.exit(3)
    sub, config, out = sys.argv[1:]
    sys.exit(main([sub, "--config", config, "--out", out]))
