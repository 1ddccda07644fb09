"""Forward-only throughput and peak memory at a few particle counts.

usage: python scripts/bench.py [steps] [threads]
"""

import sys

from mpmzoo import cli


def main(steps="100", threads="1"):
    for particles in (5000, 20000, 50000):
        code = cli.main(["--threads", threads, "bench", str(particles), steps])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
