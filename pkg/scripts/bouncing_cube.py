"""Simulate the bouncing cube scene and write PGM previews of every sampled frame.

usage: python scripts/bouncing_cube.py [out_dir]
"""

import sys
from pathlib import Path

from mpmzoo import cli

ROOT = Path(__file__).resolve().parent.parent


def main(out_dir="out/bouncing_cube"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = out / "frames.cgf"
    code = cli.main(["simulate", str(ROOT / "scenes" / "bouncing_cube.yaml"), "-o", str(frames),
                     "--summary", str(out / "summary.json")])
    if code == 0:
        code = cli.main(["render", str(frames), str(out / "preview"), "--resolution", "128"])
    return code


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
