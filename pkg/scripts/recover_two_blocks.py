"""Material recovery on the two-block scene through the command line.

Simulates the ground truth, writes its frames, runs ``estimate`` on the
learnable copy of the scene and reports how many neighborhoods got the right
(elastic, plastic) pair.

usage: python scripts/recover_two_blocks.py [out_dir] [internal]
"""

import sys
from pathlib import Path

import numpy as np

from mpmzoo import cli
from mpmzoo.estimation import read_materials
from mpmzoo.scene import load_scene

ROOT = Path(__file__).resolve().parent.parent
SCENES = ROOT / "scenes"


def main(out_dir="out/two_blocks", internal="10"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames, materials, labels = out / "reference.cgf", out / "materials.txt", out / "neighborhoods.txt"
    code = cli.main(["simulate", str(SCENES / "two_blocks.yaml"), "-o", str(frames)])
    if code:
        return code
    code = cli.main(["estimate", str(SCENES / "two_blocks_learn.yaml"), str(frames), "-o", str(materials),
                     "--stages", "5", "--frames-per-stage", "10", "--internal", internal, "--outer", "3",
                     "--lr", "5e-3", "--param-lr", "2e-3", "--init-margin", "0.1", "--keep-best",
                     "--loss-log", str(out / "loss.csv"), "--assignment", str(labels)])
    if code:
        return code
    truth_cfg = load_scene(SCENES / "two_blocks.yaml")
    truth = [truth_cfg.materials[m] for m in truth_cfg.build().particles.material]
    found = read_materials(materials)
    owner = np.loadtxt(labels, dtype=int)
    hits = 0
    for j, spec in enumerate(found):
        members = np.flatnonzero(owner == j)
        pairs = [(truth[i].elastic, truth[i].plastic) for i in members]
        majority = max(set(pairs), key=pairs.count)
        hits += (spec.elastic, spec.plastic) == majority
    print(f"recovered {hits}/{len(found)} neighborhoods ({hits / len(found):.0%})")
    return 0


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
