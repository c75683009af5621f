"""Write the ``quadcard`` fixture case: a flat two-sided card with a red front and a blue back.

The front image is a constant red frame and every tile of the grid is constant
blue. After a full run the front half of the atlas should be red and the back
half blue; the grid tiles that look at the front are pinned by the blending
mask, so their blue never reaches the atlas.

    python demos/make_quadcard_fixture.py fixtures/quadcard
"""

import json
import os
import sys

import numpy as np

from atlasforge.fileio import write_png

FRONT = (0.8, 0.2, 0.2)
BACK = (0.2, 0.3, 0.9)
SIZE = 128
ATLAS = 64


def make(root, size=SIZE):
    os.makedirs(root, exist_ok=True)
    write_png(os.path.join(root, "front.png"), np.broadcast_to(FRONT, (size, size, 3)))
    write_png(os.path.join(root, "grid.png"), np.broadcast_to(BACK, (2 * size, 3 * size, 3)))
    config = {
        "mesh": "builtin:card",
        "output_dir": "run",
        "prompt": "a playing card",
        "atlas_resolution": ATLAS,
        "render_resolution": size,
        "tile_size": size,
        "backend": {"kind": "fixture", "path": "."},
        "seed": 0,
    }
    with open(os.path.join(root, "run.json"), "w") as fh:
        json.dump(config, fh, indent=2)
        fh.write("\n")


if __name__ == "__main__":
    make(sys.argv[1] if len(sys.argv) > 1 else "fixtures/quadcard")
