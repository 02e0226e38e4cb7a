"""
Train, predict and evaluate on a toy corpus
===========================================

Writes a few synthetic RGB-D triples in the expected layout, trains a small
configuration for two epochs through the command-line entry point, then
predicts and scores the maps.
"""

import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from gldmnet import cli


def write_toy(root, n=4, size=96):
    """Ellipse objects on a contrasting background, nearer in depth."""
    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[0:size, 0:size]
    for sub in ("RGB", "depth", "GT"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i in range(n):
        cy, cx = rng.uniform(0.3, 0.7, 2) * size
        ry, rx = rng.uniform(0.15, 0.3, 2) * size
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        bg = rng.uniform(0, 255, 3)
        rgb = np.where(mask[..., None], 255 - bg, bg) + rng.normal(0, 12, (size, size, 3))
        depth = np.where(mask, 200.0, 60.0) + rng.normal(0, 5, (size, size))
        Image.fromarray(np.clip(rgb, 0, 255).astype(np.uint8)).save(root / "RGB" / f"{i:03d}.png")
        Image.fromarray(np.clip(depth, 0, 255).astype(np.uint8)).save(root / "depth" / f"{i:03d}.png")
        Image.fromarray((mask * 255).astype(np.uint8)).save(root / "GT" / f"{i:03d}.png")


work = Path(tempfile.mkdtemp())
write_toy(work / "data" / "TOY")

# a small encoder and narrow fusion keep this to a minute on CPU; two epochs
# only exercise the plumbing, so expect low scores
settings = ["backbone.family='resnet18'", "fusion.widths=[16, 32, 40, 64]", "data.size=64",
            f"data.root='{work / 'data'}'", "train.epochs=2", "train.batch_size=2",
            "train.lr=1e-3", "train.freeze_cnn_epochs=0", "train.freeze_transformer_epochs=0"]
args = ["train", "--run-dir", str(work / "run")]
for s in settings:
    args += ["--set", s]
cli.main(args)
print((work / "run" / "loss_history.csv").read_text().splitlines()[-1])

cli.main(["predict", str(work / "run" / "last.pt"), str(work / "data" / "TOY"), str(work / "maps")])
cli.main(["eval", str(work / "maps"), str(work / "data" / "TOY" / "GT"), str(work / "report.txt"),
          "--table"])

# channel slices of the stage-1 position-fusion output
cli.main(["dump-features", str(work / "run" / "last.pt"),
          str(work / "data" / "TOY" / "RGB" / "000.png"),
          str(work / "data" / "TOY" / "depth" / "000.png"), str(work / "features")])
print("outputs under", work)
