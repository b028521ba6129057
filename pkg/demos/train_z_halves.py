"""
Training on the z-halves toy task
=================================

Labels depend only on z, so the model must use the YZ or ZX planes.
Train briefly, save a checkpoint, reload it and evaluate on held-out clouds.
"""

import tempfile
from pathlib import Path

from pbpnet.config import parse_config
from pbpnet.train import run_eval, run_train

out = Path(tempfile.mkdtemp())
cfg = parse_config(None, ["dataset=z_halves", "train_clouds=8", "test_clouds=4",
                          "points_per_cloud=512", "resolution=32", "epochs=20",
                          f"checkpoint={out / 'z.ckpt'}", f"log={out / 'train.log'}"])

result = run_train(cfg, log=lambda r: print(f"epoch {r['epoch']:3d}  loss {r['loss']:.4f}  "
                                            f"acc {r['accuracy']:.3f}"))
print(f"trained in {result.seconds:.0f} s, checkpoint {result.checkpoint}")

###############################################################################
# The checkpoint is loaded into a fresh model before evaluation.

report = run_eval(cfg)
print(report.text)
