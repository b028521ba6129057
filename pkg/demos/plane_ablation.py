"""
Why one plane is not enough
===========================

On z_halves the XY plane cannot see the label, so an XY-only model stays
near chance while adding YZ and ZX solves the task.
"""

from pbpnet.config import parse_config
from pbpnet.train import format_ablation, run_ablate

cfg = parse_config(None, ["dataset=z_halves", "train_clouds=16", "test_clouds=4",
                          "points_per_cloud=1024", "resolution=32", "epochs=15",
                          "ablate_grid=planes"])
rows = run_ablate(cfg, log=lambda r: print(f"{r.planes} plane(s): mIoU {r.miou:.3f}"))
print()
print(format_ablation(rows))
