"""
Checking backprop against finite differences
============================================

Every parameter-bearing layer, plus the coordinate gradients of scatter,
gather and grid normalisation, compared with central differences in 64-bit.
"""

from pbpnet.config import parse_config
from pbpnet.train import run_gradcheck

cfg = parse_config(None, ["dataset=quadrants"])
report = run_gradcheck(cfg, tolerance=1e-3)
print(report.format())
