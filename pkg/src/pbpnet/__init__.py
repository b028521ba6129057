"""Point-cloud segmentation with 2D convolutions over three projection planes."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .metrics import ConfusionMatrix, category_mean_iou, class_iou, confusion_update, mean_iou
from .model import PbpConfig, PbpNet, PlaneFeatureSet, pbp_forward, segmentation_loss
from .pcgeom import (AffineTransform, GridSpec, PointCloud, apply_transform, fit_grid_spec,
                     make_synthetic_task, normalize_to_grid, sample_fixed_count)
from .planeops import (FeatureMap, PlaneId, gather_bilinear, gather_vjp, scatter_bilinear,
                       scatter_vjp, select_plane_coords)

__version__ = "0.1.0"

__all__ = [
    "AffineTransform", "ConfusionMatrix", "FeatureMap", "GridSpec", "PbpConfig", "PbpNet",
    "PlaneFeatureSet", "PlaneId", "PointCloud", "RunConfig", "apply_transform", "category_mean_iou",
    "class_iou", "confusion_update", "fit_grid_spec", "gather_bilinear", "gather_vjp",
    "load_checkpoint", "make_synthetic_task", "mean_iou", "normalize_to_grid", "parse_config",
    "pbp_forward", "sample_fixed_count", "save_checkpoint", "scatter_bilinear", "scatter_vjp",
    "segmentation_loss", "select_plane_coords",
]
