"""The projection / back-projection segmentation network.

Pipeline for a batch of clouds ``(B, N, 3)``:

1. centre and scale each cloud into the unit cube;
2. optionally align it with a mini T-Net (a learned 3x3 transform);
3. map the aligned points into grid coordinates and lift them to a shallow
   per-point feature;
4. scatter those features onto each configured plane;
5. run the 2D backbone, tapping 128-, 64- and 16-channel maps;
6. gather every tapped map back to the points, sum the planes per depth and
   concatenate the depths (208 channels with all three taps);
7. optionally append the additional point-wise branch, then classify each
   point with a small MLP.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import netcore as nc
from .netcore import Tensor
from .pcgeom import AffineTransform, unit_normalize
from .planeops import MODES, PlaneId, coord_grad, sample, splat

SCALE_CHANNELS = (128, 64, 16)
SCALE_STRIDES = (4, 2, 1)
TNET_POINT_WIDTHS = (32, 64, 128)
TNET_GLOBAL_WIDTHS = (64, 32)
ENCODER_WIDTHS = (32, 64, 128)
HEAD_WIDTHS = (128, 64)
ADDITIONAL_HIDDEN = 32


@dataclass(frozen=True)
class PbpConfig:
    num_classes: int = 2
    resolution: int = 64
    planes: tuple = ("XY", "YZ", "ZX")
    use_tnet: bool = True
    use_multiscale: bool = True
    use_additional: bool = True
    shallow_feat_dim: int = 16
    additional_feat_dim: int = 32
    shared_backbone: bool = True
    detach_coords: bool = False
    margin: float = 0.5
    accumulation: str = "ordered"

    def __post_init__(self):
        planes = tuple(PlaneId.parse(p).name for p in self.planes)
        if not planes:
            raise ValueError("at least one projection plane is required")
        if len(set(planes)) != len(planes):
            raise ValueError(f"duplicate planes in {self.planes}")
        object.__setattr__(self, "planes", planes)
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.resolution < 4 or self.resolution % 4:
            raise ValueError(f"resolution must be a multiple of 4 and >= 4, got {self.resolution}")
        if self.accumulation not in MODES:
            raise ValueError(f"accumulation must be one of {MODES}")

    @property
    def plane_ids(self):
        return tuple(PlaneId[p] for p in self.planes)

    @property
    def scale_channels(self):
        return SCALE_CHANNELS if self.use_multiscale else SCALE_CHANNELS[-1:]

    @property
    def fused_width(self):
        return sum(self.scale_channels)

    @property
    def head_in_width(self):
        return self.fused_width + (self.additional_feat_dim if self.use_additional else 0)


@dataclass
class PlaneFeatureSet:
    """Back-projected sub-features keyed by ``(PlaneId, depth)``; each (B, N, depth)."""

    features: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.features)

    def __getitem__(self, key):
        return self.features[key]

    def depths(self):
        return sorted({d for _, d in self.features}, reverse=True)


# -- differentiable plane and grid ops ---------------------------------------

def scatter_op(coords, feats, resolution, mode="ordered"):
    """Tensor version of the bilinear scatter; coords (B, N, 2), feats (B, N, C)."""
    grid = splat(coords.data, feats.data, resolution, mode)

    def vjp(g):
        d_feats = sample(g, coords.data).astype(feats.dtype, copy=False)
        d_coords = None
        if coords.requires_grad:
            d_coords = coord_grad(g, coords.data, feats.data).astype(coords.dtype)
        return d_coords, d_feats

    return nc._node(grid, (coords, feats), vjp, "scatter")


def gather_op(grid, coords):
    """Tensor version of the bilinear gather; grid (B, r, r, C), coords (B, N, 2)."""
    out = sample(grid.data, coords.data)
    resolution = grid.shape[1]

    def vjp(g):
        d_grid = splat(coords.data, g, resolution, "ordered").astype(grid.dtype, copy=False)
        d_coords = None
        if coords.requires_grad:
            d_coords = coord_grad(grid.data, coords.data, g).astype(coords.dtype)
        return d_grid, d_coords

    return nc._node(out, (grid, coords), vjp, "gather")


def grid_normalize_op(coords, resolution, margin=0.5):
    """Fit a uniform-scale box per cloud and map (B, N, 3) points into grid cells.

    Differentiable through the fitted box: the minimum and the extent route
    their gradients to the extreme points, as a max-pool would.
    """
    x = coords.data
    b_idx = np.arange(x.shape[0])
    lo_arg = x.argmin(axis=1)
    hi_arg = x.argmax(axis=1)
    lo = np.take_along_axis(x, lo_arg[:, None], axis=1)
    hi = np.take_along_axis(x, hi_arg[:, None], axis=1)
    extents = (hi - lo)[:, 0]
    axis = extents.argmax(axis=1)
    extent = extents[b_idx, axis]
    degenerate = extent == 0
    extent = np.where(degenerate, 1.0, extent).astype(x.dtype)
    span = resolution - 1 - 2 * margin
    s = (span / extent)[:, None, None]
    raw = margin + (x - lo) * s
    top = resolution - 1 - margin
    u = np.clip(raw, margin, top).astype(x.dtype, copy=False)
    inside = (raw >= margin - 1e-6) & (raw <= top + 1e-6)

    def vjp(g):
        gm = g * inside
        dx = gm * s
        d_lo = -(gm.sum(axis=1) * s[:, 0])
        d_ext = -(gm * (x - lo)).sum(axis=(1, 2)) * span / extent ** 2
        d_ext = np.where(degenerate, 0.0, d_ext)
        for a in range(3):
            np.add.at(dx, (b_idx, lo_arg[:, a], a), d_lo[:, a])
        np.add.at(dx, (b_idx, hi_arg[b_idx, axis], axis), d_ext)
        np.add.at(dx, (b_idx, lo_arg[b_idx, axis], axis), -d_ext)
        return (dx.astype(x.dtype, copy=False),)

    return nc._node(u, (coords,), vjp, "grid_normalize")


# -- network ------------------------------------------------------------------

class PbpNet:
    """Parameters plus forward pass.

    ``params`` is an ordered mapping of name to :class:`~pbpnet.netcore.Tensor`;
    the order is fixed by the config and is the checkpoint order.
    """

    def __init__(self, config=None, seed=0, dtype=np.float32):
        self.config = config or PbpConfig()
        self.dtype = np.dtype(dtype)
        self.params = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng

    # construction

    def _dense_param(self, name, fan_in, fan_out):
        self.params[f"{name}.w"] = Tensor(
            nc.init_uniform(self._rng, (fan_in, fan_out), fan_in, self.dtype), True, f"{name}.w")
        self.params[f"{name}.b"] = Tensor(np.zeros(fan_out, self.dtype), True, f"{name}.b")

    def _conv_param(self, name, cin, cout):
        self.params[f"{name}.k"] = Tensor(
            nc.init_uniform(self._rng, (3, 3, cin, cout), 9 * cin, self.dtype), True, f"{name}.k")
        self.params[f"{name}.b"] = Tensor(np.zeros(cout, self.dtype), True, f"{name}.b")

    def _tnet_params(self, prefix):
        width = 3
        for i, w in enumerate(TNET_POINT_WIDTHS, 1):
            self._dense_param(f"{prefix}.point{i}", width, w)
            width = w
        for i, w in enumerate(TNET_GLOBAL_WIDTHS, 1):
            self._dense_param(f"{prefix}.global{i}", width, w)
            width = w
        self.params[f"{prefix}.out.w"] = Tensor(np.zeros((width, 9), self.dtype), True, f"{prefix}.out.w")
        self.params[f"{prefix}.out.b"] = Tensor(np.eye(3, dtype=self.dtype).ravel(), True, f"{prefix}.out.b")

    def _backbone_params(self, prefix):
        width = self.config.shallow_feat_dim
        for i, w in enumerate(ENCODER_WIDTHS, 1):
            self._conv_param(f"{prefix}.enc{i}", width, w)
            width = w
        self._conv_param(f"{prefix}.dec1", SCALE_CHANNELS[0], SCALE_CHANNELS[1])
        self._conv_param(f"{prefix}.dec2", SCALE_CHANNELS[1], SCALE_CHANNELS[2])

    def _build(self):
        cfg = self.config
        if cfg.use_tnet:
            self._tnet_params("tnet")
        self._dense_param("shallow", 3, cfg.shallow_feat_dim)
        if cfg.shared_backbone:
            self._backbone_params("backbone")
        else:
            for plane in cfg.planes:
                self._backbone_params(f"backbone_{plane}")
        if cfg.use_additional:
            self._tnet_params("additional.tnet")
            self._dense_param("additional.fc1", 3, ADDITIONAL_HIDDEN)
            self._dense_param("additional.fc2", ADDITIONAL_HIDDEN, cfg.additional_feat_dim)
        width = cfg.head_in_width
        for i, w in enumerate(HEAD_WIDTHS, 1):
            self._dense_param(f"head.fc{i}", width, w)
            width = w
        self._dense_param("head.out", width, cfg.num_classes)

    # parameter access

    def p(self, name):
        return self.params[name]

    def state_dict(self):
        return {name: t.data for name, t in self.params.items()}

    def load_state_dict(self, state):
        from .errors import ArchitectureMismatchError

        missing = [k for k in self.params if k not in state]
        extra = [k for k in state if k not in self.params]
        if missing or extra:
            raise ArchitectureMismatchError(
                f"parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, t in self.params.items():
            value = np.asarray(state[name])
            if value.shape != t.shape:
                raise ArchitectureMismatchError(
                    f"{name}: checkpoint shape {value.shape} != model shape {t.shape}")
            t.data = value.astype(self.dtype).copy()

    def astype(self, dtype):
        clone = PbpNet.__new__(PbpNet)
        clone.config = self.config
        clone.dtype = np.dtype(dtype)
        clone.params = {n: Tensor(t.data.astype(dtype), True, n) for n, t in self.params.items()}
        return clone

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self):
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self.params.items()}

    def num_parameters(self):
        return sum(t.data.size for t in self.params.values())

    # building blocks

    def _dense(self, name, x, activation=True):
        y = nc.dense(x, self.p(f"{name}.w"), self.p(f"{name}.b"))
        return nc.relu(y) if activation else y

    def tnet_forward(self, coords, prefix="tnet"):
        """Predict a (B, 3, 3) transform; exactly the identity at initialisation."""
        coords = nc.as_tensor(coords)
        h = coords
        for i in range(1, len(TNET_POINT_WIDTHS) + 1):
            h = self._dense(f"{prefix}.point{i}", h)
        h = nc.global_maxpool_points(h)
        for i in range(1, len(TNET_GLOBAL_WIDTHS) + 1):
            h = self._dense(f"{prefix}.global{i}", h)
        m = self._dense(f"{prefix}.out", h, activation=False)
        return m.reshape(coords.shape[0], 3, 3)

    def transforms(self, coords, prefix="tnet"):
        """The T-Net output as plain :class:`AffineTransform` values, one per cloud."""
        x = unit_normalize(np.asarray(coords)).astype(self.dtype)
        if x.ndim == 2:
            x = x[None]
        m = self.tnet_forward(Tensor(x), prefix).data
        return [AffineTransform(mat) for mat in m]

    def shallow_point_features(self, aligned):
        return self._dense("shallow", aligned)

    def backbone_forward(self, grid, prefix="backbone"):
        """Return the (128, 64, 16)-channel maps at strides (4, 2, 1)."""
        grid = nc.as_tensor(grid)
        r = grid.shape[1]
        if r % 4 or grid.shape[2] != r:
            raise ValueError(f"backbone needs a square map with side divisible by 4, got {grid.shape}")

        def conv(name, x, activation=True):
            y = nc.conv2d(x, self.p(f"{name}.k"), self.p(f"{name}.b"))
            return nc.relu(y) if activation else y

        h = conv(f"{prefix}.enc1", grid)
        h = nc.maxpool2d(h)
        h = conv(f"{prefix}.enc2", h)
        h = nc.maxpool2d(h)
        m128 = conv(f"{prefix}.enc3", h)
        m64 = conv(f"{prefix}.dec1", nc.upsample2x(m128))
        m16 = conv(f"{prefix}.dec2", nc.upsample2x(m64), activation=False)
        return m128, m64, m16

    def backproject_all(self, maps, plane_coords):
        """Gather each tapped map back to the points.

        ``maps`` maps PlaneId to its (m128, m64, m16) tuple and
        ``plane_coords`` maps PlaneId to (B, N, 2) grid coordinates at full
        resolution; coarser maps are sampled at coordinates divided by their
        stride, clamped to the coarse grid's last node.
        """
        wanted = set(self.config.scale_channels)
        out = PlaneFeatureSet()
        for plane, taps in maps.items():
            coords = plane_coords[plane]
            for tap, depth, stride in zip(taps, SCALE_CHANNELS, SCALE_STRIDES):
                if depth not in wanted:
                    continue
                c = coords if stride == 1 else nc.clip(coords / stride, 0.0, tap.shape[1] - 1)
                out.features[(plane, depth)] = gather_op(tap, c)
        return out

    def fuse_features(self, pfs):
        """Sum sub-features over planes per depth, then concatenate depths."""
        fused = []
        for depth in self.config.scale_channels:
            terms = [f for (plane, d), f in pfs.features.items() if d == depth]
            if not terms:
                raise ValueError(f"no sub-features of depth {depth}")
            total = terms[0]
            for t in terms[1:]:
                total = total + t
            fused.append(total)
        return fused[0] if len(fused) == 1 else nc.concat(fused, axis=-1)

    def additional_branch(self, unit_coords):
        x = nc.as_tensor(unit_coords)
        m = self.tnet_forward(x, "additional.tnet")
        h = nc.bmm(x, m)
        h = self._dense("additional.fc1", h)
        return self._dense("additional.fc2", h)

    # full forward

    def forward(self, coords, return_parts=False):
        """Per-point logits (B, N, K) for raw coordinates (B, N, 3) or (N, 3)."""
        cfg = self.config
        coords = np.asarray(coords)
        if coords.ndim == 2:
            coords = coords[None]
        if coords.ndim != 3 or coords.shape[-1] != 3 or coords.shape[1] < 1:
            raise ValueError(f"coords must be (B, N, 3) with N >= 1, got {coords.shape}")
        x0 = Tensor(unit_normalize(coords).astype(self.dtype))
        aligned = nc.bmm(x0, self.tnet_forward(x0)) if cfg.use_tnet else x0
        grid = grid_normalize_op(aligned, cfg.resolution, cfg.margin)
        if cfg.detach_coords:
            grid = Tensor(grid.data)
        feats = self.shallow_point_features(aligned)

        plane_coords = {p: nc.take(grid, list(p.axes), axis=-1) for p in cfg.plane_ids}
        maps = {}
        if cfg.shared_backbone:
            planes = cfg.plane_ids
            stacked_coords = nc.concat([plane_coords[p] for p in planes], axis=0)
            stacked_feats = nc.concat([feats] * len(planes), axis=0) if len(planes) > 1 else feats
            projected = scatter_op(stacked_coords, stacked_feats, cfg.resolution, cfg.accumulation)
            taps = self.backbone_forward(projected)
            b = coords.shape[0]
            for i, p in enumerate(planes):
                maps[p] = tuple(t if len(planes) == 1 else t[i * b:(i + 1) * b] for t in taps)
        else:
            for p in cfg.plane_ids:
                projected = scatter_op(plane_coords[p], feats, cfg.resolution, cfg.accumulation)
                maps[p] = self.backbone_forward(projected, f"backbone_{p.name}")

        pfs = self.backproject_all(maps, plane_coords)
        fused = self.fuse_features(pfs)
        head_in = fused
        if cfg.use_additional:
            head_in = nc.concat([fused, self.additional_branch(x0)], axis=-1)
        h = head_in
        for i in range(1, len(HEAD_WIDTHS) + 1):
            h = self._dense(f"head.fc{i}", h)
        logits = self._dense("head.out", h, activation=False)
        if return_parts:
            return logits, {"aligned": aligned, "grid": grid, "shallow": feats, "maps": maps,
                            "subfeatures": pfs, "fused": fused, "head_in": head_in}
        return logits

    __call__ = forward

    def predict(self, coords):
        return self.forward(coords).data.argmax(axis=-1)


def pbp_forward(model, coords):
    return model.forward(coords)


def segmentation_loss(logits, labels):
    """Mean point-wise cross-entropy over all B*N points."""
    return nc.softmax_cross_entropy(logits, np.asarray(labels).reshape(-1))


def with_overrides(config, **changes):
    return replace(config, **changes)
