"""Point clouds, grid normalization, transforms, sampling and synthetic tasks."""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

SYNTHETIC_KINDS = ("z_halves", "quadrants", "two_spheres")
SYNTHETIC_NUM_CLASSES = {"z_halves": 2, "quadrants": 4, "two_spheres": 2}
SPHERE_CENTERS = np.array([[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N points with optional per-point features and integer labels.

    ``num_classes`` is only used to validate ``labels`` when given.
    """

    coords: np.ndarray
    feats: np.ndarray | None = None
    labels: np.ndarray | None = None
    num_classes: int | None = field(default=None, compare=False)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise InvalidInputError(f"coords must be N x 3, got shape {coords.shape}")
        if coords.shape[0] < 1:
            raise InvalidInputError("a point cloud needs at least one point")
        if not np.all(np.isfinite(coords)):
            raise InvalidInputError("coords contain non-finite values")
        object.__setattr__(self, "coords", coords)
        n = coords.shape[0]
        if self.feats is not None:
            feats = np.asarray(self.feats)
            if feats.ndim != 2 or feats.shape[0] != n:
                raise InvalidInputError(f"feats must be {n} x F, got shape {feats.shape}")
            object.__setattr__(self, "feats", feats)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
                raise InvalidInputError(f"labels must be {n} integers")
            labels = labels.astype(np.int64, copy=False)
            if labels.min() < 0:
                raise InvalidInputError("labels must be non-negative")
            if self.num_classes is not None and labels.max() >= self.num_classes:
                raise InvalidInputError(
                    f"label {labels.max()} out of range for {self.num_classes} classes")
            object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.coords.shape[0]

    def take(self, index):
        """Subset (or resample) points by integer index."""
        return PointCloud(
            self.coords[index],
            None if self.feats is None else self.feats[index],
            None if self.labels is None else self.labels[index],
            self.num_classes,
        )


@dataclass(frozen=True)
class GridSpec:
    """Mapping from continuous coordinates to grid-cell coordinates.

    All three axes share one scale (``bbox_extent``) so shapes are not
    distorted between planes. Grid coordinates live in
    ``[margin, resolution - 1 - margin]``.
    """

    resolution: int
    margin: float
    bbox_min: tuple
    bbox_extent: float

    def __post_init__(self):
        if self.resolution < 4:
            raise InvalidInputError(f"resolution must be >= 4, got {self.resolution}")
        if self.margin < 0.5:
            raise InvalidInputError(f"margin must be >= 0.5, got {self.margin}")
        if 2 * self.margin >= self.resolution - 1:
            raise InvalidInputError("margin leaves no room on the grid")
        if not self.bbox_extent > 0:
            raise InvalidInputError("bbox_extent must be positive")
        object.__setattr__(self, "bbox_min", tuple(float(v) for v in self.bbox_min))

    @property
    def span(self):
        """Usable length of the grid in cells."""
        return self.resolution - 1 - 2 * self.margin

    @property
    def scale(self):
        return self.span / self.bbox_extent


@dataclass(frozen=True)
class AffineTransform:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise InvalidInputError(f"transform must be 3 x 3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidInputError("transform has non-finite entries")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls):
        return cls(np.eye(3))


def _coords(cloud):
    return cloud.coords if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def fit_grid_spec(cloud, resolution, margin=0.5):
    """Fit a uniform-scale bounding box to ``cloud``.

    ``cloud`` may be a :class:`PointCloud` or a raw ``N x 3`` array. A cloud
    with zero extent along every axis gets extent 1.
    """
    coords = _coords(cloud)
    if not np.all(np.isfinite(coords)):
        raise InvalidInputError("coords contain non-finite values")
    lo = coords.min(axis=0)
    extent = float((coords.max(axis=0) - lo).max())
    if extent == 0.0:
        extent = 1.0
    return GridSpec(int(resolution), float(margin), tuple(lo), extent)


def normalize_to_grid(cloud, spec):
    """Map coordinates into grid cells, clamping to the margin band.

    Each axis uses ``u = margin + (x - bbox_min) * span / extent``.
    """
    coords = _coords(cloud)
    with np.errstate(over="ignore"):
        u = spec.margin + (coords - np.asarray(spec.bbox_min)) / spec.bbox_extent * spec.span
    return np.clip(u, spec.margin, spec.resolution - 1 - spec.margin)


def unit_normalize(coords):
    """Center on the bounding-box midpoint and scale the largest axis to [-1, 1].

    Works on ``N x 3`` or batched ``B x N x 3`` arrays (per cloud).
    """
    coords = np.asarray(coords, dtype=np.float64)
    lo = coords.min(axis=-2, keepdims=True)
    hi = coords.max(axis=-2, keepdims=True)
    extent = (hi - lo).max(axis=-1, keepdims=True)
    extent = np.where(extent == 0.0, 1.0, extent)
    return (coords - 0.5 * (lo + hi)) * (2.0 / extent)


def apply_transform(cloud, t):
    """Right-multiply coordinates by ``t.matrix`` (row-vector convention)."""
    return PointCloud(cloud.coords @ t.matrix, cloud.feats, cloud.labels, cloud.num_classes)


def sample_fixed_count(cloud, n, seed):
    """Return exactly ``n`` points, without replacement when the cloud is large enough."""
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    rng = np.random.default_rng(seed)
    count = len(cloud)
    if count >= n:
        index = rng.permutation(count)[:n]
    else:
        index = rng.integers(0, count, size=n)
    return cloud.take(index)


def synthetic_labels(kind, coords):
    coords = np.asarray(coords)
    if kind == "z_halves":
        return (coords[:, 2] > 0).astype(np.int64)
    if kind == "quadrants":
        # 0: x>=0,y>=0  1: x<0,y>=0  2: x<0,y<0  3: x>=0,y<0
        neg_x = coords[:, 0] < 0
        neg_y = coords[:, 1] < 0
        return np.where(neg_y, np.where(neg_x, 2, 3), np.where(neg_x, 1, 0)).astype(np.int64)
    if kind == "two_spheres":
        d = np.linalg.norm(coords[:, None, :] - SPHERE_CENTERS[None], axis=-1)
        return np.argmin(d, axis=1).astype(np.int64)
    raise InvalidInputError(f"unknown synthetic task {kind!r}; expected one of {SYNTHETIC_KINDS}")


def make_synthetic_task(kind, n_points, seed):
    """Generate a labelled toy cloud.

    ``z_halves`` and ``quadrants`` fill the cube [-1, 1]^3; ``two_spheres``
    samples two unit balls centred at (+-1, 0, 0).
    """
    if kind not in SYNTHETIC_KINDS:
        raise InvalidInputError(f"unknown synthetic task {kind!r}; expected one of {SYNTHETIC_KINDS}")
    if n_points < 8:
        raise InvalidInputError("n_points must be >= 8")
    rng = np.random.default_rng(seed)
    if kind == "two_spheres":
        which = rng.integers(0, 2, size=n_points)
        direction = rng.standard_normal((n_points, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = rng.random(n_points) ** (1.0 / 3.0)
        coords = SPHERE_CENTERS[which] + direction * radius[:, None]
    else:
        coords = rng.uniform(-1.0, 1.0, size=(n_points, 3))
    return PointCloud(coords, labels=synthetic_labels(kind, coords),
                      num_classes=SYNTHETIC_NUM_CLASSES[kind])
