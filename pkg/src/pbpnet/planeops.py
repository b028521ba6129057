"""Bilinear scatter of point features onto a plane grid and gather back.

Both directions use the tent kernel ``g(N, n) = max(0, 1 - |N - n|)`` on each
axis, so every point touches at most the four grid nodes around it. Gather is
the exact transpose of scatter, which is what makes the pair differentiable
end to end: the feature VJP of one is the forward pass of the other.

The array-level functions (:func:`splat`, :func:`sample`,
:func:`coord_grad`) accept an optional leading batch axis: coordinates of
shape ``(N, 2)`` or ``(B, N, 2)`` and maps of shape ``(R, R, C)`` or
``(B, R, R, C)``. Grid index ``[i, j]`` corresponds to the point's first and
second plane coordinate respectively.
"""

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

MODES = ("ordered", "sorted", "parallel")


class PlaneId(enum.Enum):
    XY = (0, 1)
    YZ = (1, 2)
    ZX = (2, 0)

    @property
    def axes(self):
        return self.value

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().upper()
        if key == "XZ":
            key = "ZX"
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown plane {name!r}; expected XY, YZ or ZX") from None


@dataclass
class FeatureMap:
    data: np.ndarray
    plane: PlaneId = PlaneId.XY

    def __post_init__(self):
        if self.data.ndim < 3 or self.data.shape[-1] < 1:
            raise ValueError(f"feature map must be R x R x C, got {self.data.shape}")
        if self.data.shape[-2] != self.data.shape[-3]:
            raise ValueError(f"feature map must be square, got {self.data.shape}")

    @property
    def resolution(self):
        return self.data.shape[-2]


def select_plane_coords(grid_coords, plane):
    """Pick the ordered axis pair for ``plane`` from ``(..., 3)`` grid coordinates."""
    a, b = PlaneId.parse(plane).axes
    return np.stack([grid_coords[..., a], grid_coords[..., b]], axis=-1)


def default_threads():
    try:
        return max(1, int(os.environ.get("PBP_THREADS", "")))
    except ValueError:
        return os.cpu_count() or 1


# -- kernel geometry ---------------------------------------------------------

def _batched(coords):
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 2:
        return coords[None], True
    if coords.ndim != 3 or coords.shape[-1] != 2:
        raise ValueError(f"coordinates must be (N, 2) or (B, N, 2), got {coords.shape}")
    return coords, False


def _corners(coords, resolution):
    """Flat node indices and weights of the four kernel taps.

    Returns ``index`` (B, N, 4) into a flattened ``B*R*R`` grid, ``weight``
    (B, N, 4) and the fractional offsets ``frac`` (B, N, 2). Taps are ordered
    (i0,j0), (i0,j1), (i1,j0), (i1,j1).
    """
    r = resolution
    if not np.all(np.isfinite(coords)):
        raise ContractError("grid coordinates contain non-finite values")
    if coords.size and (coords.min() < 0.0 or coords.max() > r - 1):
        raise ContractError(
            f"grid coordinates must lie in [0, {r - 1}], got range "
            f"[{coords.min():.6g}, {coords.max():.6g}]")
    base = np.minimum(np.floor(coords), r - 2).astype(np.int64)
    frac = coords - base
    fu, fv = frac[..., 0], frac[..., 1]
    i0, j0 = base[..., 0], base[..., 1]
    batch = np.arange(coords.shape[0]).reshape(-1, 1) * (r * r)
    origin = batch + i0 * r + j0
    index = np.stack([origin, origin + 1, origin + r, origin + r + 1], axis=-1)
    weight = np.stack([(1 - fu) * (1 - fv), (1 - fu) * fv, fu * (1 - fv), fu * fv], axis=-1)
    return index, weight, frac


def _accumulate(index, values, size, mode, threads=None):
    """Sum ``values`` (M, C) into ``size`` bins per channel.

    ``ordered`` adds in the given (point index) order; ``sorted`` adds each
    bin's contributions in ascending value order so the result does not
    depend on point order at all; ``parallel`` reduces per-chunk partial
    maps in chunk order.
    """
    channels = values.shape[1]
    if mode == "ordered":
        out = np.empty((size, channels), dtype=np.float64)
        for c in range(channels):
            out[:, c] = np.bincount(index, weights=values[:, c], minlength=size)
        return out
    if mode == "sorted":
        out = np.empty((size, channels), dtype=np.float64)
        for c in range(channels):
            col = values[:, c]
            by_value = np.argsort(col, kind="stable")
            order = by_value[np.argsort(index[by_value], kind="stable")]
            out[:, c] = np.bincount(index[order], weights=col[order], minlength=size)
        return out
    if mode == "parallel":
        threads = threads or default_threads()
        chunks = np.array_split(np.arange(index.shape[0]), max(1, threads))

        def partial(rows):
            return _accumulate(index[rows], values[rows], size, "ordered")

        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(partial, chunks))
        out = parts[0]
        for part in parts[1:]:
            out = out + part
        return out
    raise ValueError(f"unknown accumulation mode {mode!r}; expected one of {MODES}")


# -- array-level kernels ------------------------------------------------------

def splat(coords, feats, resolution, mode="ordered"):
    """Scatter ``feats`` at ``coords`` onto an ``R x R`` grid, summing overlaps."""
    coords, squeeze = _batched(coords)
    feats = np.asarray(feats)
    dtype = feats.dtype if np.issubdtype(feats.dtype, np.floating) else np.float64
    feats = feats[None] if squeeze else feats
    b, n, _ = coords.shape
    if feats.shape[:2] != (b, n) or feats.ndim != 3:
        raise ValueError(f"feats shape {feats.shape} does not match coordinates {coords.shape}")
    c = feats.shape[2]
    index, weight, _ = _corners(coords, resolution)
    contrib = weight[..., None] * feats[:, :, None, :].astype(np.float64)
    grid = _accumulate(index.reshape(-1), contrib.reshape(-1, c), b * resolution * resolution, mode)
    grid = grid.reshape(b, resolution, resolution, c).astype(dtype, copy=False)
    return grid[0] if squeeze else grid


def _taps(grid, index):
    b, r, _, c = grid.shape
    flat = grid.reshape(b * r * r, c)
    return [flat[index[..., k]] for k in range(4)]


def _as_batched_grid(grid, squeeze):
    grid = np.asarray(grid)
    return grid[None] if squeeze else grid


def sample(grid, coords):
    """Gather per-point features from ``grid`` by bilinear interpolation."""
    coords, squeeze = _batched(coords)
    grid = _as_batched_grid(grid, squeeze)
    if grid.ndim != 4 or grid.shape[0] != coords.shape[0] or grid.shape[1] != grid.shape[2]:
        raise ValueError(f"grid shape {grid.shape} does not match coordinates {coords.shape}")
    index, weight, _ = _corners(coords, grid.shape[1])
    t0, t1, t2, t3 = _taps(grid, index)
    w = weight[..., None]
    out = w[:, :, 0] * t0 + w[:, :, 1] * t1 + w[:, :, 2] * t2 + w[:, :, 3] * t3
    out = out.astype(grid.dtype, copy=False)
    return out[0] if squeeze else out


def coord_grad(grid, coords, point_values):
    """Gradient of ``sum(point_values * sample(grid, coords))`` w.r.t. ``coords``.

    The tent kernel's derivative is taken as 0 wherever a coordinate sits
    exactly on a grid node (the kinks), and as +-1 elsewhere. Because scatter
    and gather share the same bilinear form, this single expression gives the
    coordinate VJP of both.
    """
    coords, squeeze = _batched(coords)
    grid = _as_batched_grid(grid, squeeze)
    point_values = np.asarray(point_values, dtype=np.float64)
    point_values = point_values[None] if squeeze else point_values
    index, _, frac = _corners(coords, grid.shape[1])
    t00, t01, t10, t11 = _taps(grid, index)
    fu = frac[..., 0:1]
    fv = frac[..., 1:2]
    du = (1 - fv) * (t10 - t00) + fv * (t11 - t01)
    dv = (1 - fu) * (t01 - t00) + fu * (t11 - t10)
    live_u = (frac[..., 0] != 0.0) & (frac[..., 0] != 1.0)
    live_v = (frac[..., 1] != 0.0) & (frac[..., 1] != 1.0)
    gu = np.where(live_u, np.sum(point_values * du, axis=-1), 0.0)
    gv = np.where(live_v, np.sum(point_values * dv, axis=-1), 0.0)
    out = np.stack([gu, gv], axis=-1)
    return out[0] if squeeze else out


# -- spec-level operations ----------------------------------------------------

def scatter_bilinear(coords2d, feats, resolution, plane=PlaneId.XY, mode="ordered"):
    """Project point features onto a plane grid.

    Parameters
    ----------
    coords2d : array (N, 2)
        Grid coordinates in ``[0, resolution - 1]``.
    feats : array (N, C)
    resolution : int
    plane : PlaneId
        Only recorded on the result.
    mode : {"ordered", "sorted", "parallel"}
        Accumulation strategy; see :func:`_accumulate`.

    Returns
    -------
    FeatureMap with ``data`` of shape (R, R, C).
    """
    return FeatureMap(splat(coords2d, feats, resolution, mode), PlaneId.parse(plane))


def gather_bilinear(fmap, coords2d):
    """Read per-point features from ``fmap`` (a FeatureMap or raw array)."""
    data = fmap.data if isinstance(fmap, FeatureMap) else fmap
    return sample(data, coords2d)


def scatter_vjp(coords2d, feats, upstream):
    """VJP of :func:`scatter_bilinear`; returns ``(d_feats, d_coords)``."""
    upstream = np.asarray(upstream)
    d_feats = sample(upstream, coords2d)
    d_coords = coord_grad(upstream, coords2d, feats)
    return d_feats, d_coords


def gather_vjp(fmap, coords2d, upstream, mode="ordered"):
    """VJP of :func:`gather_bilinear`; returns ``(d_map, d_coords)``."""
    data = fmap.data if isinstance(fmap, FeatureMap) else np.asarray(fmap)
    upstream = np.asarray(upstream)
    d_map = splat(coords2d, upstream, data.shape[-2], mode)
    d_coords = coord_grad(data, coords2d, upstream)
    return d_map, d_coords
