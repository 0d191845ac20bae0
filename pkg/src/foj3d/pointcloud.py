"""Point-cloud denoising through a voxel grid, plus noise synthesis and Chamfer-L2."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .grid import Volume


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) as (x, y, z)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            raise ValueError("empty point cloud has no bounds")
        return self.points.min(axis=0), self.points.max(axis=0)


@dataclass
class VoxelTransform:
    """Maps voxel index ``(z, y, x)`` to world ``(x, y, z)`` voxel centres."""

    origin: np.ndarray  # world (x, y, z) of the grid corner
    voxel_size: float
    dims: tuple

    def centers(self, zyx) -> np.ndarray:
        zyx = np.asarray(zyx, dtype=np.float64).reshape(-1, 3)
        return self.origin + (zyx[:, ::-1] + 0.5) * self.voxel_size

    def index_of(self, xyz) -> np.ndarray:
        """Containing voxel ``(z, y, x)`` of each world point."""
        idx = np.floor((np.asarray(xyz, dtype=np.float64) - self.origin) / self.voxel_size).astype(np.int64)
        idx = np.clip(idx, 0, np.array(self.dims[::-1]) - 1)
        return idx[:, ::-1]

    def to_dict(self) -> dict:
        return {"origin": self.origin.tolist(), "voxel_size": float(self.voxel_size), "dims": list(self.dims)}


def voxel_transform(pc: PointCloud, grid_dim: int = 256) -> VoxelTransform:
    """Cubic grid of ``grid_dim^3`` voxels over the bounding box plus a one-voxel margin."""
    if len(pc) == 0:
        raise ValueError("cannot voxelize an empty point cloud")
    if grid_dim < 4:
        raise ValueError("grid_dim must be at least 4")
    lo, hi = pc.bounds
    extent = float(np.max(hi - lo))
    # centred points then fall in voxels 1 .. grid_dim - 2 on every axis
    size = extent / (grid_dim - 3) if extent > 0 else 1.0
    centre = 0.5 * (lo + hi)
    origin = centre - 0.5 * grid_dim * size
    return VoxelTransform(origin, size, (grid_dim,) * 3)


def voxel_counts(pc: PointCloud, transform: VoxelTransform) -> np.ndarray:
    idx = transform.index_of(pc.points)
    D, H, W = transform.dims
    flat = (idx[:, 0] * H + idx[:, 1]) * W + idx[:, 2]
    return np.bincount(flat, minlength=D * H * W).reshape(transform.dims).astype(np.float64)


def voxelize(pc: PointCloud, grid_dim: int = 256, transform: VoxelTransform | None = None):
    """Point counts per voxel divided by the maximum count; returns ``(Volume, transform)``."""
    if len(pc) == 0:
        raise ValueError("cannot voxelize an empty point cloud")
    transform = transform or voxel_transform(pc, grid_dim)
    counts = voxel_counts(pc, transform)
    s = transform.voxel_size
    return Volume(counts / counts.max(), (s, s, s)), transform


@dataclass
class TopK:
    cloud: PointCloud
    shortfall: int


def devoxelize_topk(vol, k: int = 100000, transform: VoxelTransform | None = None) -> TopK:
    """World centres of the ``k`` largest voxels, ties in ``(z, y, x)`` order.

    Only positive voxels are emitted; ``shortfall`` counts the missing ones.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    data = np.asarray(getattr(vol, "data", vol), dtype=np.float64)
    flat = data.ravel()
    positive = np.flatnonzero(flat > 0)
    take = min(k, len(positive))
    # stable sort on the negated values keeps lexicographic order among ties
    order = positive[np.argsort(-flat[positive], kind="stable")[:take]]
    zyx = np.stack(np.unravel_index(order, data.shape), axis=1)
    if transform is None:
        transform = VoxelTransform(np.zeros(3), 1.0, data.shape)
    return TopK(PointCloud(transform.centers(zyx)), k - take)


def bbox_diagonal(pc: PointCloud) -> float:
    lo, hi = pc.bounds
    return float(np.linalg.norm(hi - lo))


def outlier_count(n: int, ratio: float) -> int:
    """Points to append so that they form ``ratio`` of the result."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError("outlier ratio must lie in [0, 1)")
    return int(math.ceil(ratio * n / (1.0 - ratio) - 1e-9))


def add_outlier_noise(pc: PointCloud, ratio: float, sigma_surface: float | None = None, seed: int = 0) -> PointCloud:
    """Append near-surface outliers: random clean points displaced by isotropic Gaussian noise."""
    m = outlier_count(len(pc), ratio)
    if m == 0:
        return PointCloud(pc.points.copy())
    if sigma_surface is None:
        sigma_surface = 0.05 * bbox_diagonal(pc)
    rng = np.random.default_rng(seed)
    src = pc.points[rng.integers(0, len(pc), m)]
    return PointCloud(np.vstack([pc.points, src + sigma_surface * rng.standard_normal((m, 3))]))


def add_spread_noise(pc: PointCloud, count: int, pad: float = 10.0, seed: int = 0) -> PointCloud:
    """Append ``count`` points uniform in the bounding box padded by ``pad`` on every side."""
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return PointCloud(pc.points.copy())
    lo, hi = pc.bounds
    rng = np.random.default_rng(seed)
    extra = rng.uniform(lo - pad, hi + pad, (count, 3))
    return PointCloud(np.vstack([pc.points, extra]))


def chamfer_l2(a: PointCloud, b: PointCloud) -> float:
    """Symmetric mean squared nearest-neighbour distance."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty clouds")
    da, _ = cKDTree(b.points).query(a.points)
    db, _ = cKDTree(a.points).query(b.points)
    return float(np.mean(da**2) + np.mean(db**2))


def read_xyz(path) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"point cloud file not found: {path}")
    with warnings.catch_warnings():
        # an empty file is a valid empty cloud
        warnings.simplefilter("ignore", UserWarning)
        pts = np.loadtxt(path, dtype=np.float64, ndmin=2, comments="#")
    if pts.size == 0:
        return PointCloud(np.zeros((0, 3)))
    if pts.shape[1] < 3:
        raise ValueError(f"{path}: expected at least three columns per line")
    return PointCloud(pts[:, :3])


def write_xyz(path, pc: PointCloud) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, pc.points, fmt="%.9g")


def synthetic_surface(n: int = 50000, seed: int = 0, scale: float = 20.0) -> PointCloud:
    """Dense samples on a bumpy closed surface (a lobed sphere) of diameter about ``scale``."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    theta = np.arccos(v[:, 2])
    phi = np.arctan2(v[:, 1], v[:, 0])
    r = 1.0 + 0.25 * np.sin(3 * phi) * np.sin(theta) ** 2 + 0.15 * np.cos(2 * theta)
    return PointCloud(0.5 * scale * r[:, None] * v / 1.25)
