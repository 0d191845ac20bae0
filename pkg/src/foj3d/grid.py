"""Volume storage, overlapping patch grids and overlap-averaged reassembly.

Arrays are indexed ``(z, y, x)`` everywhere, including on disk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


@dataclass
class Volume:
    """Dense scalar field with voxel spacing ``(sz, sy, sx)``."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def channels(self) -> int:
        return 1


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_volume(path, vol: Volume, **meta) -> None:
    """Write ``path`` (little-endian float32, z-major) and ``path.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vol.data.astype("<f4").tofile(path)
    header = {"dims": list(vol.dims), "spacing": list(vol.spacing), "channels": 1}
    header.update(vol.extra)
    header.update(meta)
    _sidecar(path).write_text(json.dumps(header, indent=2, sort_keys=True))


def load_volume(path) -> Volume:
    path = Path(path)
    side = _sidecar(path)
    if not path.exists():
        raise FileNotFoundError(f"volume file not found: {path}")
    if not side.exists():
        raise FileNotFoundError(f"volume sidecar not found: {side}")
    header = json.loads(side.read_text())
    dims = tuple(int(n) for n in header["dims"])
    if int(header.get("channels", 1)) != 1:
        raise ValueError("only single-channel volumes are supported")
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != int(np.prod(dims)):
        raise ValueError(f"{path}: expected {int(np.prod(dims))} floats for dims {dims}, found {raw.size}")
    extra = {k: v for k, v in header.items() if k not in ("dims", "spacing", "channels")}
    return Volume(raw.reshape(dims).astype(np.float64), tuple(header.get("spacing", (1, 1, 1))), extra)


def _axis_origins(n: int, size: int, stride: int) -> list[int]:
    origins = list(range(0, n - size + 1, stride))
    last = max(n - size, 0)
    if origins[-1] != last:
        origins.append(last)
    return origins


class PatchGrid:
    """Overlapping ``R^3`` patches with stride ``s`` covering a volume.

    The last origin along each axis is clamped so the final patch ends flush
    with the boundary; every patch is a full cube.
    """

    def __init__(self, dims, patch_size: int, stride: int):
        self.dims = tuple(int(n) for n in dims)
        self.patch_size = int(patch_size)
        self.stride = int(stride)
        axes = [_axis_origins(n, self.patch_size, self.stride) for n in self.dims]
        oz, oy, ox = np.meshgrid(*axes, indexing="ij")
        self.origins = np.stack([oz.ravel(), oy.ravel(), ox.ravel()], axis=1).astype(np.int64)
        self.axis_origins = axes

    def __len__(self) -> int:
        return len(self.origins)

    @cached_property
    def _local_offsets(self) -> np.ndarray:
        R = self.patch_size
        _, H, W = self.dims
        z, y, x = np.meshgrid(np.arange(R), np.arange(R), np.arange(R), indexing="ij")
        return ((z * H + y) * W + x).ravel()

    def flat_indices(self, which=None) -> np.ndarray:
        """Flat volume indices of every voxel of the selected patches, shape ``(n, R^3)``."""
        _, H, W = self.dims
        origins = self.origins if which is None else self.origins[which]
        base = (origins[:, 0] * H + origins[:, 1]) * W + origins[:, 2]
        return base[:, None] + self._local_offsets[None, :]

    @cached_property
    def overlap_count(self) -> np.ndarray:
        """``|N_v|``: number of patches containing each voxel."""
        counts = np.ones(len(self))
        return self.scatter_sum(np.broadcast_to(counts[:, None], (len(self), self.patch_size**3))).astype(np.int64)

    def scatter_sum(self, values, which=None) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        idx = self.flat_indices(which)
        total = np.bincount(idx.ravel(), weights=values.reshape(idx.shape).ravel(), minlength=int(np.prod(self.dims)))
        return total.reshape(self.dims)


def build_patch_grid(dims, patch_size: int, stride: int) -> PatchGrid:
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3:
        raise ValueError("dims must have three entries (D, H, W)")
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if patch_size < 1:
        raise ValueError(f"patch size must be positive, got {patch_size}")
    if stride > patch_size:
        raise ValueError(f"stride {stride} exceeds patch size {patch_size}; voxels would be left uncovered")
    if patch_size > min(dims):
        raise ValueError(f"patch larger than volume: patch {patch_size} vs dims {dims}")
    return PatchGrid(dims, patch_size, stride)


def _array(vol) -> np.ndarray:
    return vol.data if isinstance(vol, Volume) else np.asarray(vol, dtype=np.float64)


def extract_patches(vol, grid: PatchGrid, which=None) -> np.ndarray:
    """All (or selected) patches as a copy of shape ``(n, R, R, R)``."""
    data = _array(vol)
    if data.shape != grid.dims:
        raise ValueError(f"volume dims {data.shape} do not match grid dims {grid.dims}")
    R = grid.patch_size
    return data.ravel()[grid.flat_indices(which)].reshape(-1, R, R, R)


def extract_patch(vol, grid: PatchGrid, i: int) -> np.ndarray:
    if not 0 <= i < len(grid):
        raise IndexError(f"patch index {i} out of range for {len(grid)} patches")
    return extract_patches(vol, grid, np.array([i]))[0]


def aggregate_patches(patch_values, grid: PatchGrid) -> np.ndarray:
    """Average overlapping patch fields: ``out(v) = mean over patches containing v``."""
    patch_values = np.asarray(patch_values, dtype=np.float64)
    if patch_values.shape[0] != len(grid):
        raise ValueError(f"expected {len(grid)} patch fields, got {patch_values.shape[0]}")
    return grid.scatter_sum(patch_values) / grid.overlap_count


class PatchAccumulator:
    """Batch-wise scatter-add into a volume; result is independent of how work was threaded
    as long as batches are added in the same order."""

    def __init__(self, grid: PatchGrid):
        self.grid = grid
        self.total = np.zeros(grid.dims)

    def add(self, which, values) -> None:
        self.total += self.grid.scatter_sum(values, which)

    def mean(self) -> np.ndarray:
        return self.total / self.grid.overlap_count
