"""Parallel-beam projector about the z axis and low-dose photon noise.

World coordinates are centred on the volume.  For view angle ``t`` the
detector column axis is ``(cos t, sin t)`` in the x-y plane and rays travel
along ``(-sin t, cos t)``; detector rows follow z.  Rays are sampled at half
the smallest voxel size with trilinear interpolation (bilinear in-plane,
linear in z), and the adjoint scatters the same weights, so the pair is an
exact transpose.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp


@dataclass
class ProjectorGeometry:
    angles: tuple
    vol_dims: tuple
    vol_spacing: tuple = (1.0, 1.0, 1.0)
    det_rows: int | None = None
    det_cols: int | None = None
    row_spacing: float | None = None
    col_spacing: float | None = None

    def __post_init__(self):
        self.angles = tuple(float(a) for a in np.atleast_1d(self.angles))
        if len(self.angles) < 1:
            raise ValueError("need at least one view")
        self.vol_dims = tuple(int(n) for n in self.vol_dims)
        self.vol_spacing = tuple(float(s) for s in self.vol_spacing)
        if len(self.vol_dims) != 3 or min(self.vol_dims) < 1:
            raise ValueError(f"volume dims must be three positive integers, got {self.vol_dims}")
        D, H, W = self.vol_dims
        sz, sy, sx = self.vol_spacing
        if self.row_spacing is None:
            self.row_spacing = sz
        if self.det_rows is None:
            self.det_rows = int(math.ceil(D * sz / self.row_spacing))
        if self.col_spacing is None:
            self.col_spacing = min(sx, sy)
        if self.det_cols is None:
            self.det_cols = int(math.ceil(self.footprint / self.col_spacing))
        if self.det_cols * self.col_spacing < self.footprint - 1e-9:
            raise ValueError(
                f"detector width {self.det_cols * self.col_spacing:g} does not cover the rotated footprint {self.footprint:g}"
            )

    @property
    def footprint(self) -> float:
        _, H, W = self.vol_dims
        _, sy, sx = self.vol_spacing
        return math.hypot(H * sy, W * sx)

    @property
    def sino_dims(self) -> tuple:
        return (len(self.angles), int(self.det_rows), int(self.det_cols))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["angles"] = list(self.angles)
        d["vol_dims"] = list(self.vol_dims)
        d["vol_spacing"] = list(self.vol_spacing)
        return d

    @classmethod
    def from_dict(cls, d) -> "ProjectorGeometry":
        return cls(**d)


def jittered_angles(n_views: int, seed: int = 0) -> np.ndarray:
    """``n_views`` angles in ``[0, pi)``: one uniform draw inside each equal sub-interval."""
    if n_views < 1:
        raise ValueError("need at least one view")
    u = np.random.default_rng(seed).uniform(0.0, 1.0, n_views)
    return (np.arange(n_views) + u) * (math.pi / n_views)


def _inplane_matrix(geom: ProjectorGeometry) -> sp.csr_matrix:
    """Sparse ``(n_angles * cols, H * W)`` bilinear ray-sampling matrix."""
    _, H, W = geom.vol_dims
    _, sy, sx = geom.vol_spacing
    step = 0.5 * min(geom.vol_spacing)
    half = 0.5 * geom.footprint + step
    t = np.arange(-half, half + 0.5 * step, step)
    cols = (np.arange(geom.det_cols) + 0.5 - geom.det_cols / 2.0) * geom.col_spacing
    rows_out, cols_out, vals = [], [], []
    for a, th in enumerate(geom.angles):
        c, s = math.cos(th), math.sin(th)
        X = cols[:, None] * c - t[None, :] * s
        Y = cols[:, None] * s + t[None, :] * c
        fx = X / sx + W / 2.0 - 0.5
        fy = Y / sy + H / 2.0 - 0.5
        x0, y0 = np.floor(fx).astype(np.int64), np.floor(fy).astype(np.int64)
        wx, wy = fx - x0, fy - y0
        ray = np.broadcast_to((a * geom.det_cols + np.arange(geom.det_cols))[:, None], fx.shape)
        for dy, dx, w in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx), (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H) & (w > 0)
            rows_out.append(ray[ok])
            cols_out.append(yi[ok] * W + xi[ok])
            vals.append(w[ok] * step)
    m = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows_out), np.concatenate(cols_out))),
        shape=(len(geom.angles) * geom.det_cols, H * W),
    )
    m.sum_duplicates()
    return m


def _z_matrix(geom: ProjectorGeometry) -> sp.csr_matrix:
    """Linear interpolation ``(rows, D)`` from voxel slices to detector rows."""
    D = geom.vol_dims[0]
    sz = geom.vol_spacing[0]
    z = (np.arange(geom.det_rows) + 0.5 - geom.det_rows / 2.0) * geom.row_spacing
    fz = z / sz + D / 2.0 - 0.5
    z0 = np.floor(fz).astype(np.int64)
    w = fz - z0
    r = np.arange(geom.det_rows)
    ri, ci, vi = [], [], []
    for dz, wz in ((0, 1 - w), (1, w)):
        zi = z0 + dz
        ok = (zi >= 0) & (zi < D) & (wz > 0)
        ri.append(r[ok])
        ci.append(zi[ok])
        vi.append(wz[ok])
    return sp.csr_matrix((np.concatenate(vi), (np.concatenate(ri), np.concatenate(ci))), shape=(geom.det_rows, D))


class ParallelBeamProjector:
    """:class:`~foj3d.inverse.LinearOperator` for a :class:`ProjectorGeometry`."""

    def __init__(self, geom: ProjectorGeometry):
        self.geom = geom
        self.in_dims = geom.vol_dims
        self.out_dims = geom.sino_dims
        self._P = _inplane_matrix(geom)
        self._PT = self._P.T.tocsr()
        self._Z = _z_matrix(geom)
        self._ZT = self._Z.T.tocsr()

    def forward(self, x) -> np.ndarray:
        x = np.asarray(getattr(x, "data", x), dtype=np.float64)
        if x.shape != self.in_dims:
            raise ValueError(f"volume dims {x.shape} do not match geometry {self.in_dims}")
        D, H, W = self.in_dims
        A, R, C = self.out_dims
        inplane = self._P @ x.reshape(D, H * W).T  # (A*C, D)
        sino = (self._Z @ inplane.T).T  # (A*C, R)
        return np.ascontiguousarray(sino.reshape(A, C, R).transpose(0, 2, 1))

    def adjoint(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != self.out_dims:
            raise ValueError(f"sinogram dims {y.shape} do not match geometry {self.out_dims}")
        D, H, W = self.in_dims
        A, R, C = self.out_dims
        per_ray = y.transpose(0, 2, 1).reshape(A * C, R)
        inplane = (self._ZT @ per_ray.T).T  # (A*C, D)
        return np.ascontiguousarray((self._PT @ inplane).T.reshape(D, H, W))

    def matrix(self) -> np.ndarray:
        """Dense system matrix; only for small test problems."""
        n = int(np.prod(self.in_dims))
        cols = [self.forward(e.reshape(self.in_dims)).ravel() for e in np.eye(n)]
        return np.stack(cols, axis=1)


def project(geom: ProjectorGeometry, x) -> np.ndarray:
    return ParallelBeamProjector(geom).forward(x)


def backproject(geom: ProjectorGeometry, sino) -> np.ndarray:
    return ParallelBeamProjector(geom).adjoint(sino)


@dataclass
class PhotonNoiseModel:
    photon_count: float
    seed: int = 0

    def __post_init__(self):
        if not self.photon_count > 0:
            raise ValueError("photon_count must be positive")


def simulate_low_dose(sino_clean, model: PhotonNoiseModel) -> np.ndarray:
    """Transmission noise: ``counts ~ Poisson(n0 exp(-p))``, ``p' = -ln(max(counts, 1) / n0)``."""
    p = np.asarray(sino_clean, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("clean sinogram must be non-negative")
    rng = np.random.default_rng(model.seed)
    counts = rng.poisson(model.photon_count * np.exp(-p))
    return -np.log(np.maximum(counts, 1) / model.photon_count)


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_sinogram(path, sino, geom: ProjectorGeometry, **meta) -> None:
    path = Path(path)
    sino = np.asarray(sino, dtype=np.float64)
    if sino.shape != geom.sino_dims:
        raise ValueError(f"sinogram dims {sino.shape} do not match geometry {geom.sino_dims}")
    path.parent.mkdir(parents=True, exist_ok=True)
    sino.astype("<f4").tofile(path)
    header = {"dims": list(sino.shape), "channels": 1, "kind": "sinogram", "geometry": geom.to_dict()}
    header.update(meta)
    _sidecar(path).write_text(json.dumps(header, indent=2, sort_keys=True))


def load_sinogram(path):
    """Returns ``(sinogram, geometry, header)``."""
    path = Path(path)
    side = _sidecar(path)
    if not path.exists():
        raise FileNotFoundError(f"sinogram file not found: {path}")
    if not side.exists():
        raise FileNotFoundError(f"sinogram sidecar not found: {side}")
    header = json.loads(side.read_text())
    if "geometry" not in header:
        raise ValueError(f"{side}: missing projector geometry")
    geom = ProjectorGeometry.from_dict(header["geometry"])
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != int(np.prod(geom.sino_dims)):
        raise ValueError(f"{path}: expected {int(np.prod(geom.sino_dims))} floats, found {raw.size}")
    return raw.reshape(geom.sino_dims).astype(np.float64), geom, header
