"""Junction geometry for a patch: three planes through a shared vertex.

Patch-local coordinates are in voxel units with voxel centres at ``i + 0.5``
along each axis, so the patch centre is ``(R/2, R/2, R/2)``.  Points and the
vertex are ``(x, y, z)`` triples; lattices are flattened in ``(z, y, x)``
order to match :mod:`foj3d.grid`.

All functions broadcast over leading batch axes of ``vertex`` (``(..., 3)``)
and ``angles`` (``(..., 3, 2)``, one ``(theta, phi)`` pair per plane).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

NUM_PLANES = 3
MAX_REGIONS = 8

# Region sign patterns, ``True`` means the positive side of a plane.  The first
# three are the single-positive patterns; the remainder extend deterministically.
REGION_PATTERNS = np.array(
    [
        (1, 0, 0),
        (0, 1, 0),
        (0, 0, 1),
        (1, 1, 0),
        (1, 0, 1),
        (0, 1, 1),
        (1, 1, 1),
        (0, 0, 0),
    ],
    dtype=bool,
)


@dataclass
class JunctionParams:
    """Vertex ``(..., 3)`` and plane angles ``(..., 3, 2)`` for one or many patches."""

    vertex: np.ndarray
    angles: np.ndarray
    num_regions: int = 3

    def __post_init__(self):
        self.vertex = np.asarray(self.vertex, dtype=np.float64)
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.vertex.shape[-1] != 3 or self.angles.shape[-2:] != (NUM_PLANES, 2):
            raise ValueError("vertex must end in (3,) and angles in (3, 2)")
        check_num_regions(self.num_regions)

    def as_vector(self) -> np.ndarray:
        """Pack into ``(..., 9)``: ``x0, y0, z0, theta1, phi1, theta2, phi2, theta3, phi3``."""
        flat = self.angles.reshape(self.angles.shape[:-2] + (6,))
        return np.concatenate([self.vertex, flat], axis=-1)

    @classmethod
    def from_vector(cls, vec, num_regions: int = 3) -> "JunctionParams":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[..., :3], vec[..., 3:].reshape(vec.shape[:-1] + (3, 2)), num_regions)


def check_num_regions(num_regions: int) -> None:
    if not 2 <= int(num_regions) <= MAX_REGIONS:
        raise ValueError(f"num_regions must be in 2..{MAX_REGIONS}, got {num_regions}")


def region_patterns(num_regions: int) -> np.ndarray:
    check_num_regions(num_regions)
    return REGION_PATTERNS[:num_regions]


@lru_cache(maxsize=16)
def _patch_coords(R: int) -> np.ndarray:
    z, y, x = np.meshgrid(np.arange(R), np.arange(R), np.arange(R), indexing="ij")
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1) + 0.5
    pts.flags.writeable = False
    return pts


def patch_coords(R: int) -> np.ndarray:
    """Voxel-centre coordinates ``(R^3, 3)`` as ``(x, y, z)``."""
    return _patch_coords(int(R))


def patch_center(R: int) -> np.ndarray:
    return np.full(3, R / 2.0)


def plane_normal(theta, phi) -> np.ndarray:
    """Unit normal ``(sin t cos p, sin t sin p, cos t)`` in ``(x, y, z)``."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta) * np.ones_like(phi)], axis=-1)


def plane_normal_derivatives(theta, phi):
    """``(dn/dtheta, dn/dphi)``, each shaped like :func:`plane_normal`."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    dtheta = np.stack([ct * cp, ct * sp, -st * np.ones_like(phi)], axis=-1)
    dphi = np.stack([-st * sp, st * cp, np.zeros_like(st * cp)], axis=-1)
    return dtheta, dphi


def normals(angles) -> np.ndarray:
    """Plane normals ``(..., 3, 3)`` (plane, xyz) from angles ``(..., 3, 2)``."""
    angles = np.asarray(angles, dtype=np.float64)
    return plane_normal(angles[..., 0], angles[..., 1])


def signed_distances(vertex, angles, coords) -> np.ndarray:
    """``d_l(v) = <v - vertex, n_l>`` for all planes, shape ``(..., 3, n_points)``."""
    vertex = np.asarray(vertex, dtype=np.float64)
    n = normals(angles)
    coords = np.asarray(coords, dtype=np.float64)
    # <v, n> - <vertex, n> keeps the batch broadcast cheap
    return np.einsum("pk,...lk->...lp", coords, n) - np.einsum("...k,...lk->...l", vertex, n)[..., None]


def signed_distance(params: JunctionParams, plane: int, point) -> np.ndarray:
    """Signed distance of ``point`` to plane ``plane`` (0-based)."""
    if not 0 <= plane < NUM_PLANES:
        raise ValueError(f"plane index must be in 0..2, got {plane}")
    n = plane_normal(params.angles[..., plane, 0], params.angles[..., plane, 1])
    return np.sum((np.asarray(point, dtype=np.float64) - params.vertex) * n, axis=-1)


def _check_positive(name, value):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")


def heaviside(d, eta: float):
    """Regularised step ``H(d) = 1/2 + arctan(d / eta) / pi``."""
    _check_positive("eta", eta)
    return 0.5 + np.arctan(np.asarray(d, dtype=np.float64) / eta) / np.pi


def heaviside_derivative(d, eta: float):
    _check_positive("eta", eta)
    d = np.asarray(d, dtype=np.float64)
    return (eta / np.pi) / (d * d + eta * eta)


def boundary_from_distances(d, delta: float):
    """Soft boundary ``delta^2 / (min_l d_l^2 + delta^2)`` from distances ``(..., 3, n)``."""
    _check_positive("delta", delta)
    m2 = np.min(d * d, axis=-2)
    return delta * delta / (m2 + delta * delta)


def _region_products(H, Hneg, patterns):
    """Products of per-plane factors for each pattern: ``(..., M, n)``."""
    out = []
    for pat in patterns:
        f = [H[..., l, :] if pat[l] else Hneg[..., l, :] for l in range(NUM_PLANES)]
        out.append(f[0] * f[1] * f[2])
    return np.stack(out, axis=-2)


def indicators_from_distances(d, eta: float, num_regions: int) -> np.ndarray:
    patterns = region_patterns(num_regions)
    return _region_products(heaviside(d, eta), heaviside(-d, eta), patterns)


def region_indicators(params: JunctionParams, coords, eta: float) -> np.ndarray:
    """Soft region memberships ``u^(j)``, shape ``(..., M, n_points)``."""
    d = signed_distances(params.vertex, params.angles, coords)
    return indicators_from_distances(d, eta, params.num_regions)


def boundary_map(params: JunctionParams, coords, delta: float) -> np.ndarray:
    """Soft boundary strength in ``(0, 1]``, peaking at 1 on any plane."""
    d = signed_distances(params.vertex, params.angles, coords)
    return boundary_from_distances(d, delta)


def indicator_distance_derivatives(d, eta: float, num_regions: int):
    """Memberships ``u`` ``(..., M, n)`` and ``du/dd_l`` ``(..., M, 3, n)``."""
    patterns = region_patterns(num_regions)
    H, Hneg, Hp = heaviside(d, eta), heaviside(-d, eta), heaviside_derivative(d, eta)
    u, du = [], []
    for pat in patterns:
        f = [H[..., l, :] if pat[l] else Hneg[..., l, :] for l in range(NUM_PLANES)]
        u.append(f[0] * f[1] * f[2])
        per_plane = []
        for l in range(NUM_PLANES):
            others = f[(l + 1) % 3] * f[(l + 2) % 3]
            per_plane.append((Hp[..., l, :] if pat[l] else -Hp[..., l, :]) * others)
        du.append(np.stack(per_plane, axis=-2))
    return np.stack(u, axis=-2), np.stack(du, axis=-3)


def distance_parameter_jacobian(vertex, angles, coords) -> np.ndarray:
    """``dd_l/dgamma`` of shape ``(..., 3, 9, n)`` in :meth:`JunctionParams.as_vector` order."""
    vertex = np.asarray(vertex, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    n = normals(angles)
    dth, dph = plane_normal_derivatives(angles[..., 0], angles[..., 1])
    rel = coords - vertex[..., None, :]  # (..., n, 3)
    batch = vertex.shape[:-1]
    npts = coords.shape[0]
    jac = np.zeros(batch + (NUM_PLANES, 9, npts))
    for l in range(NUM_PLANES):
        jac[..., l, 0:3, :] = -np.broadcast_to(n[..., l, :, None], batch + (3, npts))
        jac[..., l, 3 + 2 * l, :] = np.einsum("...pk,...k->...p", rel, dth[..., l, :])
        jac[..., l, 4 + 2 * l, :] = np.einsum("...pk,...k->...p", rel, dph[..., l, :])
    return jac


def indicator_gradients(params: JunctionParams, coords, eta: float) -> np.ndarray:
    """Exact ``du^(j)/dgamma`` of shape ``(..., M, 9, n_points)``."""
    d = signed_distances(params.vertex, params.angles, coords)
    _, du_dd = indicator_distance_derivatives(d, eta, params.num_regions)
    jac = distance_parameter_jacobian(params.vertex, params.angles, coords)
    return np.einsum("...mlp,...lqp->...mqp", du_dd, jac)

