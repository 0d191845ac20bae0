"""Deterministic synthetic volumes used for testing and the CLI."""

from __future__ import annotations

import numpy as np

KINDS = ("halfspace", "wedge3", "cube", "shepp3d-lite")


def _centred_coords(dims):
    """Voxel-centre coordinates in ``[-1, 1]`` as ``(z, y, x)`` arrays."""
    axes = [(np.arange(n) + 0.5) / n * 2.0 - 1.0 for n in dims]
    return np.meshgrid(*axes, indexing="ij")


HALFSPACE_NORMAL = (3.0, 2.0, 1.0)  # (x, y, z), unnormalised


def halfspace(dims, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """Two constant half-spaces split by an oblique plane near the centre.

    With an integer normal, the projections of voxel centres fall on a 1/|n|
    lattice; the threshold sits half-way between two lattice levels so no
    voxel centre lies closer than ``0.5/|n|`` to the boundary.
    """
    dims = tuple(int(n) for n in dims)
    z, y, x = np.meshgrid(*[np.arange(n) + 0.5 for n in dims], indexing="ij")
    a, b, c = HALFSPACE_NORMAL
    s = a * x + b * y + c * z
    thr = np.floor(a * dims[2] / 2 + b * dims[1] / 2 + c * dims[0] / 2) + 0.5
    return np.where(s > thr, high, low).astype(np.float64)


def wedge3(dims) -> np.ndarray:
    """Three-plane junction: three nonzero wedges and a zero background."""
    z, y, x = _centred_coords(dims)
    a = 0.9 * x + 0.3 * y + 0.2 * z + 0.05
    b = -0.2 * x + 0.95 * y - 0.1 * z - 0.1
    c = 0.1 * x - 0.2 * y + 0.97 * z + 0.02
    out = np.zeros(tuple(int(n) for n in dims))
    out[(a > 0) & (b <= 0)] = 1.0
    out[(a <= 0) & (b > 0)] = 0.6
    out[(a > 0) & (b > 0) & (c > 0)] = 0.3
    return out


def cube(dims, value: float = 1.0, half_width: float = 0.5) -> np.ndarray:
    """Axis-aligned cube centred in the volume."""
    z, y, x = _centred_coords(dims)
    inside = (np.abs(x) < half_width) & (np.abs(y) < half_width) & (np.abs(z) < half_width)
    return np.where(inside, value, 0.0)


# (value, centre zyx, semi-axes zyx) with values added where ellipsoids overlap
_ELLIPSOIDS = (
    (1.0, (0.0, 0.0, 0.0), (0.8, 0.7, 0.6)),
    (-0.6, (0.0, 0.0, 0.0), (0.7, 0.6, 0.5)),
    (0.3, (0.1, -0.25, 0.2), (0.25, 0.2, 0.15)),
    (0.4, (-0.2, 0.25, -0.15), (0.2, 0.15, 0.25)),
)


def shepp3d_lite(dims) -> np.ndarray:
    z, y, x = _centred_coords(dims)
    out = np.zeros(tuple(int(n) for n in dims))
    for value, (cz, cy, cx), (az, ay, ax) in _ELLIPSOIDS:
        inside = ((z - cz) / az) ** 2 + ((y - cy) / ay) ** 2 + ((x - cx) / ax) ** 2 <= 1.0
        out[inside] += value
    return out


def make_phantom(kind: str, dims) -> np.ndarray:
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive integers, got {dims}")
    builders = {"halfspace": halfspace, "wedge3": wedge3, "cube": cube, "shepp3d-lite": shepp3d_lite}
    if kind not in builders:
        raise ValueError(f"unknown phantom kind {kind!r}; choose from {', '.join(KINDS)}")
    return builders[kind](dims)
