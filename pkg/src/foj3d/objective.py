"""Global field-of-junctions objective, global fields and analytic gradients.

Voxels outside all ``M`` active regions belong to an implicit background
region whose intensity is fixed at zero; its membership is
``u0 = 1 - sum_j u^(j)`` (identically zero when ``M = 8``).  It takes part in
the data and colour-consistency terms like any other region, which keeps a
junction from lowering its data term by simply leaving voxels uncovered.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from ._parallel import batches, map_batches
from .grid import PatchAccumulator, PatchGrid, extract_patches
from .junction import (
    JunctionParams,
    boundary_from_distances,
    indicator_distance_derivatives,
    indicators_from_distances,
    normals,
    patch_coords,
    plane_normal_derivatives,
    signed_distances,
)

EMPTY_REGION_EPS = 1e-12
DEFAULT_CHUNK = 128


@dataclass
class FieldState:
    """All junctions ``Gamma``, intensities ``C`` and the current global fields."""

    params: JunctionParams
    intensities: np.ndarray
    global_color: np.ndarray
    global_boundary: np.ndarray
    lambda_b: float = 0.0
    lambda_c: float = 0.0
    # Adam moments over the 9 geometry parameters of every patch
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    adam_t: int = 0
    # per-patch step multiplier, halved whenever a step is rejected
    step_scale: np.ndarray | None = None
    empty: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_patches(self) -> int:
        return self.params.vertex.shape[0]

    def copy(self) -> "FieldState":
        cp = lambda a: None if a is None else np.array(a, copy=True)
        return replace(
            self,
            params=JunctionParams(self.params.vertex.copy(), self.params.angles.copy(), self.params.num_regions),
            intensities=self.intensities.copy(),
            global_color=self.global_color.copy(),
            global_boundary=self.global_boundary.copy(),
            adam_m=cp(self.adam_m),
            adam_v=cp(self.adam_v),
            step_scale=cp(self.step_scale),
            empty=cp(self.empty),
        )

    def to_json(self) -> dict:
        return {
            "num_regions": int(self.params.num_regions),
            "vertex_xyz": self.params.vertex.tolist(),
            "angles_theta_phi": self.params.angles.tolist(),
            "intensities": self.intensities.tolist(),
            "lambda_b": float(self.lambda_b),
            "lambda_c": float(self.lambda_c),
        }


class LossTerms(NamedTuple):
    total: float
    data: float
    boundary: float
    color: float


def patch_render(params: JunctionParams, intensities, eta: float, coords=None) -> np.ndarray:
    """``sum_j u^(j)(v) c^(j)``; uncovered voxels render towards zero."""
    if coords is None:
        raise ValueError("coords are required (use junction.patch_coords(R))")
    d = signed_distances(params.vertex, params.angles, coords)
    u = indicators_from_distances(d, eta, params.num_regions)
    return np.einsum("...mp,...m->...p", u, np.asarray(intensities, dtype=np.float64))


def compute_global_fields(params: JunctionParams, intensities, grid: PatchGrid, eta: float, delta: float,
                          chunk: int = DEFAULT_CHUNK, workers: int = 1):
    """Overlap-averaged colour field ``V_hat`` and boundary field ``B_hat``."""
    if params.vertex.shape[0] != len(grid):
        raise ValueError(f"state has {params.vertex.shape[0]} junctions but grid has {len(grid)} patches")
    intensities = np.asarray(intensities, dtype=np.float64)
    coords = patch_coords(grid.patch_size)

    def work(idx):
        d = signed_distances(params.vertex[idx], params.angles[idx], coords)
        u = indicators_from_distances(d, eta, params.num_regions)
        return np.einsum("bmp,bm->bp", u, intensities[idx]), boundary_from_distances(d, delta)

    parts = batches(len(grid), chunk)
    color, bound = PatchAccumulator(grid), PatchAccumulator(grid)
    for idx, (r, b) in zip(parts, map_batches(work, parts, workers)):
        color.add(idx, r)
        bound.add(idx, b)
    return color.mean(), bound.mean()


def closed_form_intensities(u, patch, vhat, lambda_c: float, previous=None):
    """Minimise data + colour terms over each region intensity for fixed geometry.

    ``u`` is ``(..., M, n)``; ``patch`` and ``vhat`` are ``(..., n)``.  Regions
    with total membership below ``EMPTY_REGION_EPS`` keep ``previous`` (zero if
    not given) and are flagged in the returned mask.
    """
    u = np.asarray(u, dtype=np.float64)
    target = np.asarray(patch, dtype=np.float64) + lambda_c * np.asarray(vhat, dtype=np.float64)
    mass = u.sum(axis=-1)
    num = np.einsum("...mp,...p->...m", u, target)
    empty = mass < EMPTY_REGION_EPS
    prev = np.zeros(mass.shape) if previous is None else np.broadcast_to(np.asarray(previous, dtype=np.float64), mass.shape)
    safe = np.where(empty, 1.0, mass)
    c = np.where(empty, prev, num / ((1.0 + lambda_c) * safe))
    return c, empty


def junction_intensities(params: JunctionParams, patch, vhat, lambda_c: float, eta: float, previous=None):
    """:func:`closed_form_intensities` evaluated from junction parameters.

    ``patch`` and ``vhat`` are ``batch + (R, R, R)`` or ``batch + (R^3,)``.
    """
    batch = params.vertex.shape[:-1]
    flat = np.asarray(patch, dtype=np.float64).reshape(batch + (-1,))
    R = round(flat.shape[-1] ** (1 / 3))
    d = signed_distances(params.vertex, params.angles, patch_coords(R))
    u = indicators_from_distances(d, eta, params.num_regions)
    vhat = np.asarray(vhat, dtype=np.float64).reshape(flat.shape)
    return closed_form_intensities(u, flat, vhat, lambda_c, previous)


class PatchTerms(NamedTuple):
    data: np.ndarray  # (B,)
    boundary: np.ndarray  # unscaled by lambda_b
    color: np.ndarray  # unscaled by lambda_c
    grad: np.ndarray | None  # (B, 9), with the lambdas applied


def patch_terms(vertex, angles, intensities, num_regions, V, vhat, bhat, weight, lambda_b, lambda_c,
                eta, delta, coords, want_grad=True) -> PatchTerms:
    """Per-patch objective terms and gradients.

    ``V``, ``vhat``, ``bhat`` and ``weight`` (``1/|N_v|``) are patch-restricted
    ``(B, n)`` arrays.  The gradient differentiates the global fields only
    through this patch's own contribution to them.
    """
    d = signed_distances(vertex, angles, coords)  # (B, 3, n)
    c = np.asarray(intensities, dtype=np.float64)
    if want_grad:
        u, du_dd = indicator_distance_derivatives(d, eta, num_regions)
    else:
        u, du_dd = indicators_from_distances(d, eta, num_regions), None
    u0 = 1.0 - u.sum(axis=1)
    B = boundary_from_distances(d, delta)

    resid = V[:, None, :] - c[:, :, None]
    data = np.einsum("bmp,bmp->b", u, resid * resid) + np.einsum("bp,bp->b", u0, V * V)
    cres = c[:, :, None] - vhat[:, None, :]
    color = np.einsum("bmp,bmp->b", u, cres * cres) + np.einsum("bp,bp->b", u0, vhat * vhat)
    bres = B - bhat
    boundary = np.einsum("bp,bp->b", bres, bres)
    if not want_grad:
        return PatchTerms(data, boundary, color, None)

    render = np.einsum("bmp,bm->bp", u, c)
    a = resid * resid - (V * V)[:, None, :]
    if lambda_c:
        a = a + lambda_c * (cres * cres - (vhat * vhat)[:, None, :]
                            - 2.0 * (weight * (render - vhat))[:, None, :] * c[:, :, None])
    G = np.einsum("bmp,bmlp->blp", a, du_dd)
    if lambda_b:
        d2 = d * d
        nearest = np.argmin(d2, axis=1)  # (B, n)
        m2 = np.take_along_axis(d2, nearest[:, None, :], axis=1)[:, 0, :]
        coef = 2.0 * lambda_b * bres * (1.0 - weight) * (-2.0 * delta * delta / (m2 + delta * delta) ** 2)
        dnear = np.take_along_axis(d, nearest[:, None, :], axis=1)[:, 0, :]
        contrib = coef * dnear
        G = G + contrib[:, None, :] * (nearest[:, None, :] == np.arange(3)[None, :, None])

    n = normals(angles)  # (B, 3, 3)
    dth, dph = plane_normal_derivatives(angles[..., 0], angles[..., 1])
    gsum = G.sum(axis=-1)  # (B, 3)
    grel = np.einsum("blp,pk->blk", G, coords) - gsum[:, :, None] * vertex[:, None, :]
    grad = np.empty((vertex.shape[0], 9))
    grad[:, 0:3] = -np.einsum("bl,blk->bk", gsum, n)
    grad[:, 3::2] = np.einsum("blk,blk->bl", grel, dth)
    grad[:, 4::2] = np.einsum("blk,blk->bl", grel, dph)
    return PatchTerms(data, boundary, color, grad)


class Evaluation(NamedTuple):
    data: float
    boundary_raw: float
    color_raw: float
    per_patch_raw: np.ndarray  # (N, 3): data, boundary, colour before lambda scaling
    grad: np.ndarray | None

    def terms(self, lambda_b: float, lambda_c: float) -> LossTerms:
        b, c = lambda_b * self.boundary_raw, lambda_c * self.color_raw
        return LossTerms(self.data + b + c, self.data, b, c)


def evaluate(state: FieldState, noisy, grid: PatchGrid, eta: float, delta: float, want_grad: bool,
             fields=None, chunk: int = DEFAULT_CHUNK, workers: int = 1) -> Evaluation:
    """Objective pieces (and per-patch gradients) using global fields ``fields``,
    recomputed from ``state`` when not given."""
    noisy = np.asarray(getattr(noisy, "data", noisy), dtype=np.float64)
    if noisy.shape != grid.dims:
        raise ValueError(f"volume dims {noisy.shape} do not match grid dims {grid.dims}")
    if fields is None:
        fields = compute_global_fields(state.params, state.intensities, grid, eta, delta, chunk, workers)
    vhat, bhat = (f.ravel() for f in fields)
    coords = patch_coords(grid.patch_size)
    flat_noisy = noisy.ravel()
    weight = (1.0 / grid.overlap_count).ravel()

    def work(idx):
        flat = grid.flat_indices(idx)
        return patch_terms(
            state.params.vertex[idx], state.params.angles[idx], state.intensities[idx], state.params.num_regions,
            flat_noisy[flat], vhat[flat], bhat[flat], weight[flat],
            state.lambda_b, state.lambda_c, eta, delta, coords, want_grad,
        )

    parts = batches(len(grid), chunk)
    results = map_batches(work, parts, workers)
    per_patch = np.concatenate([np.stack([t.data, t.boundary, t.color], axis=1) for t in results])
    grad = np.concatenate([t.grad for t in results]) if want_grad else None
    sums = per_patch.sum(axis=0)
    return Evaluation(float(sums[0]), float(sums[1]), float(sums[2]), per_patch, grad)


def loss(state: FieldState, noisy, grid: PatchGrid, eta: float, delta: float) -> LossTerms:
    """Full three-term objective; global fields are recomputed from ``state``."""
    return evaluate(state, noisy, grid, eta, delta, want_grad=False).terms(state.lambda_b, state.lambda_c)


def loss_gradient(state: FieldState, noisy, grid: PatchGrid, eta: float, delta: float) -> np.ndarray:
    """Per-patch gradients ``(N, 9)`` of the objective with intensities held fixed."""
    return evaluate(state, noisy, grid, eta, delta, want_grad=True).grad


def make_state(params: JunctionParams, intensities, grid: PatchGrid, eta: float, delta: float,
               lambda_b: float = 0.0, lambda_c: float = 0.0) -> FieldState:
    """Assemble a :class:`FieldState` with its global fields computed."""
    intensities = np.asarray(intensities, dtype=np.float64)
    vhat, bhat = compute_global_fields(params, intensities, grid, eta, delta)
    return FieldState(params, intensities, vhat, bhat, lambda_b, lambda_c)


def observed_patches(noisy, grid: PatchGrid) -> np.ndarray:
    return extract_patches(noisy, grid).reshape(len(grid), -1)
