"""Two-stage field-of-junctions fitting: discrete initialisation, then
gradient refinement of all patches with ramped consistency weights."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from functools import lru_cache

import numpy as np

from ._kernels import split_local, split_shared
from ._parallel import batches, map_batches
from .grid import PatchGrid, Volume, build_patch_grid, extract_patches
from .junction import (
    NUM_PLANES,
    JunctionParams,
    indicators_from_distances,
    normals,
    patch_center,
    patch_coords,
    plane_normal,
    region_patterns,
    signed_distances,
)
from .objective import (
    FieldState,
    closed_form_intensities,
    compute_global_fields,
    evaluate,
)

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
# candidates within this fraction of the patch energy count as ties
TIE_RTOL = 1e-10
SEARCH_CHUNK = 16
ANGLE_CHUNK = 4
# halvings of the local normal fan after the grid pass of the split search
SPLIT_LEVELS = 6


@dataclass
class SolverConfig:
    patch_size: int = 10
    stride: int = 2
    num_regions: int = 3
    batch_size: int = 6
    n_init: int = 1
    n_refine: int = 30
    angular_grid: tuple[int, int] = (16, 32)
    vertex_scan: float = 1.0
    vertex_step: float = 0.5
    step_size: float = 0.03
    lambda_b_target: float = 0.1
    lambda_c_target: float = 0.1
    ramp: float = 0.5
    eta: float = 0.01
    delta: float = 0.1
    seed: int = 0
    threads: int = 1
    patches_per_batch: int = 128

    def __post_init__(self):
        self.angular_grid = tuple(int(a) for a in self.angular_grid)
        self.validate()

    def validate(self) -> None:
        for name in ("patch_size", "stride", "batch_size", "threads", "patches_per_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("n_init", "n_refine"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if len(self.angular_grid) != 2 or min(self.angular_grid) < 1:
            raise ValueError("angular_grid must be two positive counts (polar, azimuthal)")
        if not 0.0 <= self.ramp <= 1.0:
            raise ValueError("ramp must lie in [0, 1]")
        if self.step_size <= 0 or self.eta <= 0 or self.delta <= 0 or self.vertex_step <= 0:
            raise ValueError("step_size, eta, delta and vertex_step must be positive")
        if self.vertex_scan < 0 or self.lambda_b_target < 0 or self.lambda_c_target < 0:
            raise ValueError("vertex_scan and lambda targets must be non-negative")
        if not 2 <= self.num_regions <= 8:
            raise ValueError("num_regions must be in 2..8")

    @property
    def workers(self) -> int:
        return max(1, min(self.threads, self.batch_size))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["angular_grid"] = list(self.angular_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solver keys: {sorted(unknown)}")
        return cls(**d)


@lru_cache(maxsize=8)
def angular_candidates(n_polar: int, n_azimuth: int) -> np.ndarray:
    """Uniform ``(theta, phi)`` grid on the sphere, poles listed once, shape ``(C, 2)``."""
    rows = [(0.0, 0.0)]
    for i in range(1, n_polar):
        theta = math.pi * i / n_polar
        rows.extend((theta, 2 * math.pi * k / n_azimuth) for k in range(n_azimuth))
    rows.append((math.pi, 0.0))
    out = np.array(rows)
    out.flags.writeable = False
    return out


@lru_cache(maxsize=8)
def vertex_offsets(half_width: float, step: float) -> np.ndarray:
    """Scan lattice ``(K, 3)`` with the zero offset first, then lexicographic order."""
    n = int(math.floor(half_width / step + 1e-9))
    axis = step * np.arange(-n, n + 1)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    offs = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    offs = offs[np.any(offs != 0, axis=1)]
    out = np.vstack([np.zeros((1, 3)), offs])
    out.flags.writeable = False
    return out


def _pick(data, energy):
    """Index of the first candidate within tolerance of the minimum, per row."""
    best = data.min(axis=1, keepdims=True)
    ok = data <= best + TIE_RTOL * energy[:, None]
    return np.argmax(ok, axis=1)


def _fit_gain(S0, S1, prev):
    """Data reduction ``2 c S1 - c^2 S0`` of each region at its best intensity."""
    empty = S0 < 1e-12
    c = np.where(empty, prev, S1 / np.where(empty, 1.0, S0))
    return (2.0 * c * S1 - c * c * S0).sum(axis=-1)


def _h32(d, eta):
    """Float32 soft step for the discrete search; ``1 - H`` gives the mirrored factor."""
    d = np.asarray(d, dtype=np.float32)
    return np.float32(0.5) + np.arctan(d * np.float32(1.0 / eta)) * np.float32(1.0 / np.pi)


def _factor(H, sign):
    return H if sign else 1.0 - H


def _tangent_basis(normal):
    helper = np.where(np.abs(normal[:, 2:3]) < 0.9, np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    e1 = np.cross(normal, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    return e1, np.cross(normal, e1)


def _angles_of(n):
    n = np.asarray(n, dtype=np.float64)
    return np.stack([np.arccos(np.clip(n[..., 2], -1.0, 1.0)), np.arctan2(n[..., 1], n[..., 0])], axis=-1)


class _Search:
    """Per-configuration caches for the discrete initialisation."""

    def __init__(self, cfg: SolverConfig):
        self.cfg = cfg
        R = cfg.patch_size
        self.coords = patch_coords(R)
        self.center = patch_center(R)
        self.cand_angles = angular_candidates(*cfg.angular_grid)
        self.cand_normals = plane_normal(self.cand_angles[:, 0], self.cand_angles[:, 1])
        self.patterns = region_patterns(cfg.num_regions)
        self.offsets = vertex_offsets(cfg.vertex_scan, cfg.vertex_step)
        # split search runs over one hemisphere since n and -n give the same splits
        hemi = np.flatnonzero(self.cand_normals @ np.array([1e-3, 1e-6, 1.0]) >= 0)
        self.split_normals = self.cand_normals[hemi]
        proj = (self.coords - self.center) @ self.split_normals.T
        self.split_order = np.argsort(proj.T, axis=1, kind="stable")
        self.split_proj = np.take_along_axis(proj.T, self.split_order, axis=1)
        self.cell = math.pi / cfg.angular_grid[0]
        # every grid normal is a hemisphere normal or the negation of one
        match = self.cand_normals @ self.split_normals.T  # (C, Ch)
        self.cand_hemi = np.argmax(np.abs(match), axis=1)
        self.cand_same = match[np.arange(len(match)), self.cand_hemi] > 0
        self.hemi_dist = np.ascontiguousarray(proj.T, dtype=np.float32)  # (Ch, n)
        self.hemi_H = _h32(self.hemi_dist, cfg.eta)

    def data_terms(self, V, energy, vertex, angles, prev):
        """Soft data term of each configuration at its closed-form intensities."""
        d = signed_distances(vertex, angles, self.coords)
        u = indicators_from_distances(d, self.cfg.eta, self.cfg.num_regions)
        S0, S1 = u.sum(axis=-1), np.einsum("bmn,bn->bm", u, V)
        return energy - _fit_gain(S0, S1, prev)

    def _candidate_sums(self, W, shift):
        """Region sums ``(B, C, K)`` of ``W`` ``(B, K, n)`` over the positive side of every candidate plane.

        Only one hemisphere is evaluated: ``H(-d) = 1 - H(d)`` turns the sums
        for ``-n`` into totals minus the sums for ``n``.
        """
        B = W.shape[0]
        Wt = np.ascontiguousarray(W.transpose(0, 2, 1))  # (B, n, K)
        out = np.empty((B, self.hemi_dist.shape[0], W.shape[1]))
        if shift is None:
            out[:] = np.matmul(self.hemi_H[None], Wt)
        else:
            off = (shift @ self.split_normals.T).astype(np.float32)  # (B, Ch)
            for s in range(0, B, ANGLE_CHUNK):
                sl = slice(s, s + ANGLE_CHUNK)
                H = np.subtract(self.hemi_dist[None], off[sl, :, None])
                H *= np.float32(1.0 / self.cfg.eta)
                np.arctan(H, out=H)
                H *= np.float32(1.0 / np.pi)
                H += np.float32(0.5)
                out[sl] = np.matmul(H, Wt[sl])
        total = W.sum(axis=-1, dtype=np.float64)
        full = out[:, self.cand_hemi]
        flip = ~self.cand_same
        full[:, flip] = total[:, None, :] - full[:, flip]
        return full

    def angle_step(self, V, energy, vertex, angles, plane, prev):
        cfg, pats = self.cfg, self.patterns
        M = len(pats)
        d = signed_distances(vertex, angles, self.coords)
        H = _h32(d, cfg.eta)
        o1, o2 = [m for m in range(NUM_PLANES) if m != plane]
        g = np.stack([_factor(H[:, o1], p[o1]) * _factor(H[:, o2], p[o2]) for p in pats], axis=1)  # (B, M, n)
        W = np.concatenate([g, g * V[:, None, :].astype(np.float32)], axis=1)  # (B, 2M, n)
        shift = vertex - self.center
        A = self._candidate_sums(W, None if np.all(shift == 0.0) else shift)
        cur = np.einsum("bn,bkn->bk", H[:, plane], W)
        A = np.concatenate([cur[:, None], A], axis=1).reshape(len(V), -1, 2, M)  # current config first
        total = W.sum(axis=-1, dtype=np.float64).reshape(len(V), 2, M)
        sign = pats[:, plane][None, None, None, :]
        S = np.where(sign, A, total[:, None] - A)
        data = energy[:, None] - _fit_gain(S[:, :, 0], S[:, :, 1], prev[:, None, :])
        k = _pick(data, energy)
        new = angles.copy()
        moved = k > 0
        new[moved, plane] = self.cand_angles[k[moved] - 1]
        return new

    def vertex_step(self, V, energy, vertex, angles, prev):
        cfg, pats = self.cfg, self.patterns
        d = signed_distances(vertex, angles, self.coords).astype(np.float32)  # (B, 3, n)
        n = normals(angles)  # (B, 3, 3)
        shift = np.einsum("kx,blx->bkl", self.offsets, n).astype(np.float32)  # (B, K, 3)
        V32 = V.astype(np.float32)
        S0 = np.empty((V.shape[0], len(self.offsets), len(pats)))
        S1 = np.empty_like(S0)
        for b in range(V.shape[0]):
            H = _h32(d[b][None] - shift[b][..., None], cfg.eta)  # (K, 3, n)
            for j, p in enumerate(pats):
                u = _factor(H[:, 0], p[0]) * _factor(H[:, 1], p[1]) * _factor(H[:, 2], p[2])
                S0[b, :, j] = u.sum(axis=-1, dtype=np.float64)
                S1[b, :, j] = u @ V32[b]
        data = energy[:, None] - _fit_gain(S0, S1, prev[:, None, :])
        k = _pick(data, energy)
        return vertex + self.offsets[k]

    def best_split(self, V, levels: int = SPLIT_LEVELS):
        """Best two-value split of each patch by a plane.

        Every plane position between distinct voxel projections is tried
        exactly, first over grid normals and then over successively finer
        local fans around the winner.  Returns ``(vertex, angles, gain)`` of
        the junction realising the split with planes 2 and 3 out of the way.
        """
        V = np.ascontiguousarray(V, dtype=np.float64)
        idx, thr, gain = split_shared(V, self.split_proj, self.split_order)
        normal = self.split_normals[idx]
        rel = self.coords - self.center
        step = 0.5 * self.cell
        fan = np.array(sorted(((a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)), key=lambda t: t != (0, 0)), dtype=np.float64)
        for _ in range(levels):
            e1, e2 = _tangent_basis(normal)
            cand = normal[:, None, :] + step * (fan[None, :, 0:1] * e1[:, None] + fan[None, :, 1:2] * e2[:, None])
            cand /= np.linalg.norm(cand, axis=-1, keepdims=True)
            proj = np.einsum("bkx,nx->bkn", cand, rel)
            k, t, g = split_local(V, np.ascontiguousarray(proj), self.cfg.eta)
            normal, thr, gain = cand[np.arange(len(k)), k], t, g
            step *= 0.5
        vertex, angles = self._split_junction(normal, thr)
        return vertex, angles, gain

    def _split_junction(self, normal, offset):
        R = self.cfg.patch_size
        # any direction in the plane; the third plane faces it, pointing away from the patch
        u, _ = _tangent_basis(normal)
        vertex = self.center + offset[:, None] * normal + 2.0 * R * u
        angles = np.stack([_angles_of(normal), _angles_of(-normal), _angles_of(u)], axis=1)
        return vertex, angles


def initialize_junctions(patches, cfg: SolverConfig, start: JunctionParams | None = None, split: bool = True):
    """Coordinate-descent initialisation of many patches.

    ``patches`` is ``(N, R, R, R)`` or ``(N, R^3)``.  Each of ``cfg.n_init``
    rounds searches the angular grid for every plane in turn and then scans
    the vertex lattice, minimising the data term with intensities at their
    closed-form optimum.  The current configuration is always the first
    candidate, so a round never increases the data term.  With ``split`` the
    best exact two-value plane split is also tried and kept when strictly
    better; it places the vertex outside the patch, which plain vertex scans
    starting from the centre cannot reach.  Without ``start``
    the vertex sits at the patch centre and all planes at the first grid
    direction.
    """
    R = cfg.patch_size
    V_all = np.asarray(patches, dtype=np.float64).reshape(-1, R**3)
    N = V_all.shape[0]
    if start is None:
        vertex = np.tile(patch_center(R), (N, 1))
        angles = np.tile(angular_candidates(*cfg.angular_grid)[0], (N, NUM_PLANES, 1))
    else:
        vertex, angles = start.vertex.copy(), start.angles.copy()
    search = _Search(cfg)
    M = cfg.num_regions

    def work(idx):
        V = V_all[idx]
        energy = np.einsum("bn,bn->b", V, V)
        vtx, ang = vertex[idx].copy(), angles[idx].copy()
        prev = np.zeros((len(idx), M))
        # a constant patch is fitted by the split candidate alone
        live = np.flatnonzero(np.ptp(V, axis=1) > 0)
        if len(live):
            lv, la = vtx[live], ang[live]
            for _ in range(cfg.n_init):
                for plane in range(NUM_PLANES):
                    la = search.angle_step(V[live], energy[live], lv, la, plane, prev[live])
                lv = search.vertex_step(V[live], energy[live], lv, la, prev[live])
            vtx[live], ang[live] = lv, la
        if split:
            busy = np.flatnonzero(energy > 0)
            sv, sa, _ = search.best_split(V[busy])
            cur = search.data_terms(V[busy], energy[busy], vtx[busy], ang[busy], prev[busy])
            better = search.data_terms(V[busy], energy[busy], sv, sa, prev[busy]) < cur - TIE_RTOL * energy[busy]
            vtx[busy[better]] = sv[better]
            ang[busy[better]] = sa[better]
        d = signed_distances(vtx, ang, search.coords)
        u = indicators_from_distances(d, cfg.eta, M)
        c, _ = closed_form_intensities(u, V, np.zeros_like(V), 0.0, prev)
        return vtx, ang, c

    parts = batches(N, SEARCH_CHUNK)
    out = map_batches(work, parts, cfg.workers)
    params = JunctionParams(np.concatenate([o[0] for o in out]), np.concatenate([o[1] for o in out]), M)
    return params, np.concatenate([o[2] for o in out])


def init_patch(patch, cfg: SolverConfig):
    """Initialise a single ``R^3`` patch; returns ``(JunctionParams, intensities)``."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (cfg.patch_size,) * 3:
        raise ValueError(f"patch must be {cfg.patch_size}^3, got {patch.shape}")
    params, c = initialize_junctions(patch[None], cfg)
    return JunctionParams(params.vertex[0], params.angles[0], cfg.num_regions), c[0]


def ramp_weight(t: int, n: int, ramp: float) -> float:
    """Fraction of the lambda targets used at refinement iteration ``t`` (1-based)."""
    if ramp <= 0 or n <= 0:
        return 1.0
    return min(1.0, t / (ramp * n))


def _adam_proposal(state: FieldState, grad: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    """Advance the moments and return the proposed ``(N, 9)`` parameter vectors."""
    if state.adam_m is None:
        state.adam_m = np.zeros_like(grad)
        state.adam_v = np.zeros_like(grad)
        state.adam_t = 0
    if state.step_scale is None:
        state.step_scale = np.ones(grad.shape[0])
    state.adam_t += 1
    t = state.adam_t
    state.adam_m = ADAM_BETA1 * state.adam_m + (1 - ADAM_BETA1) * grad
    state.adam_v = ADAM_BETA2 * state.adam_v + (1 - ADAM_BETA2) * grad * grad
    mhat = state.adam_m / (1 - ADAM_BETA1**t)
    vhat = state.adam_v / (1 - ADAM_BETA2**t)
    step = cfg.step_size * state.step_scale[:, None] * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return state.params.as_vector() - step


def _patch_objective(ev, lambda_b: float, lambda_c: float) -> np.ndarray:
    raw = ev.per_patch_raw
    return raw[:, 0] + lambda_b * raw[:, 1] + lambda_c * raw[:, 2]


class NumericalError(FloatingPointError):
    pass


def _check_finite(ev, where: str) -> None:
    bad = ~np.all(np.isfinite(ev.per_patch_raw), axis=1)
    if ev.grad is not None:
        bad |= ~np.all(np.isfinite(ev.grad), axis=1)
    if np.any(bad):
        raise NumericalError(f"non-finite objective {where}; first offending patch {int(np.argmax(bad))}")


def _update_intensities(state: FieldState, noisy_patches, grid: PatchGrid, cfg: SolverConfig, vhat) -> None:
    coords = patch_coords(cfg.patch_size)
    vhat_flat = vhat.ravel()

    def work(idx):
        d = signed_distances(state.params.vertex[idx], state.params.angles[idx], coords)
        u = indicators_from_distances(d, cfg.eta, state.params.num_regions)
        return closed_form_intensities(u, noisy_patches[idx], vhat_flat[grid.flat_indices(idx)],
                                       state.lambda_c, state.intensities[idx])

    parts = batches(len(grid), cfg.patches_per_batch)
    out = map_batches(work, parts, cfg.workers)
    state.intensities = np.concatenate([o[0] for o in out])
    state.empty = np.concatenate([o[1] for o in out])


def refine(state: FieldState, noisy, grid: PatchGrid, cfg: SolverConfig, n_iter: int | None = None):
    """Gradient refinement; returns ``(state, trace)``.

    Each iteration sets the ramped lambdas, refreshes the global fields, takes
    one Adam step on every junction's geometry and then updates intensities in
    closed form.  ``trace`` rows are ``(iter, total, data, boundary, colour)``
    for the state after each iteration (row 0 is the incoming state).
    """
    n_iter = cfg.n_refine if n_iter is None else n_iter
    state = state.copy()
    noisy = np.asarray(getattr(noisy, "data", noisy), dtype=np.float64)
    if n_iter <= 0:
        return state, []
    noisy_patches = noisy.ravel()[grid.flat_indices()]
    kw = dict(chunk=cfg.patches_per_batch, workers=cfg.workers)
    fields = compute_global_fields(state.params, state.intensities, grid, cfg.eta, cfg.delta, **kw)
    trace = []
    for t in range(1, n_iter + 1):
        w = ramp_weight(t, n_iter, cfg.ramp)
        state.lambda_b, state.lambda_c = w * cfg.lambda_b_target, w * cfg.lambda_c_target
        state.global_color, state.global_boundary = fields
        ev = evaluate(state, noisy, grid, cfg.eta, cfg.delta, want_grad=True, fields=fields, **kw)
        _check_finite(ev, f"at refinement iteration {t}")
        trace.append((t - 1, *ev.terms(state.lambda_b, state.lambda_c)))
        current = _patch_objective(ev, state.lambda_b, state.lambda_c)
        old = state.params
        state.params = JunctionParams.from_vector(_adam_proposal(state, ev.grad, cfg), old.num_regions)
        trial = evaluate(state, noisy, grid, cfg.eta, cfg.delta, want_grad=False, fields=fields, **kw)
        # a step that raises its own patch objective is undone and the patch slows down
        reject = ~(_patch_objective(trial, state.lambda_b, state.lambda_c) <= current)
        state.params.vertex[reject] = old.vertex[reject]
        state.params.angles[reject] = old.angles[reject]
        state.step_scale = np.where(reject, 0.5 * state.step_scale, np.minimum(1.0, 1.25 * state.step_scale))
        _update_intensities(state, noisy_patches, grid, cfg, fields[0])
        fields = compute_global_fields(state.params, state.intensities, grid, cfg.eta, cfg.delta, **kw)
    state.global_color, state.global_boundary = fields
    ev = evaluate(state, noisy, grid, cfg.eta, cfg.delta, want_grad=False, fields=fields, **kw)
    _check_finite(ev, "after refinement")
    trace.append((n_iter, *ev.terms(state.lambda_b, state.lambda_c)))
    return state, trace


def fit_field(noisy, grid: PatchGrid, cfg: SolverConfig, start: FieldState | None = None) -> FieldState:
    """Run the initialisation stage on every patch and assemble a state."""
    patches = extract_patches(noisy, grid)
    params, c = initialize_junctions(patches, cfg, None if start is None else start.params)
    vhat, bhat = compute_global_fields(params, c, grid, cfg.eta, cfg.delta, cfg.patches_per_batch, cfg.workers)
    state = FieldState(params, c, vhat, bhat, 0.0, 0.0)
    if start is not None:
        state.adam_m, state.adam_v, state.adam_t = start.adam_m, start.adam_v, start.adam_t
        state.step_scale = start.step_scale
        state.lambda_b, state.lambda_c = start.lambda_b, start.lambda_c
    return state


def denoise_volume(noisy, cfg: SolverConfig | None = None):
    """Fit a field of junctions to ``noisy``; returns ``(denoised, state, trace)``.

    ``denoised`` is the global colour field, as an array (or a
    :class:`~foj3d.grid.Volume` when one was passed in).
    """
    cfg = cfg or SolverConfig()
    data = np.asarray(getattr(noisy, "data", noisy), dtype=np.float64)
    grid = build_patch_grid(data.shape, cfg.patch_size, cfg.stride)
    state = fit_field(data, grid, cfg)
    state, trace = refine(state, data, grid, cfg)
    if not trace:
        ev = evaluate(state, data, grid, cfg.eta, cfg.delta, want_grad=False,
                 fields=(state.global_color, state.global_boundary))
        trace = [(0, *ev.terms(0.0, 0.0))]
    out = state.global_color.copy()
    if isinstance(noisy, Volume):
        out = Volume(out, noisy.spacing)
    return out, state, trace


TRACE_HEADER = ("iter", "total", "data", "boundary", "color")


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for row in trace:
            w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])
