"""Linear inverse problems with a field-of-junctions proximal step.

``reconstruct_pgd`` alternates a gradient step on ``0.5 ||A x - b||^2`` with
the proximal map of ``g(x) = min ||x - R||^2`` where ``R`` is the FoJ render.
For a fixed render that map is the blend ``(x_half + 2 lam R) / (1 + 2 lam)``;
the render itself comes from one warm-started FoJ update.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Protocol

import numpy as np

from .grid import build_patch_grid
from .objective import FieldState
from .solver import NumericalError, SolverConfig, fit_field, refine

log = logging.getLogger(__name__)


class LinearOperator(Protocol):
    in_dims: tuple
    out_dims: tuple

    def forward(self, x: np.ndarray) -> np.ndarray: ...

    def adjoint(self, y: np.ndarray) -> np.ndarray: ...


class IdentityOperator:
    def __init__(self, dims):
        self.in_dims = self.out_dims = tuple(int(n) for n in dims)

    def forward(self, x):
        return np.array(x, dtype=np.float64, copy=True)

    def adjoint(self, y):
        return np.array(y, dtype=np.float64, copy=True)


class MatrixOperator:
    """Dense or sparse matrix acting on flattened arrays."""

    def __init__(self, matrix, in_dims, out_dims):
        self.matrix = matrix
        self.in_dims = tuple(int(n) for n in in_dims)
        self.out_dims = tuple(int(n) for n in out_dims)
        if matrix.shape != (int(np.prod(self.out_dims)), int(np.prod(self.in_dims))):
            raise ValueError(f"matrix shape {matrix.shape} does not match dims {self.out_dims} x {self.in_dims}")

    def forward(self, x):
        return np.asarray(self.matrix @ np.asarray(x, dtype=np.float64).ravel()).reshape(self.out_dims)

    def adjoint(self, y):
        return np.asarray(self.matrix.T @ np.asarray(y, dtype=np.float64).ravel()).reshape(self.in_dims)


class ScaledOperator:
    """``scale * A``; used to normalise an operator to unit norm."""

    def __init__(self, op: LinearOperator, scale: float):
        self.op = op
        self.scale = float(scale)
        self.in_dims, self.out_dims = op.in_dims, op.out_dims

    def forward(self, x):
        return self.scale * self.op.forward(x)

    def adjoint(self, y):
        return self.scale * self.op.adjoint(y)


def _check(arr, dims, what):
    arr = np.asarray(getattr(arr, "data", arr), dtype=np.float64)
    if arr.shape != tuple(dims):
        raise ValueError(f"{what} has shape {arr.shape}, operator expects {tuple(dims)}")
    return arr


def data_gradient(A: LinearOperator, x, b) -> np.ndarray:
    """``A^T (A x - b)``."""
    x = _check(x, A.in_dims, "x")
    b = _check(b, A.out_dims, "b")
    return A.adjoint(A.forward(x) - b)


def estimate_norm(A: LinearOperator, n_iter: int = 20, seed: int = 0) -> float:
    """Power-method estimate of the spectral norm ``||A||``."""
    x = np.random.default_rng(seed).standard_normal(A.in_dims)
    x /= np.linalg.norm(x)
    sq = 0.0
    for _ in range(n_iter):
        y = A.adjoint(A.forward(x))
        sq = float(np.linalg.norm(y))
        if sq == 0.0:
            return 0.0
        x = y / sq
    return float(np.sqrt(sq))


@dataclass
class PgdConfig:
    lam: float | None = None  # None: 1 / ||A||^2
    n_outer: int = 10
    foj: SolverConfig = field(default_factory=lambda: SolverConfig(n_init=1, n_refine=1))
    warm_start: bool = True

    def __post_init__(self):
        if isinstance(self.foj, dict):
            self.foj = SolverConfig.from_dict(self.foj)
        if self.lam is not None and not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.n_outer < 0:
            raise ValueError("n_outer must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["foj"] = self.foj.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PgdConfig":
        unknown = set(d) - {"lam", "n_outer", "foj", "warm_start"}
        if unknown:
            raise ValueError(f"unknown pgd keys: {sorted(unknown)}")
        return cls(**d)


def foj_update(x_half, cfg: SolverConfig, prev_state: FieldState | None = None) -> FieldState:
    """One FoJ update (initialisation sweep plus refinement) fitted to ``x_half``."""
    x_half = np.asarray(getattr(x_half, "data", x_half), dtype=np.float64)
    grid = build_patch_grid(x_half.shape, cfg.patch_size, cfg.stride)
    state = fit_field(x_half, grid, cfg, start=prev_state)
    state, _ = refine(state, x_half, grid, cfg)
    return state


def prox_foj(x_half, cfg: PgdConfig, prev_state: FieldState | None = None, lam: float | None = None):
    """Proximal step of the FoJ prior; returns ``(x_next, state)``.

    ``lam`` (default ``cfg.lam``) weighs the prior: ``x_next`` moves from
    ``x_half`` towards the render by ``2 lam / (1 + 2 lam)``.  Without a
    weight the render itself is returned.
    """
    x_half = np.asarray(getattr(x_half, "data", x_half), dtype=np.float64)
    start = prev_state if cfg.warm_start else None
    state = foj_update(x_half, cfg.foj, start)
    lam = cfg.lam if lam is None else lam
    render = state.global_color
    if lam is None:
        return render.copy(), state
    return (x_half + 2.0 * lam * render) / (1.0 + 2.0 * lam), state


def normalized_adjoint(A: LinearOperator, b) -> np.ndarray:
    x = A.adjoint(_check(b, A.out_dims, "b"))
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


class PgdResult(NamedTuple):
    x: np.ndarray
    residuals: list
    state: FieldState | None
    lam: float


def reconstruct_pgd(A: LinearOperator, b, cfg: PgdConfig | None = None, x0=None) -> PgdResult:
    """Proximal-gradient reconstruction with the FoJ prior.

    ``residuals[k]`` is ``||A x_k - b||`` for the iterate after ``k`` outer
    iterations (entry 0 is the initial volume).
    """
    cfg = cfg or PgdConfig()
    b = _check(b, A.out_dims, "b")
    norm = estimate_norm(A, 20, cfg.foj.seed)
    lam = cfg.lam
    if lam is None:
        lam = 1.0 / (norm * norm) if norm > 0 else 1.0
    elif norm > 0 and lam >= 2.0 / (norm * norm):
        warnings.warn(f"lam={lam:g} exceeds the stable step 2/||A||^2={2.0 / norm**2:g}", RuntimeWarning, stacklevel=2)
    x = normalized_adjoint(A, b) if x0 is None else _check(x0, A.in_dims, "x0").copy()
    residuals = [float(np.linalg.norm(A.forward(x) - b))]
    state = None
    for k in range(1, cfg.n_outer + 1):
        x_half = x - lam * A.adjoint(A.forward(x) - b)
        if not np.all(np.isfinite(x_half)):
            raise NumericalError(f"non-finite iterate at outer iteration {k}")
        x, state = prox_foj(x_half, cfg, state, lam)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite iterate at outer iteration {k}")
        residuals.append(float(np.linalg.norm(A.forward(x) - b)))
        log.info("pgd iter %d residual %.6g", k, residuals[-1])
    return PgdResult(x, residuals, state, lam)


class LsqResult(NamedTuple):
    x: np.ndarray
    residuals: list
    breakdown: bool


def reconstruct_lsq(A: LinearOperator, b, n_iter: int, x0=None) -> LsqResult:
    """CGLS on ``min ||A x - b||^2`` starting from ``x0`` (default zero)."""
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    b = _check(b, A.out_dims, "b")
    x = np.zeros(A.in_dims) if x0 is None else _check(x0, A.in_dims, "x0").copy()
    r = b - A.forward(x)
    s = A.adjoint(r)
    p = s.copy()
    gamma = float(np.vdot(s, s))
    residuals = [float(np.linalg.norm(r))]
    for _ in range(n_iter):
        q = A.forward(p)
        qq = float(np.vdot(q, q))
        if gamma == 0.0 or qq == 0.0:
            return LsqResult(x, residuals, gamma != 0.0)
        alpha = gamma / qq
        x = x + alpha * p
        r = r - alpha * q
        s = A.adjoint(r)
        gamma_new = float(np.vdot(s, s))
        residuals.append(float(np.linalg.norm(r)))
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    return LsqResult(x, residuals, False)


def write_residual_trace(path, residuals) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("iter", "residual_l2"))
        for i, r in enumerate(residuals):
            w.writerow((i, repr(float(r))))
