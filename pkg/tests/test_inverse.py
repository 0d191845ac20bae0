import numpy as np
import pytest

from foj3d.grid import build_patch_grid
from foj3d.inverse import (
    IdentityOperator,
    MatrixOperator,
    PgdConfig,
    ScaledOperator,
    data_gradient,
    estimate_norm,
    normalized_adjoint,
    prox_foj,
    reconstruct_lsq,
    reconstruct_pgd,
    write_residual_trace,
)
from foj3d.junction import JunctionParams
from foj3d.objective import make_state
from foj3d.phantoms import halfspace
from foj3d.solver import NumericalError, SolverConfig

SMALL = SolverConfig(patch_size=6, stride=6, angular_grid=(4, 8), n_init=1, n_refine=1)


def random_matrix_op(seed=0, shape=(2, 3, 4), rows=30):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((rows, int(np.prod(shape))))
    return M, MatrixOperator(M, shape, (rows,))


def test_data_gradient_identity():
    x = np.random.default_rng(0).uniform(size=(3, 3, 3))
    np.testing.assert_array_equal(data_gradient(IdentityOperator(x.shape), x, np.zeros_like(x)), x)


def test_data_gradient_matches_matrix_oracle():
    M, A = random_matrix_op()
    rng = np.random.default_rng(1)
    x, b = rng.standard_normal(A.in_dims), rng.standard_normal(A.out_dims)
    np.testing.assert_allclose(data_gradient(A, x, b).ravel(), M.T @ (M @ x.ravel() - b), atol=1e-12)
    with pytest.raises(ValueError):
        data_gradient(A, x, np.zeros(5))


def test_matrix_operator_validates_shape():
    with pytest.raises(ValueError):
        MatrixOperator(np.zeros((3, 4)), (5,), (3,))


def test_scaled_operator_adjoint_dot_product():
    _, A = random_matrix_op(2)
    S = ScaledOperator(A, 0.3)
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal(S.in_dims), rng.standard_normal(S.out_dims)
    assert np.vdot(S.forward(x), y) == pytest.approx(np.vdot(x, S.adjoint(y)), rel=1e-12)


def test_estimate_norm_matches_svd():
    rng = np.random.default_rng(4)
    U, _ = np.linalg.qr(rng.standard_normal((24, 24)))
    W, _ = np.linalg.qr(rng.standard_normal((24, 24)))
    M = U @ np.diag(np.linspace(3.0, 0.1, 24)) @ W.T
    A = MatrixOperator(M, (2, 3, 4), (24,))
    assert estimate_norm(A) == pytest.approx(np.linalg.norm(M, 2), rel=1e-3)
    assert estimate_norm(IdentityOperator((4, 4, 4))) == pytest.approx(1.0)
    assert estimate_norm(MatrixOperator(np.zeros((3, 24)), (2, 3, 4), (3,))) == 0.0


def test_normalized_adjoint_range():
    x = normalized_adjoint(IdentityOperator((3, 3, 3)), np.arange(27.0).reshape(3, 3, 3) - 5)
    assert x.min() == 0.0 and x.max() == 1.0
    assert not normalized_adjoint(IdentityOperator((2, 2, 2)), np.ones((2, 2, 2))).any()


def test_pgd_config_round_trip():
    cfg = PgdConfig(lam=0.5, n_outer=3, foj=SMALL)
    assert PgdConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        PgdConfig.from_dict({"steps": 1})
    with pytest.raises(ValueError):
        PgdConfig(lam=0.0)


def test_prox_fixed_point_of_rendered_state():
    # a nearly hard junction whose planes sit half a voxel from all centres
    foj = SolverConfig(**{**SMALL.to_dict(), "eta": 1e-9})
    grid = build_patch_grid((6, 6, 6), 6, 6)
    params = JunctionParams(np.array([[3.0, 2.0, 4.0]]), np.array([[[np.pi / 2, 0], [np.pi / 2, np.pi / 2], [0, 0]]]))
    state = make_state(params, np.array([[0.9, 0.5, 0.2]]), grid, foj.eta, foj.delta)
    x_half = state.global_color.copy()
    out, _ = prox_foj(x_half, PgdConfig(lam=1.0, foj=foj), state)
    assert np.abs(out - x_half).max() < 1e-6


def test_prox_zero_in_zero_out():
    out, _ = prox_foj(np.zeros((6, 6, 6)), PgdConfig(foj=SMALL))
    assert not out.any()


def test_prox_moves_noisy_halfspace_towards_clean():
    clean = halfspace((10, 10, 10))
    noisy = clean + 0.5 * np.random.default_rng(5).standard_normal(clean.shape)
    foj = SolverConfig(patch_size=10, stride=10, n_refine=1)
    out, _ = prox_foj(noisy, PgdConfig(lam=1.0, foj=foj))
    assert np.linalg.norm(out - clean) < np.linalg.norm(noisy - clean)


def test_pgd_small_lambda_identity_returns_measurement():
    b = np.random.default_rng(6).uniform(0, 1, (6, 6, 6))
    b.flat[0], b.flat[1] = 0.0, 1.0
    res = reconstruct_pgd(IdentityOperator(b.shape), b, PgdConfig(lam=1e-8, n_outer=3, foj=SMALL))
    assert np.abs(res.x - b).max() < 1e-3
    assert len(res.residuals) == 4
    assert res.lam == 1e-8


def test_pgd_default_lambda_and_warning():
    b = np.random.default_rng(7).uniform(0, 1, (6, 6, 6))
    res = reconstruct_pgd(IdentityOperator(b.shape), b, PgdConfig(n_outer=0, foj=SMALL))
    assert res.lam == pytest.approx(1.0)
    with pytest.warns(RuntimeWarning, match="stable step"):
        reconstruct_pgd(IdentityOperator(b.shape), b, PgdConfig(lam=2.5, n_outer=1, foj=SMALL))


def test_pgd_reports_non_finite_iteration():
    b = np.ones((6, 6, 6))
    b[0, 0, 0] = np.inf
    with pytest.raises(NumericalError, match="iteration 1"):
        reconstruct_pgd(IdentityOperator(b.shape), b, PgdConfig(lam=0.5, n_outer=2, foj=SMALL), x0=np.zeros(b.shape))


def test_cgls_solves_overdetermined_system():
    M, A = random_matrix_op(8, rows=40)
    b = np.random.default_rng(9).standard_normal(40)
    res = reconstruct_lsq(A, b, n_iter=24)
    np.testing.assert_allclose(res.x.ravel(), np.linalg.lstsq(M, b, rcond=None)[0], atol=1e-8)
    assert all(r1 <= r0 + 1e-12 for r0, r1 in zip(res.residuals, res.residuals[1:]))
    assert not res.breakdown


def test_cgls_zero_data_and_validation():
    _, A = random_matrix_op()
    res = reconstruct_lsq(A, np.zeros(30), n_iter=5)
    assert not res.x.any() and res.residuals == [0.0]
    with pytest.raises(ValueError):
        reconstruct_lsq(A, np.zeros(30), n_iter=0)


def test_residual_trace_csv(tmp_path):
    write_residual_trace(tmp_path / "r.csv", [3.0, 1.5])
    assert (tmp_path / "r.csv").read_text().splitlines() == ["iter,residual_l2", "0,3.0", "1,1.5"]
