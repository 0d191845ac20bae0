import math

import numpy as np
import pytest

from foj3d.phantoms import cube
from foj3d.tomo import (
    ParallelBeamProjector,
    PhotonNoiseModel,
    ProjectorGeometry,
    backproject,
    jittered_angles,
    load_sinogram,
    project,
    save_sinogram,
    simulate_low_dose,
)


def toy_geometry(n=8, views=4):
    return ProjectorGeometry(jittered_angles(views, 1), (n, n, n), (1.0 / n,) * 3)


def test_geometry_defaults_and_validation():
    g = toy_geometry()
    assert g.sino_dims == (4, 8, math.ceil(math.hypot(8, 8)))
    assert ProjectorGeometry.from_dict(g.to_dict()) == g
    with pytest.raises(ValueError, match="at least one view"):
        ProjectorGeometry([], (4, 4, 4))
    with pytest.raises(ValueError, match="footprint"):
        ProjectorGeometry([0.0], (4, 4, 4), det_cols=2)
    with pytest.raises(ValueError):
        ProjectorGeometry([0.0], (4, 4))


def test_jittered_angles_one_per_subinterval():
    a = jittered_angles(20, seed=3)
    k = np.floor(a / (math.pi / 20)).astype(int)
    assert k.tolist() == list(range(20))
    np.testing.assert_array_equal(a, jittered_angles(20, seed=3))


def test_zero_in_zero_out():
    g = toy_geometry()
    assert not project(g, np.zeros(g.vol_dims)).any()
    assert not backproject(g, np.zeros(g.sino_dims)).any()


def test_cube_chord_length():
    n = 32
    g = ProjectorGeometry([0.0], (n, n, n), (1.0 / n,) * 3)
    side = 0.5  # half_width 0.5 of the unit half-extent
    sino = project(g, cube((n, n, n)))
    step = 0.5 / n
    centre = sino[0, n // 2, g.det_cols // 2]
    assert abs(centre - side) <= step


def test_adjoint_inner_product():
    g = toy_geometry()
    P = ParallelBeamProjector(g)
    rng = np.random.default_rng(0)
    for _ in range(10):
        x, y = rng.standard_normal(g.vol_dims), rng.standard_normal(g.sino_dims)
        lhs, rhs = np.vdot(P.forward(x), y), np.vdot(x, P.adjoint(y))
        assert abs(lhs - rhs) / abs(lhs) < 1e-3


def test_adjoint_is_matrix_transpose():
    g = toy_geometry()
    P = ParallelBeamProjector(g)
    M = P.matrix()
    eye = np.eye(int(np.prod(g.sino_dims)))
    MT = np.stack([P.adjoint(e.reshape(g.sino_dims)).ravel() for e in eye], axis=1)
    np.testing.assert_allclose(MT, M.T, rtol=0, atol=1e-5 * np.abs(M).max())


def test_single_pixel_backprojection_footprint():
    n = 16
    g = ProjectorGeometry([0.4], (n, n, n), (1.0,) * 3)
    y = np.zeros(g.sino_dims)
    row, col = 5, g.det_cols // 2 + 2
    y[0, row, col] = 1.0
    vol = backproject(g, y)
    z, yy, xx = np.nonzero(vol)
    assert set(z.tolist()) == {row}
    X, Y = xx + 0.5 - n / 2, yy + 0.5 - n / 2
    offset = (col + 0.5 - g.det_cols / 2) * g.col_spacing
    dist = np.abs(X * math.cos(0.4) + Y * math.sin(0.4) - offset)
    assert dist.max() <= math.sqrt(2) + 1e-9


def test_linearity():
    g = toy_geometry()
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal(g.vol_dims), rng.standard_normal(g.vol_dims)
    np.testing.assert_allclose(project(g, 2 * a - 3 * b), 2 * project(g, a) - 3 * project(g, b), atol=1e-12)


def test_z_translation_shifts_rows():
    g = toy_geometry(8, 3)
    rng = np.random.default_rng(2)
    x = np.zeros(g.vol_dims)
    x[1:5] = rng.uniform(size=(4, 8, 8))
    shifted = np.roll(x, 2, axis=0)
    np.testing.assert_allclose(project(g, shifted), np.roll(project(g, x), 2, axis=1), atol=1e-12)


def test_projector_rejects_wrong_dims():
    P = ParallelBeamProjector(toy_geometry())
    with pytest.raises(ValueError):
        P.forward(np.zeros((8, 8, 7)))
    with pytest.raises(ValueError):
        P.adjoint(np.zeros((1, 2, 3)))


def test_noise_vanishes_at_high_dose():
    p = np.random.default_rng(3).uniform(0, 2, (10, 10, 100))
    noisy = simulate_low_dose(p, PhotonNoiseModel(1e6, seed=4))
    assert np.mean(np.abs(noisy - p)) < 0.01


def test_zero_attenuation_counts_are_poisson():
    n0, N = 1000.0, 10**4
    noisy = simulate_low_dose(np.zeros((1, 100, 100)), PhotonNoiseModel(n0, seed=5))
    counts = np.round(n0 * np.exp(-noisy))
    assert abs(counts.mean() - n0) < 3 * math.sqrt(n0) / math.sqrt(N)


def test_noise_determinism_and_validation():
    p = np.random.default_rng(6).uniform(0, 1, (2, 3, 4))
    m = PhotonNoiseModel(50, seed=7)
    np.testing.assert_array_equal(simulate_low_dose(p, m), simulate_low_dose(p, m))
    assert np.all(np.isfinite(simulate_low_dose(np.full((2, 2, 2), 50.0), m)))
    with pytest.raises(ValueError):
        PhotonNoiseModel(0)
    with pytest.raises(ValueError):
        simulate_low_dose(-p, m)


def test_sinogram_round_trip(tmp_path):
    g = toy_geometry()
    sino = np.random.default_rng(8).uniform(size=g.sino_dims)
    save_sinogram(tmp_path / "s.sino", sino, g, photons=1000)
    back, g2, header = load_sinogram(tmp_path / "s.sino")
    assert g2 == g and header["photons"] == 1000
    np.testing.assert_array_equal(back, sino.astype(np.float32))
    with pytest.raises(ValueError):
        save_sinogram(tmp_path / "t.sino", sino[:1], g)
    with pytest.raises(FileNotFoundError):
        load_sinogram(tmp_path / "missing.sino")
