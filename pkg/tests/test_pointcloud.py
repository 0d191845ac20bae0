import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from foj3d.pointcloud import (
    PointCloud,
    VoxelTransform,
    add_outlier_noise,
    add_spread_noise,
    bbox_diagonal,
    chamfer_l2,
    devoxelize_topk,
    outlier_count,
    read_xyz,
    synthetic_surface,
    voxel_counts,
    voxel_transform,
    voxelize,
    write_xyz,
)


def random_cloud(seed=0, n=200):
    return PointCloud(np.random.default_rng(seed).uniform(-3, 5, (n, 3)))


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud([[0, 0, np.nan]])
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3))).bounds


def test_single_point_one_voxel():
    vol, _ = voxelize(PointCloud([[1.0, 2.0, 3.0]]), 8)
    assert np.count_nonzero(vol.data) == 1 and vol.data.max() == 1.0


def test_coincident_points_one_voxel():
    vol, _ = voxelize(PointCloud([[1.0, 2.0, 3.0]] * 2), 8)
    assert np.count_nonzero(vol.data) == 1 and vol.data.max() == 1.0


def test_counts_match_hash_map_oracle():
    pc = random_cloud(1, 10**4)
    tr = voxel_transform(pc, 16)
    counts = voxel_counts(pc, tr)
    oracle = {}
    for p in pc.points:
        key = tuple(min(15, max(0, int(math.floor((p[a] - tr.origin[a]) / tr.voxel_size)))) for a in (2, 1, 0))
        oracle[key] = oracle.get(key, 0) + 1
    assert counts.sum() == len(pc)
    for key, n in oracle.items():
        assert counts[key] == n
    assert np.count_nonzero(counts) == len(oracle)


def test_transform_has_margin():
    pc = random_cloud(2)
    tr = voxel_transform(pc, 10)
    idx = tr.index_of(pc.points)
    assert idx.min() == 1 and idx.max() == 8
    with pytest.raises(ValueError):
        voxel_transform(pc, 3)
    with pytest.raises(ValueError):
        voxelize(PointCloud(np.zeros((0, 3))))


def test_topk_unique_max():
    vol = np.zeros((4, 4, 4))
    vol[1, 2, 3] = 5.0
    tr = VoxelTransform(np.array([10.0, 20.0, 30.0]), 2.0, (4, 4, 4))
    top = devoxelize_topk(vol, 1, tr)
    np.testing.assert_allclose(top.cloud.points, [[10 + 7.0, 20 + 5.0, 30 + 3.0]])
    assert top.shortfall == 0


def test_topk_ties_in_index_order():
    top = devoxelize_topk(np.ones((2, 2, 2)), 3)
    np.testing.assert_allclose(top.cloud.points, [[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [0.5, 1.5, 0.5]])


def test_topk_matches_sort_oracle():
    vol = np.random.default_rng(3).integers(0, 20, (8, 8, 8)).astype(float)
    top = devoxelize_topk(vol, 500)
    keyed = sorted(((-v, i) for i, v in enumerate(vol.ravel()) if v > 0))[:500]
    zyx = np.array([np.unravel_index(i, vol.shape) for _, i in keyed])
    np.testing.assert_allclose(top.cloud.points, zyx[:, ::-1] + 0.5)


def test_topk_reports_shortfall():
    vol = np.zeros((3, 3, 3))
    vol[0, 0, 0] = 1
    top = devoxelize_topk(vol, 4)
    assert len(top.cloud) == 1 and top.shortfall == 3
    with pytest.raises(ValueError):
        devoxelize_topk(vol, 0)


def test_voxelize_topk_round_trip():
    pc = random_cloud(4, 300)
    vol, tr = voxelize(pc, 12)
    occupied = np.count_nonzero(vol.data)
    top = devoxelize_topk(vol, occupied, tr)
    expected = {tuple(np.round(c, 9)) for c in tr.centers(np.unique(tr.index_of(pc.points), axis=0))}
    assert {tuple(np.round(c, 9)) for c in top.cloud.points} == expected


@pytest.mark.parametrize("n,ratio,expected", [(10, 0.1, 2), (100, 0.3, 43), (100, 0.6, 150), (100, 0.9, 900)])
def test_outlier_count(n, ratio, expected):
    assert outlier_count(n, ratio) == expected


def test_outlier_noise_contract():
    pc = random_cloud(5, 1)
    np.testing.assert_array_equal(add_outlier_noise(pc, 0.0).points, pc.points)
    pc = random_cloud(6, 100)
    out = add_outlier_noise(pc, 0.3, seed=1)
    assert len(out) == 100 + outlier_count(100, 0.3)
    np.testing.assert_array_equal(out.points[:100], pc.points)
    np.testing.assert_array_equal(out.points, add_outlier_noise(pc, 0.3, seed=1).points)
    with pytest.raises(ValueError):
        add_outlier_noise(pc, 1.0)


def test_outlier_spread_scales_with_diagonal():
    pc = synthetic_surface(2000, 0)
    out = add_outlier_noise(pc, 0.5, seed=2)
    disp = out.points[2000:] - pc.points[np.random.default_rng(2).integers(0, 2000, 2000)]
    assert np.std(disp) == pytest.approx(0.05 * bbox_diagonal(pc), rel=0.1)


def test_spread_noise_contract():
    pc = random_cloud(7, 50)
    np.testing.assert_array_equal(add_spread_noise(pc, 0).points, pc.points)
    out = add_spread_noise(pc, 1000, pad=2.0, seed=3)
    assert len(out) == 1050
    lo, hi = pc.bounds
    assert np.all(out.points >= lo - 2.0) and np.all(out.points <= hi + 2.0)
    np.testing.assert_array_equal(out.points, add_spread_noise(pc, 1000, pad=2.0, seed=3).points)
    with pytest.raises(ValueError):
        add_spread_noise(pc, -1)


def test_chamfer_examples():
    a = random_cloud(8, 50)
    assert chamfer_l2(a, a) == 0.0
    assert chamfer_l2(PointCloud([[0, 0, 0]]), PointCloud([[1, 0, 0]])) == 2.0
    with pytest.raises(ValueError):
        chamfer_l2(a, PointCloud(np.zeros((0, 3))))


def test_chamfer_matches_brute_force():
    a, b = random_cloud(9, 500), random_cloud(10, 500)
    d2 = ((a.points[:, None, :] - b.points[None, :, :]) ** 2).sum(-1)
    oracle = d2.min(axis=1).mean() + d2.min(axis=0).mean()
    assert chamfer_l2(a, b) == pytest.approx(oracle, abs=1e-9)


@given(s1=st.integers(0, 10**6), s2=st.integers(0, 10**6))
def test_chamfer_symmetric_and_positive(s1, s2):
    a, b = random_cloud(s1, 20), random_cloud(s2, 30)
    assert chamfer_l2(a, b) == pytest.approx(chamfer_l2(b, a), rel=1e-12)
    assert chamfer_l2(a, b) > 0


def test_xyz_round_trip(tmp_path):
    pc = random_cloud(11, 20)
    write_xyz(tmp_path / "p.xyz", pc)
    np.testing.assert_allclose(read_xyz(tmp_path / "p.xyz").points, pc.points, rtol=1e-8)
    (tmp_path / "bad.xyz").write_text("1 2\n3 4\n")
    with pytest.raises(ValueError):
        read_xyz(tmp_path / "bad.xyz")
    with pytest.raises(FileNotFoundError):
        read_xyz(tmp_path / "none.xyz")


def test_synthetic_surface_scale():
    pc = synthetic_surface(5000, 1)
    lo, hi = pc.bounds
    assert 15 < float(np.max(hi - lo)) < 25
