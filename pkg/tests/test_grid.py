import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from foj3d.grid import (
    PatchAccumulator,
    Volume,
    aggregate_patches,
    build_patch_grid,
    extract_patch,
    extract_patches,
    load_volume,
    save_volume,
)


def brute_overlap(dims, grid):
    count = np.zeros(dims, dtype=int)
    R = grid.patch_size
    for z, y, x in grid.origins:
        count[z:z + R, y:y + R, x:x + R] += 1
    return count


def test_single_patch_grids():
    g = build_patch_grid((8, 8, 8), 8, 8)
    assert g.origins.tolist() == [[0, 0, 0]]
    assert np.all(g.overlap_count == 1)
    assert len(build_patch_grid((10, 10, 10), 10, 2)) == 1


def test_twelve_cube_grid_counts():
    g = build_patch_grid((12, 12, 12), 10, 2)
    assert len(g) == 8
    assert g.axis_origins == [[0, 2]] * 3
    oracle = brute_overlap((12, 12, 12), g)
    np.testing.assert_array_equal(g.overlap_count, oracle)
    assert g.overlap_count[11, 11, 11] == 1
    assert g.overlap_count[5, 5, 5] == 8


def test_final_origin_is_clamped():
    g = build_patch_grid((13, 10, 10), 10, 2)
    assert g.axis_origins[0] == [0, 2, 3]


def test_grid_errors():
    with pytest.raises(ValueError, match="patch larger than volume"):
        build_patch_grid((8, 12, 12), 10, 2)
    with pytest.raises(ValueError):
        build_patch_grid((12, 12, 12), 10, 0)
    with pytest.raises(ValueError, match="stride"):
        build_patch_grid((12, 12, 12), 4, 5)


@given(dims=st.tuples(*[st.integers(3, 9)] * 3), R=st.integers(1, 3), s=st.integers(1, 3))
def test_overlap_count_matches_containment(dims, R, s):
    s = min(s, R)
    g = build_patch_grid(dims, R, s)
    oracle = brute_overlap(dims, g)
    np.testing.assert_array_equal(g.overlap_count, oracle)
    assert g.overlap_count.min() >= 1


def test_extract_constant_and_shift():
    vol = Volume(np.full((6, 6, 6), 3.0))
    g = build_patch_grid(vol.dims, 4, 2)
    for i in range(len(g)):
        assert np.all(extract_patch(vol, g, i) == 3.0)
    z, y, x = np.meshgrid(*[np.arange(6)] * 3, indexing="ij")
    vol = Volume(x.astype(float))
    i = int(np.flatnonzero((g.origins == [0, 0, 2]).all(1))[0])
    patch = extract_patch(vol, g, i)
    np.testing.assert_array_equal(patch[0, 0], np.arange(4) + 2)
    with pytest.raises(IndexError):
        extract_patch(vol, g, len(g))


def test_extract_matches_slicing():
    data = np.random.default_rng(0).standard_normal((12, 12, 12))
    g = build_patch_grid(data.shape, 10, 2)
    patches = extract_patches(data, g)
    for p, (z, y, x) in zip(patches, g.origins):
        np.testing.assert_array_equal(p, data[z:z + 10, y:y + 10, x:x + 10])


def test_aggregate_means():
    g = build_patch_grid((12, 12, 12), 10, 2)
    out = aggregate_patches(np.full((len(g), 10, 10, 10), 2.5), g)
    np.testing.assert_allclose(out, 2.5, rtol=0, atol=1e-12)
    g2 = build_patch_grid((4, 4, 4), 4, 4)
    vals = np.stack([np.full((4, 4, 4), 1.0)])
    np.testing.assert_allclose(aggregate_patches(vals, g2), 1.0)
    with pytest.raises(ValueError):
        aggregate_patches(np.zeros((3, 10, 10, 10)), g)


def test_two_fully_overlapping_patches_average():
    # a 4^3 volume and R=4 gives one origin; duplicate it to get two coincident patches
    g = build_patch_grid((4, 4, 4), 4, 4)
    g.origins = np.vstack([g.origins, g.origins])
    out = aggregate_patches(np.stack([np.full((4, 4, 4), 1.0), np.full((4, 4, 4), 3.0)]), g)
    np.testing.assert_allclose(out, 2.0)


def test_aggregate_matches_scatter_oracle():
    rng = np.random.default_rng(1)
    g = build_patch_grid((12, 12, 12), 10, 2)
    vals = rng.standard_normal((len(g), 10, 10, 10))
    total = np.zeros((12, 12, 12))
    count = np.zeros((12, 12, 12))
    for v, (z, y, x) in zip(vals, g.origins):
        total[z:z + 10, y:y + 10, x:x + 10] += v
        count[z:z + 10, y:y + 10, x:x + 10] += 1
    np.testing.assert_allclose(aggregate_patches(vals, g), total / count, rtol=0, atol=1e-12)


@given(seed=st.integers(0, 2**16), s=st.integers(1, 4))
def test_round_trip_identity(seed, s):
    data = np.random.default_rng(seed).standard_normal((9, 8, 7))
    g = build_patch_grid(data.shape, 4, s)
    np.testing.assert_allclose(aggregate_patches(extract_patches(data, g), g), data, rtol=0, atol=1e-12)


def test_aggregate_is_linear():
    rng = np.random.default_rng(2)
    g = build_patch_grid((8, 8, 8), 4, 2)
    a, b = rng.standard_normal((2, len(g), 4, 4, 4))
    np.testing.assert_allclose(aggregate_patches(2 * a + b, g), 2 * aggregate_patches(a, g) + aggregate_patches(b, g), atol=1e-12)


def test_accumulator_matches_aggregate():
    rng = np.random.default_rng(3)
    g = build_patch_grid((8, 8, 8), 4, 2)
    vals = rng.standard_normal((len(g), 64))
    acc = PatchAccumulator(g)
    for idx in np.array_split(np.arange(len(g)), 5):
        acc.add(idx, vals[idx])
    np.testing.assert_allclose(acc.mean(), aggregate_patches(vals, g), atol=1e-12)


def test_volume_io_round_trip(tmp_path):
    data = np.random.default_rng(4).standard_normal((3, 4, 5)).astype(np.float32).astype(np.float64)
    save_volume(tmp_path / "v.vol", Volume(data, (1.0, 2.0, 3.0)))
    back = load_volume(tmp_path / "v.vol")
    np.testing.assert_array_equal(back.data, data)
    assert back.spacing == (1.0, 2.0, 3.0)
    assert (tmp_path / "v.vol.json").exists()
    with pytest.raises(FileNotFoundError, match="missing.vol"):
        load_volume(tmp_path / "missing.vol")


def test_volume_rejects_non_finite():
    with pytest.raises(ValueError):
        Volume(np.array([[[np.nan]]]))
