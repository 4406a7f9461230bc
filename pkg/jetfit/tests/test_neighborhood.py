import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from jetfit.errors import InvalidInputError, DegeneratePatchError
from jetfit.neighborhood import (
    PointCloud, Patch, knn, knn_batch, normalize_patch, extract_patches, denormalize_normal, denormalize_curvature
)


def _brute_force_knn(positions, query_index, k):
    distances = np.linalg.norm(positions - positions[query_index], axis=1)
    order = np.lexsort((np.arange(len(positions)), distances))
    return order[:k]


def _anisotropic_blob(rng, n=100):
    return rng.normal(size=(n, 3)) * np.array([1.0, 0.5, 0.1])


# ======================================================================================
# PointCloud


def test_point_cloud_validation():
    with pytest.raises(InvalidInputError):
        PointCloud(positions=np.zeros((4, 2)))
    with pytest.raises(InvalidInputError):
        PointCloud(positions=np.zeros((0, 3)))
    with pytest.raises(InvalidInputError):
        PointCloud(positions=np.zeros((3, 3)), gt_normals=np.ones((3, 3)))
    with pytest.raises(InvalidInputError):
        PointCloud(positions=np.zeros((3, 3)), eval_indices=[0, 3])


def test_subset_keeps_ground_truth_aligned(rng):
    positions = rng.normal(size=(10, 3))
    normals = np.tile([0.0, 0.0, 1.0], (10, 1))
    curvatures = np.arange(20.0).reshape(10, 2)
    cloud = PointCloud(positions=positions, gt_normals=normals, gt_curvatures=curvatures, eval_indices=[1, 4, 7])
    sub = cloud.subset([0, 4, 5, 7])
    np.testing.assert_array_equal(sub.positions, positions[[0, 4, 5, 7]])
    np.testing.assert_array_equal(sub.gt_curvatures, curvatures[[0, 4, 5, 7]])
    # point 1 was dropped; 4 and 7 are now rows 1 and 3
    np.testing.assert_array_equal(sub.eval_indices, [1, 3])
    np.testing.assert_array_equal(cloud.query_indices, [1, 4, 7])
    assert len(PointCloud(positions=positions).query_indices) == 10


# ======================================================================================
# k nearest neighbors


def test_knn_collinear_examples():
    cloud = PointCloud(positions=[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    np.testing.assert_array_equal(knn(cloud, 1, 3), [1, 0, 2])
    np.testing.assert_array_equal(knn(cloud, 2, 1), [2])
    with pytest.raises(InvalidInputError):
        knn(cloud, 0, 4)
    with pytest.raises(InvalidInputError):
        knn(cloud, 0, 0)


def test_knn_query_ranks_ahead_of_its_duplicates(rng):
    cloud = PointCloud(positions=[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    np.testing.assert_array_equal(knn(cloud, 1, 1), [1])
    np.testing.assert_array_equal(knn(cloud, 1, 3), [1, 0, 2])
    np.testing.assert_array_equal(knn_batch(cloud, [1, 0], 2), [[1, 0], [0, 1]])

    # tree-backed path: every point duplicated once
    base = rng.uniform(size=(600, 3))
    large = PointCloud(positions=np.vstack([base, base]))
    for query in (5, 605, 1199):
        neighbors = knn(large, query, 8)
        assert neighbors[0] == query
        assert neighbors[1] == (query + 600) % 1200
    batch = knn_batch(large, [5, 605, 1199], 8)
    np.testing.assert_array_equal(batch[:, 0], [5, 605, 1199])


def test_knn_matches_exhaustive_scan(rng):
    cloud = PointCloud(positions=rng.uniform(size=(1000, 3)))
    for query in rng.choice(1000, size=20, replace=False):
        np.testing.assert_array_equal(knn(cloud, query, 256), _brute_force_knn(cloud.positions, query, 256))
    queries = np.arange(0, 1000, 50)
    expected = np.stack([_brute_force_knn(cloud.positions, q, 64) for q in queries])
    np.testing.assert_array_equal(knn_batch(cloud, queries, 64), expected)


def test_knn_tie_break_on_grid():
    # grid points have many equidistant neighbors
    grid = np.stack(np.meshgrid(np.arange(12.0), np.arange(12.0), np.arange(12.0), indexing="ij"), -1).reshape(-1, 3)
    cloud = PointCloud(positions=grid)
    query = 6 * 144 + 6 * 12 + 6
    for k in (7, 10, 19, 23, 27):
        np.testing.assert_array_equal(knn(cloud, query, k), _brute_force_knn(grid, query, k))
    for k in (10, 19):
        np.testing.assert_array_equal(knn_batch(cloud, [query], k)[0], _brute_force_knn(grid, query, k))


# ======================================================================================
# Patch normalization


def _check_patch_invariants(patch: Patch):
    np.testing.assert_allclose(patch.local_points[0], 0.0, atol=1e-12)
    assert np.linalg.norm(patch.local_points, axis=1).max() == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(patch.basis @ patch.basis.T, np.eye(3), atol=1e-10)
    assert np.linalg.det(patch.basis) == pytest.approx(1.0, abs=1e-10)


def test_normalize_planar_patch(rng):
    positions = np.column_stack([rng.uniform(-1, 1, size=(50, 2)), np.full(50, 5.0)])
    cloud = PointCloud(positions=positions)
    patch = normalize_patch(cloud, knn(cloud, 0, 30), 0)
    _check_patch_invariants(patch)
    assert abs(patch.basis[2, 2]) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(patch.local_points[:, 2], 0.0, atol=1e-9)


def test_normalize_patch_rotation_equivariance(rng):
    blob = _anisotropic_blob(rng)
    rotation = Rotation.random(random_state=7).as_matrix()
    neighbors = np.arange(len(blob))
    patch = normalize_patch(PointCloud(positions=blob), neighbors, 0)
    rotated = normalize_patch(PointCloud(positions=blob @ rotation.T), neighbors, 0)
    _check_patch_invariants(patch)
    _check_patch_invariants(rotated)
    # same local coordinates up to per-axis sign flips
    np.testing.assert_allclose(np.abs(rotated.local_points), np.abs(patch.local_points), atol=1e-9)
    assert rotated.scale == pytest.approx(patch.scale, rel=1e-12)


def test_normalize_patch_degenerate():
    coincident = PointCloud(positions=np.ones((6, 3)))
    with pytest.raises(DegeneratePatchError):
        normalize_patch(coincident, np.arange(6), 0)
    line = PointCloud(positions=np.outer(np.arange(6.0), [1.0, 2.0, 3.0]))
    with pytest.raises(DegeneratePatchError):
        normalize_patch(line, np.arange(6), 0)


def test_reference_normal_orients_basis(rng):
    positions = np.column_stack([rng.uniform(-1, 1, size=(40, 2)), np.zeros(40)])
    cloud = PointCloud(positions=positions)
    for reference in ([0.0, 0.0, 1.0], [0.0, 0.0, -1.0]):
        patch = normalize_patch(cloud, knn(cloud, 0, 20), 0, reference_normal=reference)
        assert patch.basis[:, 2] @ np.array(reference) > 0
        assert np.linalg.det(patch.basis) == pytest.approx(1.0)


def test_extract_patches_matches_normalize_patch(rng):
    cloud = PointCloud(positions=rng.normal(size=(300, 3)) * [1.0, 1.0, 0.2])
    queries = np.array([0, 17, 150, 299])
    batch = extract_patches(cloud, queries, 32)
    assert not batch.degenerate.any()
    for i, query in enumerate(queries):
        single = normalize_patch(cloud, knn(cloud, query, 32), query)
        np.testing.assert_allclose(np.abs(batch.local_points[i]), np.abs(single.local_points), atol=1e-10)
        np.testing.assert_allclose(np.abs(batch.bases[i]), np.abs(single.basis), atol=1e-10)
        assert batch.patch(i).scale == pytest.approx(single.scale)


def test_extract_patches_flags_degenerate(rng):
    positions = np.vstack([np.zeros((5, 3)), rng.normal(size=(40, 3))])
    batch = extract_patches(PointCloud(positions=positions), [0, 10], 5)
    np.testing.assert_array_equal(batch.degenerate, [True, False])
    assert np.isfinite(batch.local_points).all()


# ======================================================================================
# Back to world frame


def test_denormalize_normal():
    identity = Patch(local_points=np.zeros((3, 3)), query_index=0, scale=1.0, basis=np.eye(3),
                     query_world=np.zeros(3))
    np.testing.assert_array_equal(denormalize_normal(identity, [0.0, 0.6, 0.8]), [0.0, 0.6, 0.8])

    quarter_turn = Rotation.from_euler("x", 90, degrees=True).as_matrix()
    rotated = Patch(local_points=np.zeros((3, 3)), query_index=0, scale=1.0, basis=quarter_turn,
                    query_world=np.zeros(3))
    np.testing.assert_allclose(denormalize_normal(rotated, [0.0, 0.0, 1.0]), [0.0, -1.0, 0.0], atol=1e-15)


def test_plane_normal_round_trip(rng):
    normal = np.array([1.0, -2.0, 2.0]) / 3.0
    tangent = np.linalg.svd(normal[None])[2][1:]
    positions = rng.uniform(-1, 1, size=(60, 2)) @ tangent + 4.0
    cloud = PointCloud(positions=positions)
    patch = normalize_patch(cloud, knn(cloud, 0, 40), 0)
    world = denormalize_normal(patch, [0.0, 0.0, 1.0])
    assert abs(world @ normal) == pytest.approx(1.0, abs=1e-9)


def test_denormalize_curvature():
    patch = Patch(local_points=np.zeros((3, 3)), query_index=0, scale=1.0, basis=np.eye(3), query_world=np.zeros(3))
    assert denormalize_curvature(patch, 0.7) == 0.7
    scaled = Patch(local_points=np.zeros((3, 3)), query_index=0, scale=4.0, basis=np.eye(3), query_world=np.zeros(3))
    assert denormalize_curvature(scaled, 0.0) == 0.0
    assert denormalize_curvature(scaled, 2.0) == 0.5
