import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from jetfit.data_io import ShapeSpec, generate_shape
from jetfit.evaluation import angle_error_unoriented
from jetfit.neighborhood import PointCloud
from jetfit.pipeline import WeightedJetFitter, fit_cloud, placeholder_patch
from jetfit.weightnet import WeightNetConfig


def _magnitudes(curvatures):
    return np.sort(np.abs(curvatures), axis=1)[:, ::-1]


def test_plane_recovery(plane_cloud, rng):
    queries = rng.choice(len(plane_cloud), size=50, replace=False)
    result = fit_cloud(plane_cloud, queries, k=64, order=3)
    errors = angle_error_unoriented(result.normals, plane_cloud.gt_normals[queries])
    assert errors.max() < 1e-4
    assert np.abs(result.curvatures).max() < 1e-6
    assert not result.degenerate.any()


def test_paraboloid_curvature_recovery(rng):
    cloud = generate_shape(ShapeSpec("paraboloid", sample_count=20000, seed=2))
    inner = np.flatnonzero(np.abs(cloud.positions[:, :2]).max(axis=1) < 0.6)
    queries = rng.choice(inner, size=40, replace=False)
    result = fit_cloud(cloud, queries, k=64, order=3)
    np.testing.assert_allclose(_magnitudes(result.curvatures), _magnitudes(cloud.gt_curvatures[queries]), rtol=0.01)


@pytest.mark.parametrize("radius", [0.5, 1.0, 2.0])
def test_sphere_curvature_recovery(radius):
    cloud = generate_shape(ShapeSpec("sphere", params={"radius": radius}, sample_count=40000, seed=4))
    queries = np.arange(0, 40000, 1333)
    result = fit_cloud(cloud, queries, k=256, order=3)
    relative = np.abs(np.abs(result.curvatures) - 1.0 / radius) * radius
    assert relative.max() < 0.02
    assert angle_error_unoriented(result.normals, cloud.gt_normals[queries]).max() < 0.5


def test_rigid_and_scale_equivariance(rng):
    cloud = generate_shape(ShapeSpec("torus", sample_count=5000, seed=8))
    rotation = Rotation.random(random_state=3)
    scale = 3.0
    moved = PointCloud(positions=scale * rotation.apply(cloud.positions) + [1.0, -2.0, 0.5])
    queries = rng.choice(len(cloud), size=25, replace=False)
    original = fit_cloud(cloud, queries, k=64, order=3)
    transformed = fit_cloud(moved, queries, k=64, order=3)

    rotated_normals = rotation.apply(original.normals)
    assert np.abs(np.cross(rotated_normals, transformed.normals)).max() < 1e-8
    np.testing.assert_allclose(_magnitudes(transformed.curvatures) * scale, _magnitudes(original.curvatures),
                               rtol=1e-6, atol=1e-9)
    np.testing.assert_array_equal(transformed.neighbor_indices, original.neighbor_indices)


def test_degenerate_patches_are_flagged():
    rng = np.random.default_rng(0)
    cloud = PointCloud(positions=np.vstack([np.zeros((6, 3)), rng.normal(size=(60, 3))]))
    result = fit_cloud(cloud, [0, 30], k=6, order=2)
    np.testing.assert_array_equal(result.degenerate, [True, False])
    assert np.isnan(result.normals[0]).all()
    assert np.isnan(result.curvatures[0]).all()
    np.testing.assert_array_equal(result.weights[0], 0.0)
    assert np.isfinite(result.normals[1]).all()
    np.testing.assert_array_equal(result.weights[1], 1.0)


def test_order_one_has_no_curvature(plane_cloud):
    result = fit_cloud(plane_cloud, [0, 1, 2], k=16, order=1)
    assert np.isnan(result.curvatures).all()
    assert np.isfinite(result.normals).all()


def test_principal_directions_are_world_tangents(rng):
    cloud = generate_shape(ShapeSpec("cylinder", sample_count=8000, seed=1, rotate=True))
    queries = rng.choice(len(cloud), size=20, replace=False)
    result = fit_cloud(cloud, queries, k=64, order=3)
    for normal, (dir1, dir2) in zip(result.normals, result.directions):
        assert abs(normal @ dir1) < 1e-8
        assert abs(normal @ dir2) < 1e-8
        assert abs(dir1 @ dir2) < 1e-8


def test_learned_fitter_on_cloud(plane_cloud):
    fitter = WeightedJetFitter.create(0, WeightNetConfig.tiny(), order=2)
    fitter.train()
    result = fit_cloud(plane_cloud, np.arange(10), k=32, fitter=fitter)
    assert fitter.training
    assert result.weights.shape == (10, 32)
    assert (result.weights > fitter.net.epsilon).all()
    assert (result.weights <= 1 + 2 * fitter.net.epsilon).all()
    assert angle_error_unoriented(result.normals, plane_cloud.gt_normals[:10]).max() < 1e-3
    assert result.runtime_ms_per_point > 0


def test_fitter_forward_is_differentiable(rng):
    fitter = WeightedJetFitter.create(0, WeightNetConfig.tiny(), order=2, dtype=torch.float64).eval()
    points = torch.as_tensor(placeholder_patch(24) + 0.05 * rng.normal(size=(24, 3)))[None]
    output = fitter(points)
    output.normals[:, 0].sum().backward()
    grads = [p.grad for p in fitter.net.parameters() if p.grad is not None]
    assert grads and any(float(g.abs().max()) > 0 for g in grads)


def test_placeholder_patch_is_well_posed():
    points = placeholder_patch(64)
    np.testing.assert_array_equal(points[0], 0.0)
    assert np.linalg.norm(points, axis=1).max() == pytest.approx(1.0)
    assert np.linalg.matrix_rank(points[:, :2]) == 2
