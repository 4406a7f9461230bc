import numpy as np
import pytest

from jetfit.data_io import (
    DATA_ROOT_ENV, ShapeSpec, generate_shape, generate_corpus, synthetic_corpus, load_pcpnet, save_pcpnet,
    load_manifest, load_clouds, add_gaussian_noise, subsample_density, add_outliers
)
from jetfit.errors import InvalidInputError, PcpnetFormatError, PcpnetParseError
from jetfit.neighborhood import PointCloud


@pytest.fixture(autouse=True)
def no_data_root(monkeypatch):
    monkeypatch.delenv(DATA_ROOT_ENV, raising=False)


def _nearest(cloud, point):
    return int(np.argmin(np.linalg.norm(cloud.positions - point, axis=1)))


# ======================================================================================
# PCPNet files


def test_load_minimal_shape(tmp_path):
    base = tmp_path / "tiny"
    (tmp_path / "tiny.xyz").write_text("0 0 0\n1 0 0\n0 1 0\n")
    (tmp_path / "tiny.normals").write_text("0 0 2\n0 0 1\n0 0 1\n")
    cloud = load_pcpnet(base)
    assert len(cloud) == 3
    assert cloud.name == "tiny"
    np.testing.assert_array_equal(cloud.gt_normals[0], [0.0, 0.0, 1.0])
    assert cloud.gt_curvatures is None
    assert len(cloud.query_indices) == 3


def test_load_rejects_misaligned_siblings(tmp_path):
    (tmp_path / "s.xyz").write_text("0 0 0\n1 0 0\n0 1 0\n")
    (tmp_path / "s.normals").write_text("0 0 1\n0 0 1\n")
    with pytest.raises(PcpnetFormatError):
        load_pcpnet(tmp_path / "s")

    (tmp_path / "t.xyz").write_text("0 0 0\n1 0\n")
    with pytest.raises(PcpnetFormatError):
        load_pcpnet(tmp_path / "t")

    (tmp_path / "u.xyz").write_text("0 0 0\n1 0 0\n")
    (tmp_path / "u.pidx").write_text("0\n2\n")
    with pytest.raises(PcpnetFormatError):
        load_pcpnet(tmp_path / "u")

    with pytest.raises(FileNotFoundError):
        load_pcpnet(tmp_path / "missing")


def test_parse_error_reports_line(tmp_path):
    (tmp_path / "p.xyz").write_text("0 0 0\n\n1 0 0\n0 abc 0\n")
    with pytest.raises(PcpnetParseError) as error:
        load_pcpnet(tmp_path / "p")
    assert error.value.line_number == 4
    assert "abc" in str(error.value)


def test_save_and_reload(tmp_path):
    cloud = generate_shape(ShapeSpec("torus", sample_count=500, seed=2, eval_count=50, rotate=True))
    written = save_pcpnet(cloud, tmp_path / "shapes" / "torus")
    assert sorted(path.suffix for path in written) == [".curv", ".normals", ".pidx", ".xyz"]
    reloaded = load_pcpnet(tmp_path / "shapes" / "torus")
    np.testing.assert_allclose(reloaded.positions, cloud.positions, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(reloaded.gt_curvatures, cloud.gt_curvatures, rtol=1e-9)
    np.testing.assert_array_equal(reloaded.eval_indices, cloud.eval_indices)


def test_save_skips_missing_ground_truth(tmp_path):
    written = save_pcpnet(PointCloud(positions=np.eye(3)), tmp_path / "bare")
    assert [path.name for path in written] == ["bare.xyz"]
    assert not (tmp_path / "bare.normals").exists()
    with pytest.raises(InvalidInputError):
        save_pcpnet(PointCloud(positions=np.eye(3)), tmp_path / "bare", what=("ply",))


def test_manifest_resolution(tmp_path, monkeypatch):
    manifest = tmp_path / "lists" / "set.txt"
    manifest.parent.mkdir()
    manifest.write_text(f"# comment\nshape_a\n\n{tmp_path / 'elsewhere' / 'shape_b'}\n")
    assert load_manifest(manifest) == [tmp_path / "lists" / "shape_a", tmp_path / "elsewhere" / "shape_b"]
    assert load_manifest(manifest, data_root=tmp_path)[0] == tmp_path / "shape_a"

    monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path / "root"))
    assert load_manifest(manifest)[0] == tmp_path / "root" / "shape_a"


def test_generated_corpus_loads_back(tmp_path):
    manifest = generate_corpus(tmp_path / "corpus", kinds=("plane", "sphere"), sample_count=300, seed=4)
    clouds = load_clouds(manifest)
    assert [cloud.name for cloud in clouds] == ["plane_4", "sphere_4"]
    assert all(cloud.has_normals and cloud.gt_curvatures is not None for cloud in clouds)


# ======================================================================================
# Synthetic shapes


def test_sphere_ground_truth():
    cloud = generate_shape(ShapeSpec("sphere", params={"radius": 2.0}, sample_count=1000, seed=0, rotate=True))
    np.testing.assert_allclose(np.linalg.norm(cloud.positions, axis=1), 2.0)
    np.testing.assert_allclose(np.einsum("ij,ij->i", cloud.positions, cloud.gt_normals), 2.0)
    np.testing.assert_allclose(cloud.gt_curvatures, 0.5)


def test_flat_and_cylindrical_ground_truth():
    plane = generate_shape(ShapeSpec("plane", sample_count=200))
    np.testing.assert_array_equal(plane.gt_curvatures, 0.0)
    np.testing.assert_array_equal(plane.positions[:, 2], 0.0)
    cylinder = generate_shape(ShapeSpec("cylinder", params={"radius": 0.5}, sample_count=200))
    np.testing.assert_allclose(cylinder.gt_curvatures, np.tile([2.0, 0.0], (200, 1)))


def test_height_field_curvatures_at_origin():
    paraboloid = generate_shape(ShapeSpec("paraboloid", sample_count=20000, seed=1))
    apex = _nearest(paraboloid, [0.0, 0.0, 0.0])
    # normal points up, the surface bends toward it
    np.testing.assert_allclose(paraboloid.gt_curvatures[apex], [-1.0, -1.0], atol=1e-2)
    np.testing.assert_allclose(paraboloid.gt_normals[apex], [0.0, 0.0, 1.0], atol=2e-2)

    saddle = generate_shape(ShapeSpec("saddle", sample_count=20000, seed=1))
    np.testing.assert_allclose(saddle.gt_curvatures[_nearest(saddle, [0.0, 0.0, 0.0])], [1.0, -1.0], atol=1e-2)


def test_torus_outer_equator():
    cloud = generate_shape(ShapeSpec("torus", sample_count=20000, seed=5))
    outer = int(np.argmax(np.linalg.norm(cloud.positions[:, :2], axis=1)))
    np.testing.assert_allclose(cloud.gt_curvatures[outer], [2.0, 0.4], rtol=1e-2)
    assert (cloud.gt_curvatures[:, 0] >= cloud.gt_curvatures[:, 1]).all()


def test_shape_spec_validation():
    with pytest.raises(InvalidInputError):
        ShapeSpec("klein_bottle")
    with pytest.raises(InvalidInputError):
        ShapeSpec("sphere", params={"size": 1.0})
    with pytest.raises(InvalidInputError):
        ShapeSpec("torus", params={"R": 1.0, "r": 1.0})
    with pytest.raises(InvalidInputError):
        ShapeSpec("plane", sample_count=10, eval_count=11)


def test_generation_is_seeded():
    spec = ShapeSpec("corner", sample_count=300, seed=9, eval_count=30, rotate=True)
    first, second = generate_shape(spec), generate_shape(spec)
    np.testing.assert_array_equal(first.positions, second.positions)
    np.testing.assert_array_equal(first.eval_indices, second.eval_indices)
    assert len(np.unique(first.eval_indices)) == 30
    corpus = synthetic_corpus(kinds=("plane", "plane"), sample_count=100, seed=1)
    assert not np.array_equal(corpus[0].positions, corpus[1].positions)


# ======================================================================================
# Corruptions


def test_gaussian_noise_statistics():
    clean = generate_shape(ShapeSpec("plane", sample_count=100000, seed=0))
    assert add_gaussian_noise(clean, 0.0) is clean
    noisy = add_gaussian_noise(clean, 0.012, seed=3)
    residual = noisy.positions - clean.positions
    sigma = 0.012 * clean.bbox_diagonal
    assert residual.std() == pytest.approx(sigma, rel=0.05)
    assert abs(residual.mean()) < 0.01 * sigma
    np.testing.assert_array_equal(noisy.gt_normals, clean.gt_normals)
    np.testing.assert_array_equal(add_gaussian_noise(clean, 0.012, seed=3).positions, noisy.positions)
    with pytest.raises(InvalidInputError):
        add_gaussian_noise(clean, -0.1)


def test_density_gradient():
    clean = generate_shape(ShapeSpec("plane", sample_count=100000, seed=0))
    sparse, kept = subsample_density(clean, "gradient", {"p_min": 0.1, "p_max": 1.0, "axis": 0})
    x = clean.positions[:, 0]
    upper = (x[kept] > 0).sum() / (x > 0).sum()
    lower = (x[kept] <= 0).sum() / (x <= 0).sum()
    assert upper == pytest.approx(0.775, rel=0.05)
    assert lower == pytest.approx(0.325, rel=0.05)
    np.testing.assert_array_equal(sparse.positions, clean.positions[kept])

    unchanged, kept = subsample_density(clean, "gradient", {"p_min": 1.0, "p_max": 1.0})
    assert len(unchanged) == len(clean)


def test_density_stripes():
    clean = generate_shape(ShapeSpec("plane", sample_count=50000, seed=0))
    striped, kept = subsample_density(clean, "stripes", {"bands": 5, "removed_fraction": 0.3, "axis": 1})
    assert len(striped) / len(clean) == pytest.approx(0.7, abs=0.02)
    with pytest.raises(InvalidInputError):
        subsample_density(clean, "stripes", {"removed_fraction": 1.0})
    with pytest.raises(InvalidInputError):
        subsample_density(clean, "checkerboard")


def test_outliers():
    clean = generate_shape(ShapeSpec("sphere", sample_count=1000, seed=0))
    assert add_outliers(clean, 0.0) is clean
    corrupted = add_outliers(clean, 0.1, seed=2)
    assert len(corrupted) == 1100
    assert corrupted.outlier_mask.sum() == 100
    assert np.isnan(corrupted.gt_normals[1000:]).all()
    np.testing.assert_array_equal(corrupted.query_indices, np.arange(1000))
    margin = 0.1 * clean.bbox_diagonal
    assert (np.abs(corrupted.positions) <= 1.0 + margin + 1e-12).all()
