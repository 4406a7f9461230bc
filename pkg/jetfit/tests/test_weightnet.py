import numpy as np
import pytest
import torch

from jetfit.errors import InvalidInputError, NumericalFaultError
from jetfit.neighborhood import PointCloud, normalize_patch, knn
from jetfit.weightnet import WeightNet, WeightNetConfig, init_params, forward

EPSILON = 1e-4


def _tiny_net(seed=0, randomize=True):
    net = init_params(seed, WeightNetConfig.tiny(), dtype=torch.float64)
    if randomize:
        generator = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            for module in net.modules():
                if isinstance(module, torch.nn.BatchNorm1d):
                    module.running_mean.normal_(0.0, 0.1, generator=generator)
                    module.running_var.uniform_(0.5, 2.0, generator=generator)
            for transform in (net.input_transform, net.feature_transform):
                transform.out.weight.normal_(0.0, 0.05, generator=generator)
    return net.eval()


def _patch_points(rng, k=32):
    points = rng.normal(size=(k, 3)) * [1.0, 1.0, 0.1]
    points -= points[0]
    return points / np.linalg.norm(points, axis=1).max()


def _as_numpy(tensor):
    return tensor.detach().numpy()


def _reference_weights(net: WeightNet, points: np.ndarray) -> np.ndarray:
    """Point-by-point evaluation of the encoder with plain numpy."""

    def batch_norm(norm, x):
        scale = _as_numpy(norm.weight) / np.sqrt(_as_numpy(norm.running_var) + norm.eps)
        return (x - _as_numpy(norm.running_mean)) * scale + _as_numpy(norm.bias)

    def shared(layers, x):
        for conv, norm in zip(layers.convs, layers.norms):
            x = np.maximum(batch_norm(norm, x @ _as_numpy(conv.weight)[:, :, 0].T + _as_numpy(conv.bias)), 0.0)
        return x

    def alignment(transform, x):
        feature = shared(transform.features, x).max(axis=0)
        for fc, norm in zip(transform.fcs, transform.norms):
            feature = np.maximum(batch_norm(norm, _as_numpy(fc.weight) @ feature + _as_numpy(fc.bias)), 0.0)
        matrix = _as_numpy(transform.out.weight) @ feature + _as_numpy(transform.out.bias)
        return matrix.reshape(transform.dim, transform.dim)

    x = points @ alignment(net.input_transform, points)
    x = shared(net.point_layers, x)
    local = x @ alignment(net.feature_transform, x)
    pooled = shared(net.feature_layers, local).max(axis=0)
    head = shared(net.head_layers, np.hstack([np.tile(pooled, (len(points), 1)), local]))
    logits = head @ _as_numpy(net.head_out.weight)[0, :, 0] + _as_numpy(net.head_out.bias)[0]
    return 1.0 / (1.0 + np.exp(-logits)) + net.epsilon


def test_init_params_deterministic():
    state = torch.random.get_rng_state()
    first = init_params(3, WeightNetConfig.tiny()).state_dict()
    second = init_params(3, WeightNetConfig.tiny()).state_dict()
    other = init_params(4, WeightNetConfig.tiny()).state_dict()
    assert torch.equal(torch.random.get_rng_state(), state)
    assert all(torch.equal(first[name], second[name]) for name in first)
    assert any(not torch.equal(first[name], other[name]) for name in first if first[name].is_floating_point())


def test_fresh_transforms_are_identity(rng):
    net = init_params(0, WeightNetConfig.tiny(), dtype=torch.float64).eval()
    output = forward(net, _patch_points(rng))
    assert torch.equal(output.transforms[0][0], torch.eye(3, dtype=torch.float64))
    assert torch.equal(output.transforms[1][0], torch.eye(8, dtype=torch.float64))


def test_weights_bounded(rng):
    net = init_params(1, WeightNetConfig.tiny()).eval()
    for _ in range(5):
        weights = forward(net, _patch_points(rng, k=int(rng.integers(2, 64)))).weights
        assert (weights > EPSILON).all()
        assert (weights <= 1 + EPSILON).all()


def test_full_network_shapes(rng):
    net = init_params(0).eval()
    output = forward(net, _patch_points(rng, k=48))
    assert output.weights.shape == (1, 48)
    assert [tuple(t.shape) for t in output.transforms] == [(1, 3, 3), (1, 64, 64)]
    assert output.global_feature.shape == (1, 1024)
    assert output.local_features.shape == (1, 48, 64)


def test_any_neighborhood_size(rng):
    net = _tiny_net()
    for k in (2, 7, 300):
        assert forward(net, _patch_points(rng, k=k)).weights.shape == (1, k)


def test_permutation_equivariance(rng):
    net = _tiny_net()
    points = _patch_points(rng, k=40)
    permutation = rng.permutation(40)
    output = forward(net, points)
    permuted = forward(net, points[permutation])
    torch.testing.assert_close(permuted.weights[0], output.weights[0][permutation], rtol=0, atol=1e-12)
    torch.testing.assert_close(permuted.global_feature, output.global_feature, rtol=0, atol=1e-12)


def test_duplicate_points_share_weight(rng):
    net = _tiny_net()
    points = _patch_points(rng, k=20)
    points = np.vstack([points, points[7:8]])
    weights = forward(net, points).weights[0]
    assert float(weights[7]) == pytest.approx(float(weights[20]), abs=1e-12)


def test_forward_matches_reference(rng):
    net = _tiny_net(seed=5)
    points = _patch_points(rng, k=25)
    weights = forward(net, points).weights[0].detach().numpy()
    np.testing.assert_allclose(weights, _reference_weights(net, points), rtol=1e-10, atol=1e-12)


def test_forward_accepts_patch_objects(rng):
    net = _tiny_net()
    cloud = PointCloud(positions=rng.normal(size=(50, 3)))
    patch = normalize_patch(cloud, knn(cloud, 0, 16), 0)
    from_patch = forward(net, patch).weights
    from_array = forward(net, patch.local_points).weights
    torch.testing.assert_close(from_patch, from_array)


def test_forward_rejects_bad_input(rng):
    net = _tiny_net()
    with pytest.raises(InvalidInputError):
        forward(net, np.zeros((1, 3)))
    points = _patch_points(rng)
    points[3, 1] = np.nan
    with pytest.raises(NumericalFaultError) as error:
        forward(net, points)
    assert error.value.layer.startswith("input_transform")


def test_config_presets():
    tiny = WeightNetConfig.named("tiny", epsilon=1e-3)
    assert tiny.point_widths == (8, 8)
    assert tiny.epsilon == 1e-3
    assert WeightNetConfig.from_dict(tiny.as_dict()) == tiny
    assert WeightNetConfig.named("full").global_width == 1024
    with pytest.raises(InvalidInputError):
        WeightNetConfig.named("huge")
