"""Point-set encoder predicting one fitting weight per neighbor.

Shared per-point layers (with an input alignment transform and a feature
alignment transform), a max-pooled global feature, and a head MLP that sees
[global | local] for every point. Output weights are sigmoid(head) + epsilon.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from jetfit.errors import InvalidInputError, NumericalFaultError
from jetfit.neighborhood import Patch, PatchBatch

DEFAULT_EPSILON = 1e-4


@dataclass(frozen=True)
class WeightNetConfig:
    point_widths: tuple = (64, 64)
    feature_widths: tuple = (128, 1024)
    head_widths: tuple = (512, 256, 128)
    stn_conv_widths: tuple = (64, 128, 1024)
    stn_fc_widths: tuple = (512, 256)
    epsilon: float = DEFAULT_EPSILON
    use_input_transform: bool = True
    use_feature_transform: bool = True

    @classmethod
    def full(cls, **kwargs) -> "WeightNetConfig":
        return cls(**kwargs)

    @classmethod
    def tiny(cls, **kwargs) -> "WeightNetConfig":
        """Reduced widths for gradient checks and desk-scale experiments."""
        return cls(
            point_widths=(8, 8),
            feature_widths=(16, 32),
            head_widths=(16, 8, 4),
            stn_conv_widths=(8, 16, 32),
            stn_fc_widths=(16, 8),
            **kwargs,
        )

    @classmethod
    def named(cls, name: str, **kwargs) -> "WeightNetConfig":
        match name:
            case "full":
                return cls.full(**kwargs)
            case "tiny":
                return cls.tiny(**kwargs)
            case _:
                raise InvalidInputError(f"unknown network size '{name}' (expected 'full' or 'tiny')")

    @property
    def local_width(self) -> int:
        return self.point_widths[-1]

    @property
    def global_width(self) -> int:
        return self.feature_widths[-1]

    def as_dict(self) -> dict:
        return {
            "point_widths": list(self.point_widths),
            "feature_widths": list(self.feature_widths),
            "head_widths": list(self.head_widths),
            "stn_conv_widths": list(self.stn_conv_widths),
            "stn_fc_widths": list(self.stn_fc_widths),
            "epsilon": self.epsilon,
            "use_input_transform": self.use_input_transform,
            "use_feature_transform": self.use_feature_transform,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WeightNetConfig":
        return cls(**{key: tuple(value) if isinstance(value, list) else value for key, value in d.items()})


@dataclass
class WeightNetOutput:
    weights: torch.Tensor  # (B, k) in (eps, 1 + eps]
    transforms: list = field(default_factory=list)  # [(B, 3, 3), (B, C, C)]
    global_feature: torch.Tensor = None  # (B, global_width)
    local_features: torch.Tensor = None  # (B, k, local_width)


def _check_finite(name: str, x: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericalFaultError(name)
    return x


class SharedLayers(nn.Module):
    """Per-point 1x1 convolutions, each followed by normalization and a rectifier."""

    def __init__(self, in_width: int, widths: tuple, name: str):
        super(SharedLayers, self).__init__()
        self.name = name
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        for width in widths:
            self.convs.append(nn.Conv1d(in_width, width, 1))
            self.norms.append(nn.BatchNorm1d(width))
            in_width = width

    def forward(self, x):
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            x = _check_finite(f"{self.name}.{i}", F.relu(norm(conv(x))))
        return x


class AlignmentTransform(nn.Module):
    """Predicts a dim x dim matrix from a point set; starts at the identity."""

    def __init__(self, dim: int, conv_widths: tuple, fc_widths: tuple, name: str):
        super(AlignmentTransform, self).__init__()
        self.dim = dim
        self.name = name
        self.features = SharedLayers(dim, conv_widths, f"{name}.features")
        self.fcs = nn.ModuleList()
        self.norms = nn.ModuleList()
        in_width = conv_widths[-1]
        for width in fc_widths:
            self.fcs.append(nn.Linear(in_width, width))
            self.norms.append(nn.BatchNorm1d(width))
            in_width = width
        self.out = nn.Linear(in_width, dim * dim)
        nn.init.zeros_(self.out.weight)
        with torch.no_grad():
            self.out.bias.copy_(torch.eye(dim).flatten())

    def forward(self, x):
        x = torch.max(self.features(x), dim=2)[0]
        for i, (fc, norm) in enumerate(zip(self.fcs, self.norms)):
            x = _check_finite(f"{self.name}.fc{i}", F.relu(norm(fc(x))))
        return _check_finite(f"{self.name}.out", self.out(x)).view(-1, self.dim, self.dim)


class WeightNet(nn.Module):
    def __init__(self, config: WeightNetConfig = None):
        super(WeightNet, self).__init__()
        self.config = WeightNetConfig.full() if config is None else config
        c = self.config
        self.input_transform = AlignmentTransform(3, c.stn_conv_widths, c.stn_fc_widths, "input_transform") \
            if c.use_input_transform else None
        self.point_layers = SharedLayers(3, c.point_widths, "point_layers")
        self.feature_transform = AlignmentTransform(c.local_width, c.stn_conv_widths, c.stn_fc_widths,
                                                    "feature_transform") if c.use_feature_transform else None
        self.feature_layers = SharedLayers(c.local_width, c.feature_widths, "feature_layers")
        self.head_layers = SharedLayers(c.global_width + c.local_width, c.head_widths, "head_layers")
        self.head_out = nn.Conv1d(c.head_widths[-1], 1, 1)

    @property
    def epsilon(self) -> float:
        return self.config.epsilon

    def forward(self, points: torch.Tensor) -> WeightNetOutput:
        """points: (B, k, 3) patch coordinates."""
        if points.ndim != 3 or points.shape[-1] != 3 or points.shape[1] < 2:
            raise InvalidInputError(f"expected (B, k>=2, 3) points, got {tuple(points.shape)}")
        n_pts = points.shape[1]
        transforms = []

        x = points.transpose(2, 1)
        if self.input_transform is not None:
            trans = self.input_transform(x)
            transforms.append(trans)
            x = torch.bmm(points, trans).transpose(2, 1)

        x = self.point_layers(x)
        if self.feature_transform is not None:
            trans2 = self.feature_transform(x)
            transforms.append(trans2)
            x = torch.bmm(x.transpose(2, 1), trans2).transpose(2, 1)
        local_features = x

        x = self.feature_layers(local_features)
        global_feature = torch.max(x, dim=2)[0]
        x = torch.cat([global_feature.unsqueeze(-1).expand(-1, -1, n_pts), local_features], dim=1)
        x = self.head_layers(x)
        logits = _check_finite("head_out", self.head_out(x)).squeeze(1)
        weights = torch.sigmoid(logits) + self.epsilon

        return WeightNetOutput(
            weights=weights,
            transforms=transforms,
            global_feature=global_feature,
            local_features=local_features.transpose(2, 1),
        )


def init_params(seed: int, config: WeightNetConfig = None, dtype=torch.float32) -> WeightNet:
    """Deterministic initialization; the global torch RNG is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = WeightNet(config)
    return net.to(dtype)


def forward(params: WeightNet, patch) -> WeightNetOutput:
    """Run the encoder on a Patch, a PatchBatch or raw (B, k, 3) / (k, 3) coordinates."""
    if isinstance(patch, Patch):
        points = patch.local_points[None]
    elif isinstance(patch, PatchBatch):
        points = patch.local_points
    else:
        points = patch
    dtype = next(params.parameters()).dtype
    points = torch.as_tensor(np.asarray(points) if not isinstance(points, torch.Tensor) else points, dtype=dtype)
    if points.ndim == 2:
        points = points[None]
    return params(points)
