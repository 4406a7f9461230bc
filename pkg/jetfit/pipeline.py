"""Patch batch -> weights -> jet -> world-frame normals and curvatures."""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
from loguru import logger

from jetfit import jet_core
from jetfit.neighborhood import PointCloud, extract_patches, denormalize_normal, denormalize_curvature
from jetfit.weightnet import WeightNet, WeightNetConfig, init_params
from tools.timer import Timer

DEFAULT_K = 256
DEFAULT_ORDER = 3
DEFAULT_BATCH_SIZE = 256


@dataclass
class FitOutput:
    """Differentiable per-patch result in the local frame."""
    jet: jet_core.JetFit
    normals: torch.Tensor  # (B, 3)
    neighbor_normals: torch.Tensor  # (B, k, 3)
    weights: torch.Tensor  # (B, k)
    transforms: list

    @property
    def beta(self) -> torch.Tensor:
        return self.jet.coefficients.beta


@dataclass
class FitResult:
    """Per-query world-frame estimates for a cloud."""
    query_indices: np.ndarray  # (Q,)
    normals: np.ndarray  # (Q, 3)
    curvatures: np.ndarray  # (Q, 2), |k1| >= |k2|, NaN for order-1 jets
    directions: np.ndarray  # (Q, 2, 3)
    neighbor_indices: np.ndarray  # (Q, k)
    weights: np.ndarray  # (Q, k)
    h: np.ndarray  # (Q,) preconditioning length
    ridge: np.ndarray  # (Q,) ridge actually used
    degenerate: np.ndarray  # (Q,) bool
    runtime_ms_per_point: float = 0.0

    def __len__(self) -> int:
        return len(self.query_indices)


class WeightedJetFitter(nn.Module):
    """Weight network (or uniform weights when net is None) followed by the WLS jet fit."""

    def __init__(self, net: Optional[WeightNet], order: int = DEFAULT_ORDER, ridge: float = jet_core.DEFAULT_RIDGE):
        super(WeightedJetFitter, self).__init__()
        self.net = net
        self.order = jet_core.check_order(order)
        self.ridge = ridge

    @classmethod
    def create(cls, seed: int, config: WeightNetConfig = None, order: int = DEFAULT_ORDER,
               ridge: float = jet_core.DEFAULT_RIDGE, dtype=torch.float32) -> "WeightedJetFitter":
        return cls(init_params(seed, config, dtype=dtype), order=order, ridge=ridge)

    @property
    def uniform(self) -> bool:
        return self.net is None

    def forward(self, local_points: torch.Tensor) -> FitOutput:
        """local_points: (B, k, 3) normalized patch coordinates."""
        if self.net is None:
            weights = torch.ones(local_points.shape[:-1], dtype=local_points.dtype, device=local_points.device)
            transforms = []
        else:
            output = self.net(local_points)
            weights, transforms = output.weights, output.transforms
        # the solve always runs in double precision
        points = local_points.detach().to(torch.float64)
        fit = jet_core.fit_jet(points, weights.to(torch.float64), self.order, self.ridge)
        return FitOutput(
            jet=fit,
            normals=jet_core.jet_normal(fit.coefficients),
            neighbor_normals=jet_core.neighbor_normals(fit.coefficients, points[..., :2]),
            weights=weights,
            transforms=transforms,
        )


def placeholder_patch(k: int) -> np.ndarray:
    """Well-posed planar stand-in (golden-angle disc, query at the origin) for degenerate patches."""
    i = np.arange(k, dtype=np.float64)
    radius = np.sqrt(i / max(k - 1, 1))
    angle = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([radius * np.cos(angle), radius * np.sin(angle), np.zeros(k)], axis=1)


def fit_cloud(cloud: PointCloud, query_indices=None, k: int = DEFAULT_K, order: int = None,
              fitter: WeightedJetFitter = None, ridge: float = jet_core.DEFAULT_RIDGE,
              batch_size: int = DEFAULT_BATCH_SIZE) -> FitResult:
    """Estimate normals/curvatures at query_indices (default: cloud.query_indices).

    fitter None means classical unweighted jet fitting of the given order.
    """
    if fitter is None:
        fitter = WeightedJetFitter(None, order=DEFAULT_ORDER if order is None else order, ridge=ridge)
    elif order is not None and order != fitter.order:
        fitter = WeightedJetFitter(fitter.net, order=order, ridge=fitter.ridge)
    query_indices = cloud.query_indices if query_indices is None else np.asarray(query_indices, dtype=np.int64)
    k = min(k, len(cloud))
    dtype = torch.float64 if fitter.net is None else next(fitter.net.parameters()).dtype
    was_training = fitter.training
    fitter.eval()

    chunks = []
    timer = Timer(autostart=True)
    with torch.no_grad():
        for start in range(0, len(query_indices), batch_size):
            batch = extract_patches(cloud, query_indices[start:start + batch_size], k)
            local_points = batch.local_points.copy()
            bad = batch.degenerate
            local_points[bad] = placeholder_patch(k)
            output = fitter(torch.as_tensor(local_points, dtype=dtype))
            normals = output.normals.numpy().copy()
            if fitter.order >= 2:
                pair = jet_core.principal_curvatures(output.jet.coefficients)
                curvatures = np.stack([pair.k1.numpy(), pair.k2.numpy()], axis=1)
                directions = np.stack([pair.dir1.numpy(), pair.dir2.numpy()], axis=1)
            else:
                curvatures = np.full((len(batch), 2), np.nan)
                directions = np.full((len(batch), 2, 3), np.nan)
            weights = output.weights.to(torch.float64).numpy().copy()
            # degenerate patches report NaN geometry and contribute no weight
            normals[bad] = np.nan
            curvatures[bad] = np.nan
            directions[bad] = np.nan
            weights[bad] = 0.0
            chunks.append(dict(
                normals=denormalize_normal(batch, normals),
                curvatures=denormalize_curvature(batch, curvatures),
                directions=np.einsum("bij,bdj->bdi", batch.bases, directions),
                neighbor_indices=batch.neighbor_indices,
                weights=weights,
                h=output.jet.preconditioner.h.numpy(),
                ridge=output.jet.ridge.numpy(),
                degenerate=bad,
            ))
    elapsed_ms = timer.elapsed(_format="ms")
    if was_training:
        fitter.train()

    if not chunks:
        return FitResult(query_indices, np.empty((0, 3)), np.empty((0, 2)), np.empty((0, 2, 3)),
                         np.empty((0, k), dtype=np.int64), np.empty((0, k)), np.empty(0), np.empty(0),
                         np.empty(0, dtype=bool))
    merged = {key: np.concatenate([chunk[key] for chunk in chunks]) for key in chunks[0]}
    escalated = int((merged["ridge"] > ridge * (1 + 1e-9)).sum())
    if escalated:
        logger.debug(f"{escalated} fits in {cloud.name} needed ridge escalation.")
    return FitResult(query_indices=query_indices, runtime_ms_per_point=elapsed_ms / max(len(query_indices), 1),
                     **merged)
