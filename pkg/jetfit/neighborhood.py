"""Patch extraction and per-patch preprocessing.

A patch is the k nearest points of a query, translated so the query sits at
the origin, scaled so the farthest neighbor lies on the unit sphere, and
rotated into its PCA basis (smallest-variance axis last, right-handed).
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from loguru import logger
from scipy.spatial import cKDTree

from jetfit.errors import InvalidInputError, DegeneratePatchError

# ======================================================================================
# Parameters

EXHAUSTIVE_SEARCH_LIMIT = 1000  # below this many points k-NN scans all distances
COLLINEAR_TOLERANCE = 1e-12  # second PCA eigenvalue relative to the first
UNIT_NORM_TOLERANCE = 1e-6

# ======================================================================================


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray  # (N, 3)
    gt_normals: Optional[np.ndarray] = None  # (N, 3)
    gt_curvatures: Optional[np.ndarray] = None  # (N, 2), k1 (max) then k2 (min)
    eval_indices: Optional[np.ndarray] = None
    outlier_mask: Optional[np.ndarray] = None  # (N,) True for injected off-surface points
    name: str = "cloud"
    _tree: Optional[cKDTree] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3 or len(positions) < 1:
            raise InvalidInputError(f"positions must be (N>=1, 3), got {positions.shape}")
        object.__setattr__(self, "positions", positions)
        n = len(positions)
        if self.gt_normals is not None:
            normals = np.asarray(self.gt_normals, dtype=np.float64)
            if normals.shape != (n, 3):
                raise InvalidInputError(f"gt_normals shape {normals.shape} doesn't match {n} points")
            norms = np.linalg.norm(normals, axis=1)
            finite = np.isfinite(norms)
            if np.any(np.abs(norms[finite] - 1.0) > UNIT_NORM_TOLERANCE):
                raise InvalidInputError("gt_normals must be unit vectors")
            object.__setattr__(self, "gt_normals", normals)
        if self.gt_curvatures is not None:
            curvatures = np.asarray(self.gt_curvatures, dtype=np.float64)
            if curvatures.shape != (n, 2):
                raise InvalidInputError(f"gt_curvatures shape {curvatures.shape} doesn't match {n} points")
            object.__setattr__(self, "gt_curvatures", curvatures)
        if self.eval_indices is not None:
            indices = np.asarray(self.eval_indices, dtype=np.int64)
            if indices.size and (indices.min() < 0 or indices.max() >= n):
                raise InvalidInputError("eval_indices out of range")
            object.__setattr__(self, "eval_indices", indices)
        if self.outlier_mask is not None:
            object.__setattr__(self, "outlier_mask", np.asarray(self.outlier_mask, dtype=bool))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            object.__setattr__(self, "_tree", cKDTree(self.positions))
        return self._tree

    @property
    def has_normals(self) -> bool:
        return self.gt_normals is not None

    @property
    def query_indices(self) -> np.ndarray:
        """eval_indices when present, otherwise every point."""
        if self.eval_indices is not None:
            return self.eval_indices
        return np.arange(len(self), dtype=np.int64)

    @property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.positions.max(axis=0) - self.positions.min(axis=0)))

    def subset(self, indices) -> "PointCloud":
        """Rows `indices` with ground truth kept aligned; eval_indices remapped."""
        indices = np.asarray(indices, dtype=np.int64)
        remap = None
        if self.eval_indices is not None:
            lookup = np.full(len(self), -1, dtype=np.int64)
            lookup[indices] = np.arange(len(indices))
            remap = lookup[self.eval_indices]
            remap = remap[remap >= 0]

        def take(values):
            return None if values is None else values[indices]

        return replace(
            self,
            positions=self.positions[indices],
            gt_normals=take(self.gt_normals),
            gt_curvatures=take(self.gt_curvatures),
            eval_indices=remap,
            outlier_mask=take(self.outlier_mask),
            _tree=None,
        )


@dataclass(frozen=True)
class Patch:
    local_points: np.ndarray  # (k, 3), dimensionless
    query_index: int
    scale: float  # world length
    basis: np.ndarray  # (3, 3) orthonormal columns, world = basis @ local
    query_world: np.ndarray  # (3,)
    neighbor_indices: Optional[np.ndarray] = None


@dataclass(frozen=True)
class PatchBatch:
    """Stacked patches for batched fitting."""
    local_points: np.ndarray  # (B, k, 3)
    query_indices: np.ndarray  # (B,)
    neighbor_indices: np.ndarray  # (B, k)
    scales: np.ndarray  # (B,)
    bases: np.ndarray  # (B, 3, 3)
    query_world: np.ndarray  # (B, 3)
    degenerate: np.ndarray  # (B,) bool

    def __len__(self) -> int:
        return len(self.query_indices)

    def patch(self, i: int) -> Patch:
        return Patch(
            local_points=self.local_points[i],
            query_index=int(self.query_indices[i]),
            scale=float(self.scales[i]),
            basis=self.bases[i],
            query_world=self.query_world[i],
            neighbor_indices=self.neighbor_indices[i],
        )


def _check_k(cloud: PointCloud, k: int) -> None:
    if not 1 <= k <= len(cloud):
        raise InvalidInputError(f"k must be in [1, {len(cloud)}], got {k}")


def _ordered(distances: np.ndarray, indices: np.ndarray, k: int, query_index: int) -> np.ndarray:
    """First k indices sorted by (distance, query first, index)."""
    order = np.lexsort((indices, indices != query_index, distances))
    return indices[order[:k]]


def knn(cloud: PointCloud, query_index: int, k: int) -> np.ndarray:
    """Exact k nearest neighbors of a cloud point, query first, ties by ascending index."""
    _check_k(cloud, k)
    query = cloud.positions[query_index]
    if len(cloud) < EXHAUSTIVE_SEARCH_LIMIT:
        distances = np.linalg.norm(cloud.positions - query, axis=1)
        return _ordered(distances, np.arange(len(cloud)), k, query_index)

    kth_distance = np.atleast_1d(cloud.tree.query(query, k=k)[0])[-1]
    # every point tied with the k-th distance is a candidate
    candidates = np.asarray(cloud.tree.query_ball_point(query, r=kth_distance * (1 + 1e-12) + 1e-300), dtype=np.int64)
    distances = np.linalg.norm(cloud.positions[candidates] - query, axis=1)
    return _ordered(distances, candidates, k, query_index)


def knn_batch(cloud: PointCloud, query_indices, k: int) -> np.ndarray:
    """knn for many queries; rows needing tie resolution fall back to knn()."""
    _check_k(cloud, k)
    query_indices = np.asarray(query_indices, dtype=np.int64)
    if len(cloud) < EXHAUSTIVE_SEARCH_LIMIT or k == len(cloud):
        return np.stack([knn(cloud, q, k) for q in query_indices]) if len(query_indices) else \
            np.empty((0, k), dtype=np.int64)

    distances, indices = cloud.tree.query(cloud.positions[query_indices], k=k + 1)
    distances = distances.reshape(len(query_indices), k + 1)
    indices = indices.reshape(len(query_indices), k + 1).astype(np.int64)
    # stable (distance, index) order inside each row
    result = np.empty((len(query_indices), k), dtype=np.int64)
    for row in range(len(query_indices)):
        if distances[row, k - 1] == distances[row, k]:
            result[row] = knn(cloud, query_indices[row], k)
        else:
            result[row] = _ordered(distances[row, :k], indices[row, :k], k, query_indices[row])
    return result


def _pca_basis(centered: np.ndarray):
    """Eigen-decomposition of (B, k, 3) point sets: bases with descending variance, and eigenvalues."""
    centroid_free = centered - centered.mean(axis=-2, keepdims=True)
    covariance = np.einsum("...ki,...kj->...ij", centroid_free, centroid_free) / centered.shape[-2]
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)  # ascending
    eigenvalues = eigenvalues[..., ::-1]
    basis = eigenvectors[..., ::-1].copy()
    # right-handed: det = +1
    flip = np.linalg.det(basis) < 0
    basis[flip, :, 2] *= -1
    return basis, eigenvalues


def _orient(basis: np.ndarray, reference_normal) -> np.ndarray:
    """Flip axes 2 and 3 together so the normal axis agrees with the reference (det stays +1)."""
    if reference_normal is None:
        return basis
    reference_normal = np.asarray(reference_normal, dtype=np.float64)
    flip = np.einsum("...i,...i->...", basis[..., :, 2], reference_normal) < 0
    basis = basis.copy()
    basis[flip, :, 1:] *= -1
    return basis


def normalize_patch(cloud: PointCloud, neighbor_indices, query_index: int, reference_normal=None) -> Patch:
    """Translate to the query, scale into the unit sphere and rotate into the PCA basis."""
    neighbor_indices = np.asarray(neighbor_indices, dtype=np.int64)
    query = cloud.positions[query_index]
    centered = cloud.positions[neighbor_indices] - query
    scale = float(np.linalg.norm(centered, axis=1).max())
    if scale <= 0:
        raise DegeneratePatchError(f"all neighbors of point {query_index} coincide with it")
    centered = centered / scale
    bases, eigenvalues = _pca_basis(centered[None])
    if eigenvalues[0, 1] <= COLLINEAR_TOLERANCE * eigenvalues[0, 0]:
        raise DegeneratePatchError(f"neighbors of point {query_index} are collinear")
    reference = None if reference_normal is None else np.asarray(reference_normal, dtype=np.float64)[None]
    basis = _orient(bases, reference)[0]
    return Patch(
        local_points=centered @ basis,
        query_index=int(query_index),
        scale=scale,
        basis=basis,
        query_world=query.copy(),
        neighbor_indices=neighbor_indices,
    )


def extract_patches(cloud: PointCloud, query_indices, k: int, reference_normals=None) -> PatchBatch:
    """Vectorized normalize_patch over many queries. Degenerate patches are flagged, not raised."""
    query_indices = np.asarray(query_indices, dtype=np.int64)
    neighbors = knn_batch(cloud, query_indices, k)
    query = cloud.positions[query_indices]
    centered = cloud.positions[neighbors] - query[:, None, :]
    scales = np.linalg.norm(centered, axis=2).max(axis=1) if k > 0 else np.zeros(len(query_indices))
    coincident = scales <= 0
    safe_scales = np.where(coincident, 1.0, scales)
    centered = centered / safe_scales[:, None, None]
    bases, eigenvalues = _pca_basis(centered)
    collinear = eigenvalues[:, 1] <= COLLINEAR_TOLERANCE * eigenvalues[:, 0]
    degenerate = coincident | collinear
    bases[coincident] = np.eye(3)
    bases = _orient(bases, reference_normals)
    if degenerate.any():
        logger.debug(f"{int(degenerate.sum())} of {len(query_indices)} patches in {cloud.name} are degenerate.")
    return PatchBatch(
        local_points=np.einsum("bki,bij->bkj", centered, bases),
        query_indices=query_indices,
        neighbor_indices=neighbors,
        scales=safe_scales,
        bases=bases,
        query_world=query,
        degenerate=degenerate,
    )


def denormalize_normal(patch, local_normal) -> np.ndarray:
    """Local-frame vector back to world frame (basis @ n); works on Patch or PatchBatch."""
    local_normal = np.asarray(local_normal, dtype=np.float64)
    bases = patch.basis if isinstance(patch, Patch) else patch.bases
    return np.einsum("...ij,...j->...i", bases, local_normal)


def denormalize_curvature(patch, k):
    """Curvature is 1/length: divide by the unit-sphere scaling."""
    k = np.asarray(k, dtype=np.float64)
    if isinstance(patch, Patch):
        return k / patch.scale
    return k / patch.scales.reshape((-1,) + (1,) * (k.ndim - 1))
