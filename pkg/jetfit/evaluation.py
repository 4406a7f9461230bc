"""Error metrics, classical baselines, weight-based denoising and the benchmark harness."""

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from loguru import logger

from jetfit.data_io import add_gaussian_noise, subsample_density, load_clouds
from jetfit.errors import InvalidInputError
from jetfit.metric_frames import BenchmarkFrame
from jetfit.neighborhood import PointCloud, Patch, extract_patches, denormalize_normal
from jetfit.pipeline import fit_cloud
from tools.helper_tools import save_json, load_json
from tools.timer import Timer

# ======================================================================================
# Parameters

PGP_ALPHAS = np.arange(0, 31, dtype=np.float64)  # degrees
SCALE_K = {"small": 18, "med": 122, "large": 450}
CATEGORIES = {
    "none": ("noise", 0.0),
    "noise_low": ("noise", 0.00125),
    "noise_med": ("noise", 0.006),
    "noise_high": ("noise", 0.012),
    "gradient": ("density", "gradient"),
    "stripes": ("density", "stripes"),
}
METHODS = ("pca_small", "pca_med", "pca_large", "jet_small", "jet_med", "jet_large", "jet", "learned")
REPORT_SCHEMA = "jetfit-benchmark"
REPORT_VERSION = 1

# ======================================================================================
# Metrics


def angle_error_unoriented(n_est, n_gt) -> np.ndarray:
    """arccos(clamp(|n_est . n_gt|, 0, 1)) in degrees, row-wise."""
    dot = np.abs(np.einsum("...i,...i->...", np.asarray(n_est, dtype=np.float64), np.asarray(n_gt, dtype=np.float64)))
    return np.degrees(np.arccos(np.clip(dot, 0.0, 1.0)))


def rmse(errors) -> float:
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size == 0:
        raise InvalidInputError("rmse of an empty error list")
    return float(np.sqrt(np.mean(errors ** 2)))


def pgp(errors, alpha_grid=PGP_ALPHAS) -> np.ndarray:
    """Fraction of points with error strictly below each alpha."""
    errors = np.asarray(errors, dtype=np.float64).ravel()
    alpha_grid = np.asarray(alpha_grid, dtype=np.float64)
    if errors.size == 0:
        raise InvalidInputError("pgp of an empty error list")
    return (errors[None, :] < alpha_grid[:, None]).mean(axis=1)


def curvature_error(k_est, k_gt) -> np.ndarray:
    """|(k_est - k_gt) / max(|k_gt|, 1)|, element-wise."""
    k_est = np.asarray(k_est, dtype=np.float64)
    k_gt = np.asarray(k_gt, dtype=np.float64)
    return np.abs((k_est - k_gt) / np.maximum(np.abs(k_gt), 1.0))


def align_curvatures(k_est, n_est, n_gt) -> np.ndarray:
    """Express (Q, 2) curvatures w.r.t. the ground-truth normal orientation, sorted (max, min)."""
    k_est = np.asarray(k_est, dtype=np.float64)
    flip = np.einsum("...i,...i->...", np.asarray(n_est), np.asarray(n_gt)) < 0
    signed = np.where(flip[..., None], -k_est, k_est)
    return np.stack([signed.max(axis=-1), signed.min(axis=-1)], axis=-1)


def curvature_rms(k_est, k_gt, n_est, n_gt) -> tuple:
    """(D_k1, D_k2): RMS of the normalized error of the max and min curvature after sign alignment."""
    errors = curvature_error(align_curvatures(k_est, n_est, n_gt), k_gt)
    return float(np.sqrt(np.mean(errors[:, 0] ** 2))), float(np.sqrt(np.mean(errors[:, 1] ** 2)))


# ======================================================================================
# Baselines


def baseline_pca_normal(patch) -> np.ndarray:
    """Smallest-variance eigenvector of the centroid-centred covariance.

    A Patch gives a world-frame normal; raw (..., k, 3) points give one in their own frame.
    """
    points = patch.local_points if isinstance(patch, Patch) else np.asarray(patch, dtype=np.float64)
    centered = points - points.mean(axis=-2, keepdims=True)
    covariance = np.einsum("...ki,...kj->...ij", centered, centered) / points.shape[-2]
    _, eigenvectors = np.linalg.eigh(covariance)
    normal = eigenvectors[..., :, 0]
    return denormalize_normal(patch, normal) if isinstance(patch, Patch) else normal


def baseline_pca_normals(cloud: PointCloud, query_indices, k: int) -> np.ndarray:
    """PCA normals at many queries: the last axis of each patch basis."""
    batch = extract_patches(cloud, query_indices, min(k, len(cloud)))
    normals = batch.bases[:, :, 2].copy()
    normals[batch.degenerate] = np.nan
    return normals


def baseline_jet_normal(cloud: PointCloud, query_indices, order: int = 3, scale_k: int = SCALE_K["med"]) -> np.ndarray:
    """Unweighted jet normals at the given neighborhood size."""
    return fit_cloud(cloud, query_indices, k=min(scale_k, len(cloud)), order=order).normals


# ======================================================================================
# Denoising


def aggregate_weights(cloud, fit_results) -> np.ndarray:
    """Per point, the sum of the weights it received in every neighborhood that contains it."""
    n = cloud if isinstance(cloud, (int, np.integer)) else len(cloud)
    if not isinstance(fit_results, (list, tuple)):
        fit_results = [fit_results]
    summed = np.zeros(n, dtype=np.float64)
    for result in fit_results:
        np.add.at(summed, np.asarray(result.neighbor_indices).ravel(), np.asarray(result.weights).ravel())
    return summed


def denoise(cloud: PointCloud, summed_weights) -> tuple:
    """Keep points whose summed weight is >= mean - std; returns (filtered cloud, kept indices)."""
    summed_weights = np.asarray(summed_weights, dtype=np.float64)
    if summed_weights.shape != (len(cloud),):
        raise InvalidInputError(f"expected {len(cloud)} summed weights, got shape {summed_weights.shape}")
    if np.ptp(summed_weights) == 0:
        kept = np.arange(len(cloud))
    else:
        threshold = summed_weights.mean() - summed_weights.std()
        kept = np.flatnonzero(summed_weights >= threshold)
    logger.info(f"Denoising kept {len(kept)} of {len(cloud)} points of {cloud.name}.")
    return cloud.subset(kept), kept


# ======================================================================================
# Benchmark


@dataclass
class BenchmarkConfig:
    k: int = 256
    order: int = 3
    ridge: float = 1e-8
    seed: int = 0
    batch_size: int = 256
    output_dir: str = "runs/eval"
    dump_errors: bool = True
    alpha_grid: tuple = tuple(PGP_ALPHAS.tolist())

    def as_dict(self) -> dict:
        d = asdict(self)
        d["alpha_grid"] = list(self.alpha_grid)
        return d


@dataclass
class EvalReport:
    method: str
    category: str
    points: int
    rmse_deg: float
    pgp: list  # fraction per alpha of the config grid
    d_k1: float = None
    d_k2: float = None
    ms_per_point: float = 0.0
    failed_points: int = 0  # degenerate neighborhoods, counted at 90 degrees
    config: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def augment(cloud: PointCloud, category: str, seed: int = 0) -> PointCloud:
    """Apply a benchmark corruption category to a clean cloud."""
    if category not in CATEGORIES:
        raise InvalidInputError(f"unknown augmentation category '{category}' (expected {', '.join(CATEGORIES)})")
    kind, value = CATEGORIES[category]
    if kind == "noise":
        return add_gaussian_noise(cloud, value, seed=seed)
    return subsample_density(cloud, value, seed=seed)[0]


def _estimate(method: str, cloud: PointCloud, queries: np.ndarray, config: BenchmarkConfig, fitter):
    """(normals, curvatures or None, ms per point) for one method."""
    family, _, scale = method.partition("_")
    k = SCALE_K[scale] if scale else config.k
    if k > len(cloud):
        logger.warning(f"{cloud.name} has {len(cloud)} points; {method} runs with k={len(cloud)} instead of {k}.")
        k = len(cloud)
    match family:
        case "pca":
            timer = Timer(autostart=True)
            normals = baseline_pca_normals(cloud, queries, k)
            return normals, None, timer.elapsed(_format="ms") / max(len(queries), 1)
        case "jet" | "learned":
            if family == "learned" and fitter is None:
                raise InvalidInputError("the 'learned' method needs a trained checkpoint")
            result = fit_cloud(cloud, queries, k=k, order=config.order, fitter=fitter if family == "learned" else None,
                               ridge=config.ridge, batch_size=config.batch_size)
            curvatures = result.curvatures if config.order >= 2 else None
            return result.normals, curvatures, result.runtime_ms_per_point
        case _:
            raise InvalidInputError(f"unknown method '{method}' (expected one of {', '.join(METHODS)})")


def _dump_errors(directory: Path, name: str, angle_errors, curvature_errors) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    np.savetxt(directory / f"{name}.normal_err", angle_errors, fmt="%.6f")
    if curvature_errors is not None:
        np.savetxt(directory / f"{name}.curv_err", curvature_errors, fmt="%.6f")


def evaluate_method(method: str, category: str, clouds: list, config: BenchmarkConfig, fitter=None) -> EvalReport:
    """Pool the errors of one method over every shape of one corruption category."""
    angle_errors, k_errors, ms = [], [], []
    failed = 0
    for i, clean in enumerate(clouds):
        if not clean.has_normals:
            raise InvalidInputError(f"{clean.name} has no ground-truth normals to evaluate against")
        cloud = augment(clean, category, seed=config.seed + i)
        queries = cloud.query_indices
        queries = queries[np.isfinite(cloud.gt_normals[queries]).all(axis=1)]
        normals, curvatures, ms_per_point = _estimate(method, cloud, queries, config, fitter)
        gt = cloud.gt_normals[queries]
        errors = angle_error_unoriented(normals, gt)
        bad = ~np.isfinite(errors)
        failed += int(bad.sum())
        errors[bad] = 90.0
        angle_errors.append(errors)
        ms.append(ms_per_point)

        shape_k_errors = None
        if curvatures is not None and cloud.gt_curvatures is not None:
            valid = ~bad & np.isfinite(cloud.gt_curvatures[queries]).all(axis=1)
            shape_k_errors = np.full((len(queries), 2), np.nan)
            shape_k_errors[valid] = curvature_error(
                align_curvatures(curvatures[valid], normals[valid], gt[valid]), cloud.gt_curvatures[queries][valid])
            k_errors.append(shape_k_errors[valid])
        if config.dump_errors:
            _dump_errors(Path(config.output_dir) / method / category, cloud.name, errors, shape_k_errors)

    pooled = np.concatenate(angle_errors)
    d_k1 = d_k2 = None
    if k_errors and sum(len(e) for e in k_errors):
        stacked = np.concatenate(k_errors)
        d_k1, d_k2 = (float(np.sqrt(np.mean(stacked[:, j] ** 2))) for j in range(2))
    if failed:
        logger.warning(f"{method}/{category}: {failed} degenerate neighborhoods counted as 90 degree errors.")
    return EvalReport(
        method=method,
        category=category,
        points=int(pooled.size),
        rmse_deg=rmse(pooled),
        pgp=pgp(pooled, config.alpha_grid).tolist(),
        d_k1=d_k1,
        d_k2=d_k2,
        ms_per_point=float(np.mean(ms)),
        failed_points=failed,
        config=config.as_dict(),
    )


def save_report(path, reports: list, config: BenchmarkConfig) -> Path:
    document = {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "config": config.as_dict(),
        "results": [report.as_dict() for report in reports],
    }
    save_json(path, document)
    return Path(path)


def load_report(path) -> list:
    document = load_json(path)
    if document.get("schema") != REPORT_SCHEMA or document.get("version", 0) > REPORT_VERSION:
        raise InvalidInputError(f"{path} is not a readable {REPORT_SCHEMA} report")
    return [EvalReport(**entry) for entry in document["results"]]


def run_benchmark(clouds, methods=METHODS, augmentations=tuple(CATEGORIES), config: BenchmarkConfig = None,
                  fitter=None, display: bool = True) -> list:
    """Every method on every category; writes report.json, benchmark.csv and error dumps to config.output_dir.

    clouds is a list of PointCloud or a manifest path.
    """
    config = BenchmarkConfig() if config is None else config
    if isinstance(clouds, (str, Path)):
        clouds = load_clouds(clouds)
    for method in methods:
        if method not in METHODS:
            raise InvalidInputError(f"unknown method '{method}' (expected one of {', '.join(METHODS)})")
    output_dir = Path(config.output_dir)
    frame = BenchmarkFrame(output_folder=output_dir)
    alphas = list(config.alpha_grid)

    def pgp_at(report, alpha):
        return report.pgp[alphas.index(alpha)] if alpha in alphas else None

    reports = []
    for method in methods:
        for category in augmentations:
            report = evaluate_method(method, category, clouds, config, fitter)
            logger.info(f"{method:<10} {category:<10} RMSE {report.rmse_deg:8.3f} deg over {report.points} points")
            reports.append(report)
            frame.append_tuple((method, category, report.points, report.rmse_deg, pgp_at(report, 5.0),
                                pgp_at(report, 10.0), report.d_k1, report.d_k2, report.ms_per_point))

    save_report(output_dir / "report.json", reports, config)
    if display:
        frame.display_table()
    frame.save_chunk()
    return reports
