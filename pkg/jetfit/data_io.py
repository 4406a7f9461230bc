"""PCPNet-style shape files, synthetic analytic shapes with exact ground truth,
and the noise / density / outlier corruption regimes.

A shape is a set of ASCII sibling files sharing a basepath:
  <base>.xyz      x y z per line
  <base>.normals  nx ny nz per line (optional)
  <base>.curv     k1 k2 per line, k1 = max, k2 = min (optional)
  <base>.pidx     one evaluation index per line (optional)
"""

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from loguru import logger
from scipy.spatial.transform import Rotation

from jetfit import jet_core
from jetfit.errors import InvalidInputError, PcpnetFormatError, PcpnetParseError
from jetfit.neighborhood import PointCloud

# ======================================================================================
# Parameters

DATA_ROOT_ENV = "JETFIT_DATA_ROOT"
DEFAULT_DATA_ROOT = "data"
FLOAT_FORMAT = "%.10g"
SIBLINGS = ("xyz", "normals", "curv", "pidx")

SHAPE_KINDS = ("plane", "sphere", "cylinder", "paraboloid", "saddle", "torus", "corner")
SHAPE_DEFAULTS = {
    "plane": {"size": 1.0},
    "sphere": {"radius": 1.0},
    "cylinder": {"radius": 1.0, "height": 2.0},
    "paraboloid": {"a": 0.5, "b": 0.5, "size": 1.0},
    "saddle": {"a": 0.5, "size": 1.0},
    "torus": {"R": 2.0, "r": 0.5},
    "corner": {"size": 1.0},
}

GRADIENT_DEFAULTS = {"p_min": 0.3, "p_max": 1.0}
STRIPES_DEFAULTS = {"bands": 8, "removed_fraction": 0.3}

# ======================================================================================
# PCPNet files


def default_data_root(manifest=None) -> Path:
    """$JETFIT_DATA_ROOT, else the manifest's own directory, else ./data."""
    if DATA_ROOT_ENV in os.environ:
        return Path(os.environ[DATA_ROOT_ENV])
    return Path(manifest).parent if manifest is not None else Path(DEFAULT_DATA_ROOT)


def _sibling(basepath, extension: str) -> Path:
    return Path(f"{basepath}.{extension}")


def _read_table(path: Path, columns: int, parse=float) -> np.ndarray:
    rows = []
    with open(path, 'r', encoding='UTF-8') as f:
        for line_number, line in enumerate(f, start=1):
            tokens = line.split()
            if not tokens:
                continue
            values = []
            for token in tokens:
                try:
                    values.append(parse(token))
                except ValueError:
                    raise PcpnetParseError(path, line_number, token) from None
            if len(values) != columns:
                raise PcpnetFormatError(f"{path}:{line_number}: expected {columns} values, found {len(values)}")
            rows.append(values)
    dtype = np.int64 if parse is int else np.float64
    return np.asarray(rows, dtype=dtype).reshape(-1, columns)


def load_pcpnet(basepath) -> PointCloud:
    """Read <base>.xyz plus whichever of .normals/.curv/.pidx exist."""
    xyz_path = _sibling(basepath, "xyz")
    if not xyz_path.is_file():
        raise FileNotFoundError(f"{xyz_path} is missing!")
    positions = _read_table(xyz_path, 3)
    if len(positions) == 0:
        raise PcpnetFormatError(f"{xyz_path} holds no points")

    def aligned(extension: str, columns: int):
        path = _sibling(basepath, extension)
        if not path.is_file():
            return None
        values = _read_table(path, columns)
        if len(values) != len(positions):
            raise PcpnetFormatError(f"{path.name} has {len(values)} rows but {xyz_path.name} has {len(positions)}")
        return values

    normals = aligned("normals", 3)
    if normals is not None:
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            normals = np.where(lengths > 0, normals / lengths, np.nan)
    curvatures = aligned("curv", 2)

    eval_indices = None
    pidx_path = _sibling(basepath, "pidx")
    if pidx_path.is_file():
        eval_indices = _read_table(pidx_path, 1, parse=int)[:, 0]
        if eval_indices.size and (eval_indices.min() < 0 or eval_indices.max() >= len(positions)):
            raise PcpnetFormatError(f"{pidx_path.name} indexes outside the {len(positions)} points of {xyz_path.name}")

    logger.debug(f"Loaded {xyz_path.name}: {len(positions)} points, normals={normals is not None}, "
                 f"curvatures={curvatures is not None}, eval subset={None if eval_indices is None else len(eval_indices)}")
    return PointCloud(positions=positions, gt_normals=normals, gt_curvatures=curvatures, eval_indices=eval_indices,
                      name=Path(basepath).name)


def save_pcpnet(cloud: PointCloud, basepath, what=SIBLINGS) -> list:
    """Write the requested siblings that the cloud actually carries; returns written paths."""
    Path(basepath).parent.mkdir(parents=True, exist_ok=True)
    written = []
    for extension in what:
        path = _sibling(basepath, extension)
        match extension:
            case "xyz":
                np.savetxt(path, cloud.positions, fmt=FLOAT_FORMAT)
            case "normals" if cloud.gt_normals is not None:
                np.savetxt(path, cloud.gt_normals, fmt=FLOAT_FORMAT)
            case "curv" if cloud.gt_curvatures is not None:
                np.savetxt(path, cloud.gt_curvatures, fmt=FLOAT_FORMAT)
            case "pidx" if cloud.eval_indices is not None:
                np.savetxt(path, cloud.eval_indices, fmt="%d")
            case "normals" | "curv" | "pidx":
                continue
            case _:
                raise InvalidInputError(f"unknown PCPNet sibling '{extension}'")
        written.append(path)
    logger.debug(f"Saved {', '.join(p.name for p in written)}.")
    return written


def load_manifest(path, data_root=None) -> list:
    """Shape list file: one basepath per line, relative entries resolved against the data root."""
    data_root = default_data_root(path) if data_root is None else Path(data_root)
    basepaths = []
    with open(path, 'r', encoding='UTF-8') as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            entry = Path(line)
            basepaths.append(entry if entry.is_absolute() else data_root / entry)
    logger.debug(f"Manifest {Path(path).name} lists {len(basepaths)} shapes.")
    return basepaths


def save_manifest(path, basepaths, data_root=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for basepath in basepaths:
        basepath = Path(basepath)
        if data_root is not None:
            try:
                basepath = basepath.relative_to(data_root)
            except ValueError:
                pass
        lines.append(str(basepath))
    path.write_text("\n".join(lines) + "\n", encoding="UTF-8")
    return path


def load_clouds(manifest, data_root=None) -> list:
    return [load_pcpnet(basepath) for basepath in load_manifest(manifest, data_root)]


# ======================================================================================
# Synthetic shapes


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    params: dict = field(default_factory=dict)
    sample_count: int = 10000
    seed: int = 0
    eval_count: int = None  # random evaluation subset; None evaluates every point
    rotate: bool = False  # apply a seeded random rotation to the whole shape
    name: str = None

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise InvalidInputError(f"unknown shape kind '{self.kind}' (expected one of {', '.join(SHAPE_KINDS)})")
        unknown = set(self.params) - set(SHAPE_DEFAULTS[self.kind])
        if unknown:
            raise InvalidInputError(f"unknown {self.kind} parameters: {sorted(unknown)}")
        if self.sample_count < 1:
            raise InvalidInputError(f"sample_count must be positive, got {self.sample_count}")
        if self.eval_count is not None and not 1 <= self.eval_count <= self.sample_count:
            raise InvalidInputError(f"eval_count must be in [1, {self.sample_count}], got {self.eval_count}")
        for key, value in self.resolved_params.items():
            if key != "a" and key != "b" and value <= 0:
                raise InvalidInputError(f"{self.kind} parameter {key} must be positive, got {value}")
        if self.kind == "torus" and self.resolved_params["r"] >= self.resolved_params["R"]:
            raise InvalidInputError("torus tube radius r must be smaller than the center radius R")

    @property
    def resolved_params(self) -> dict:
        return {**SHAPE_DEFAULTS[self.kind], **self.params}

    @property
    def label(self) -> str:
        return self.name or f"{self.kind}_{self.seed}"


def _height_field(rng, n, size, f, grad, hessian):
    """Graph z = f(x, y) over [-size, size]^2 with curvatures read off its local 2-jet."""
    xy = rng.uniform(-size, size, size=(n, 2))
    x, y = xy[:, 0], xy[:, 1]
    positions = np.stack([x, y, f(x, y)], axis=1)
    fx, fy = grad(x, y)
    fxx, fxy, fyy = hessian(x, y)
    normals = np.stack([-fx, -fy, np.ones(n)], axis=1)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    beta = np.stack([np.zeros(n), fx, fy, fxx / 2, fxy, fyy / 2], axis=1)
    pair = jet_core.principal_curvatures(torch.as_tensor(beta, dtype=torch.float64))
    k1, k2 = pair.k1.numpy(), pair.k2.numpy()
    return positions, normals, np.stack([np.maximum(k1, k2), np.minimum(k1, k2)], axis=1)


def _sample_shape(kind: str, p: dict, n: int, rng: np.random.Generator):
    """positions, outward/upward unit normals and (max, min) curvatures. Positive curvature bends away from the normal."""
    match kind:
        case "plane":
            xy = rng.uniform(-p["size"], p["size"], size=(n, 2))
            positions = np.column_stack([xy, np.zeros(n)])
            normals = np.tile([0.0, 0.0, 1.0], (n, 1))
            curvatures = np.zeros((n, 2))
        case "sphere":
            direction = rng.normal(size=(n, 3))
            normals = direction / np.linalg.norm(direction, axis=1, keepdims=True)
            positions = p["radius"] * normals
            curvatures = np.full((n, 2), 1.0 / p["radius"])
        case "cylinder":
            theta = rng.uniform(0, 2 * np.pi, n)
            z = rng.uniform(-p["height"] / 2, p["height"] / 2, n)
            normals = np.stack([np.cos(theta), np.sin(theta), np.zeros(n)], axis=1)
            positions = np.column_stack([p["radius"] * normals[:, :2], z])
            curvatures = np.column_stack([np.full(n, 1.0 / p["radius"]), np.zeros(n)])
        case "paraboloid":
            a, b = p["a"], p["b"]
            positions, normals, curvatures = _height_field(
                rng, n, p["size"],
                lambda x, y: a * x ** 2 + b * y ** 2,
                lambda x, y: (2 * a * x, 2 * b * y),
                lambda x, y: (np.full_like(x, 2 * a), np.zeros_like(x), np.full_like(x, 2 * b)),
            )
        case "saddle":
            a = p["a"]
            positions, normals, curvatures = _height_field(
                rng, n, p["size"],
                lambda x, y: a * (x ** 2 - y ** 2),
                lambda x, y: (2 * a * x, -2 * a * y),
                lambda x, y: (np.full_like(x, 2 * a), np.zeros_like(x), np.full_like(x, -2 * a)),
            )
        case "torus":
            big, small = p["R"], p["r"]
            # area element grows with R + r cos v: rejection-sample v
            v = np.empty(0)
            while len(v) < n:
                candidates = rng.uniform(0, 2 * np.pi, 2 * n)
                accept = rng.uniform(0, 1, 2 * n) < (big + small * np.cos(candidates)) / (big + small)
                v = np.concatenate([v, candidates[accept]])
            v = v[:n]
            u = rng.uniform(0, 2 * np.pi, n)
            normals = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
            ring = big + small * np.cos(v)
            positions = np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)
            tube = np.full(n, 1.0 / small)
            around = np.cos(v) / ring
            curvatures = np.stack([np.maximum(tube, around), np.minimum(tube, around)], axis=1)
        case "corner":
            # faces z = 0 (x >= 0) and x = 0 (z >= 0) sharing the y axis
            size = p["size"]
            on_floor = rng.uniform(0, 1, n) < 0.5
            depth = rng.uniform(0, size, n)
            y = rng.uniform(-size, size, n)
            positions = np.where(on_floor[:, None],
                                 np.stack([depth, y, np.zeros(n)], axis=1),
                                 np.stack([np.zeros(n), y, depth], axis=1))
            normals = np.where(on_floor[:, None], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0])
            curvatures = np.zeros((n, 2))
        case _:
            raise InvalidInputError(f"unknown shape kind '{kind}'")
    return positions, normals, curvatures


def generate_shape(spec: ShapeSpec) -> PointCloud:
    """Sample an analytic shape with exact normals and (max, min) principal curvatures."""
    rng = np.random.default_rng(spec.seed)
    positions, normals, curvatures = _sample_shape(spec.kind, spec.resolved_params, spec.sample_count, rng)
    if spec.rotate:
        rotation = Rotation.random(random_state=rng)
        positions = rotation.apply(positions)
        normals = rotation.apply(normals)
    eval_indices = None
    if spec.eval_count is not None:
        eval_indices = np.sort(rng.choice(spec.sample_count, size=spec.eval_count, replace=False))
    return PointCloud(positions=positions, gt_normals=normals, gt_curvatures=curvatures, eval_indices=eval_indices,
                      name=spec.label)


def synthetic_corpus(kinds=SHAPE_KINDS, sample_count: int = 10000, seed: int = 0, eval_count: int = None,
                     rotate: bool = True) -> list:
    """One cloud per kind, seeds derived from `seed` so that every shape differs."""
    seeds = np.random.SeedSequence(seed).generate_state(len(kinds))
    return [
        generate_shape(ShapeSpec(kind, sample_count=sample_count, seed=int(s), eval_count=eval_count, rotate=rotate,
                                 name=f"{kind}_{seed}"))
        for kind, s in zip(kinds, seeds)
    ]


def generate_corpus(output_dir, kinds=SHAPE_KINDS, sample_count: int = 10000, seed: int = 0, eval_count: int = None,
                    rotate: bool = True, manifest_name: str = "shapes.txt") -> Path:
    """Write a synthetic corpus in PCPNet format plus its manifest; returns the manifest path."""
    output_dir = Path(output_dir)
    basepaths = []
    for cloud in synthetic_corpus(kinds, sample_count, seed, eval_count, rotate):
        basepath = output_dir / cloud.name
        save_pcpnet(cloud, basepath)
        basepaths.append(basepath)
    manifest = save_manifest(output_dir / manifest_name, [b.name for b in basepaths])
    logger.info(f"Generated {len(basepaths)} synthetic shapes into {output_dir}.")
    return manifest


# ======================================================================================
# Corruptions


def add_gaussian_noise(cloud: PointCloud, sigma_frac_bbox: float, seed: int = 0) -> PointCloud:
    """i.i.d. N(0, sigma^2) per coordinate, sigma = fraction of the bounding-box diagonal. Ground truth untouched."""
    if sigma_frac_bbox < 0:
        raise InvalidInputError(f"noise fraction must be non-negative, got {sigma_frac_bbox}")
    if sigma_frac_bbox == 0:
        return cloud
    sigma = sigma_frac_bbox * cloud.bbox_diagonal
    rng = np.random.default_rng(seed)
    noisy = cloud.positions + rng.normal(0.0, sigma, size=cloud.positions.shape)
    return PointCloud(positions=noisy, gt_normals=cloud.gt_normals, gt_curvatures=cloud.gt_curvatures,
                      eval_indices=cloud.eval_indices, outlier_mask=cloud.outlier_mask, name=cloud.name)


def _axis_coordinate(cloud: PointCloud, axis):
    extent = cloud.positions.max(axis=0) - cloud.positions.min(axis=0)
    axis = int(np.argmax(extent)) if axis is None else int(axis)
    if axis not in (0, 1, 2):
        raise InvalidInputError(f"axis must be 0, 1 or 2, got {axis}")
    coordinate = cloud.positions[:, axis]
    low, span = coordinate.min(), extent[axis]
    return coordinate, low, span


def subsample_density(cloud: PointCloud, kind: str, params: dict = None, seed: int = 0):
    """Density regimes: 'gradient' (linear keep-probability along an axis) or 'stripes' (periodic bands removed).

    Returns (subsampled cloud, kept indices into the input cloud).
    """
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    match kind:
        case "gradient":
            params = {**GRADIENT_DEFAULTS, **params}
            p_min, p_max = params["p_min"], params["p_max"]
            if not (0 < p_min <= 1 and 0 < p_max <= 1):
                raise InvalidInputError(f"keep fractions must lie in (0, 1], got {p_min}, {p_max}")
            coordinate, low, span = _axis_coordinate(cloud, params.get("axis"))
            t = (coordinate - low) / span if span > 0 else np.zeros(len(cloud))
            keep = rng.uniform(0, 1, len(cloud)) < p_min + (p_max - p_min) * t
        case "stripes":
            params = {**STRIPES_DEFAULTS, **params}
            removed = params["removed_fraction"]
            if not 0 <= removed <= 1 or params["bands"] < 1:
                raise InvalidInputError(f"stripes need bands >= 1 and removed_fraction in [0, 1], got {params}")
            coordinate, low, span = _axis_coordinate(cloud, params.get("axis"))
            period = params.get("period", span / params["bands"] if span > 0 else 1.0)
            phase = np.mod((coordinate - low + params.get("offset", 0.0)) / period, 1.0)
            keep = phase >= removed
        case _:
            raise InvalidInputError(f"unknown density regime '{kind}' (expected 'gradient' or 'stripes')")

    kept = np.flatnonzero(keep)
    if len(kept) == 0:
        raise InvalidInputError(f"{kind} subsampling removed every point of {cloud.name}")
    logger.debug(f"{kind} subsampling kept {len(kept)} of {len(cloud)} points of {cloud.name}.")
    return cloud.subset(kept), kept


def add_outliers(cloud: PointCloud, fraction: float, seed: int = 0, inflate: float = 0.1) -> PointCloud:
    """Append round(fraction * N) uniform points from the bounding box grown by inflate * diagonal.

    Outliers carry NaN ground truth, are flagged in outlier_mask and never join eval_indices.
    """
    if fraction < 0:
        raise InvalidInputError(f"outlier fraction must be non-negative, got {fraction}")
    count = int(round(fraction * len(cloud)))
    if count == 0:
        return cloud
    rng = np.random.default_rng(seed)
    margin = inflate * cloud.bbox_diagonal
    low = cloud.positions.min(axis=0) - margin
    high = cloud.positions.max(axis=0) + margin
    outliers = rng.uniform(low, high, size=(count, 3))

    def extended(values, width):
        if values is None:
            return None
        return np.concatenate([values, np.full((count, width), np.nan)])

    mask = np.zeros(len(cloud), dtype=bool) if cloud.outlier_mask is None else cloud.outlier_mask
    return PointCloud(
        positions=np.concatenate([cloud.positions, outliers]),
        gt_normals=extended(cloud.gt_normals, 3),
        gt_curvatures=extended(cloud.gt_curvatures, 2),
        eval_indices=cloud.query_indices if cloud.eval_indices is None else cloud.eval_indices,
        outlier_mask=np.concatenate([mask, np.ones(count, dtype=bool)]),
        name=cloud.name,
    )
