"""Losses, reverse-mode gradients, Adam and the training loop for the weight network."""

import os
import queue
import threading
from dataclasses import dataclass, field, fields, replace, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import torch
from loguru import logger

from jetfit import __version__
from jetfit.checkpoint import save_checkpoint, load_checkpoint, restore_net
from jetfit.data_io import add_gaussian_noise, load_clouds
from jetfit.errors import InvalidInputError
from jetfit.evaluation import angle_error_unoriented, rmse
from jetfit.jet_core import check_order
from jetfit.metric_frames import EpochLogFrame
from jetfit.neighborhood import PointCloud, extract_patches
from jetfit.pipeline import WeightedJetFitter, FitOutput
from jetfit.weightnet import WeightNetConfig
from tools.GracefulKiller import GracefulKiller
from tools.helper_tools import load_properties
from tools.run_once_per_interval import run_once_per_interval
from tools.timer import Timer

# ======================================================================================
# Parameters

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
PROGRESS_INTERVAL = 10  # seconds between step-progress log lines
FEEDER_QUEUE_SIZE = 4
BEST_CHECKPOINT = "best.ckpt.json.gz"
LAST_CHECKPOINT = "last.ckpt.json.gz"
METRICS_FILE = "metrics.csv"

# keys that locate files rather than shape the computation; kept out of checkpoints
MACHINE_KEYS = ("train_manifest", "output_dir", "resume_from", "threads")

# ======================================================================================


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 0.1

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise InvalidInputError(f"loss weights must be non-negative, got {self.alpha1}, {self.alpha2}")


def _parse_bool(value: str) -> bool:
    match value.strip().lower():
        case "1" | "true" | "yes" | "on":
            return True
        case "0" | "false" | "no" | "off":
            return False
        case _:
            raise InvalidInputError(f"expected a boolean, got '{value}'")


def _parse_floats(value) -> tuple:
    if isinstance(value, str):
        return tuple(float(token) for token in value.replace(",", " ").split())
    return tuple(float(v) for v in value)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 1e-3
    epochs: int = 10
    samples_per_epoch: int = 4096
    k_neighbors: int = 256
    jet_order: int = 3
    seed: int = 0
    alpha1: float = 1.0
    alpha2: float = 0.1
    ridge: float = 1e-8
    epsilon: float = 1e-4
    train_manifest: Optional[str] = None
    output_dir: str = "runs/train"
    net_size: str = "full"
    log_regularizer: bool = True
    validation_fraction: float = 0.1
    validation_samples: int = 1024
    noise_levels: tuple = ()
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    resume_from: Optional[str] = None
    max_steps: int = 0  # 0 = no limit

    def __post_init__(self):
        object.__setattr__(self, "noise_levels", _parse_floats(self.noise_levels))
        for name in ("batch_size", "epochs", "samples_per_epoch", "k_neighbors", "validation_samples", "threads"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("learning_rate", "epsilon"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive, got {getattr(self, name)}")
        if self.ridge < 0 or self.max_steps < 0 or any(level < 0 for level in self.noise_levels):
            raise InvalidInputError("ridge, max_steps and noise_levels must be non-negative")
        if not 0 < self.validation_fraction < 1:
            raise InvalidInputError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
        check_order(self.jet_order)
        WeightNetConfig.named(self.net_size)
        LossWeights(self.alpha1, self.alpha2)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha1, self.alpha2)

    @property
    def net_config(self) -> WeightNetConfig:
        return WeightNetConfig.named(self.net_size, epsilon=self.epsilon)

    @classmethod
    def from_strings(cls, values: dict) -> "TrainConfig":
        """Typed config from raw 'key = value' strings; unknown keys are rejected."""
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise InvalidInputError(f"unknown config keys: {', '.join(unknown)}")
        typed = {}
        for key, value in values.items():
            if not isinstance(value, str):
                typed[key] = value
                continue
            default = known[key].default
            if known[key].type is bool:
                typed[key] = _parse_bool(value)
            elif known[key].type is tuple:
                typed[key] = _parse_floats(value)
            elif known[key].type in (int, float):
                try:
                    typed[key] = known[key].type(value)
                except ValueError:
                    raise InvalidInputError(f"config key {key} expects {known[key].type.__name__}, got '{value}'") \
                        from None
            else:
                typed[key] = None if value.lower() in ("", "none") and default is None else value
        return cls(**typed)

    @classmethod
    def load(cls, properties_file=None, **overrides) -> "TrainConfig":
        """Precedence: explicit overrides (CLI flags) > properties file > defaults. None overrides are ignored."""
        values = load_properties(properties_file) if properties_file is not None else {}
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls.from_strings(values)

    def as_dict(self, portable: bool = False) -> dict:
        d = asdict(self)
        d["noise_levels"] = list(self.noise_levels)
        if portable:
            for key in MACHINE_KEYS:
                d.pop(key)
        return d


# ======================================================================================
# Losses


def _cross_norm(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a, b = torch.broadcast_tensors(a, b)
    return torch.linalg.vector_norm(torch.linalg.cross(a, b, dim=-1), dim=-1)


def sin_loss(n_est: torch.Tensor, n_gt: torch.Tensor) -> torch.Tensor:
    """|n_gt x n_est|: sine of the angle between unoriented normals."""
    n_gt = torch.as_tensor(n_gt, dtype=n_est.dtype)
    return _cross_norm(n_gt, n_est)


def consistency_loss(weights: torch.Tensor, neighbor_normals: torch.Tensor, n_gt: torch.Tensor,
                     log_regularizer: bool = True) -> torch.Tensor:
    """(1/k) [ -sum log w_j + sum w_j |n_gt x N_j| ] over the last axis of weights."""
    if (weights <= 0).any():
        raise InvalidInputError("consistency loss needs strictly positive weights")
    dtype = neighbor_normals.dtype
    weights = weights.to(dtype)
    n_gt = torch.as_tensor(n_gt, dtype=dtype).unsqueeze(-2)
    terms = weights * _cross_norm(n_gt, neighbor_normals)
    if log_regularizer:
        terms = terms - torch.log(weights)
    return terms.mean(dim=-1)


def reg_loss(transforms) -> torch.Tensor:
    """sum over transforms of sum |I - A A^T| (entrywise)."""
    total = None
    for a in transforms:
        a = torch.as_tensor(a)
        eye = torch.eye(a.shape[-1], dtype=a.dtype, device=a.device)
        term = (eye - a @ a.transpose(-1, -2)).abs().sum(dim=(-2, -1))
        total = term if total is None else total + term
    return torch.zeros(()) if total is None else total


@dataclass
class LossTerms:
    total: torch.Tensor
    sin: torch.Tensor
    consistency: torch.Tensor
    reg: torch.Tensor

    def as_floats(self) -> dict:
        return {
            "loss": float(self.total),
            "sin_loss": float(self.sin),
            "consistency_loss": float(self.consistency),
            "reg_loss": float(self.reg),
        }


def total_loss(output: FitOutput, n_gt, loss_weights: LossWeights = LossWeights(),
               log_regularizer: bool = True) -> LossTerms:
    """Batch mean of sin + alpha1 * consistency + alpha2 * reg; n_gt in the patch frame."""
    n_gt = torch.as_tensor(n_gt, dtype=output.normals.dtype)
    sin = sin_loss(output.normals, n_gt).mean()
    consistency = consistency_loss(output.weights, output.neighbor_normals, n_gt, log_regularizer).mean()
    reg = reg_loss(output.transforms).mean().to(sin.dtype)
    total = sin + loss_weights.alpha1 * consistency + loss_weights.alpha2 * reg
    return LossTerms(total=total, sin=sin, consistency=consistency, reg=reg)


def backward(loss: torch.Tensor, params: dict) -> dict:
    """Reverse-mode gradient of loss for every named parameter (zeros where the loss doesn't depend on it)."""
    names = list(params)
    grads = torch.autograd.grad(loss, [params[name] for name in names], allow_unused=True)
    return {name: torch.zeros_like(params[name]) if grad is None else grad for name, grad in zip(names, grads)}


# ======================================================================================
# Adam


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def create(cls, params: dict) -> "AdamState":
        return cls(
            step=0,
            m={name: torch.zeros_like(p, memory_format=torch.preserve_format).detach() for name, p in params.items()},
            v={name: torch.zeros_like(p, memory_format=torch.preserve_format).detach() for name, p in params.items()},
        )

    def as_tensors(self) -> dict:
        tensors = {"step": torch.tensor([float(self.step)])}
        tensors.update({f"m/{name}": value for name, value in self.m.items()})
        tensors.update({f"v/{name}": value for name, value in self.v.items()})
        return tensors

    @classmethod
    def from_tensors(cls, tensors: dict, params: dict) -> "AdamState":
        try:
            return cls(
                step=int(round(float(tensors["step"].reshape(-1)[0]))),
                m={name: tensors[f"m/{name}"].to(p.dtype).reshape(p.shape).clone() for name, p in params.items()},
                v={name: tensors[f"v/{name}"].to(p.dtype).reshape(p.shape).clone() for name, p in params.items()},
            )
        except KeyError as e:
            raise InvalidInputError(f"optimizer state lacks tensor {e}") from e


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, betas=ADAM_BETAS, eps=ADAM_EPS) -> AdamState:
    """Bias-corrected Adam update applied in place to params; state moments updated in place."""
    beta1, beta2 = betas
    state.step += 1
    bias_correction_1 = 1 - beta1 ** state.step
    bias_correction_2 = 1 - beta2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise InvalidInputError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
            state.m[name].mul_(beta1).add_((1 - beta1) * g)
            state.v[name].mul_(beta2).add_((1 - beta2) * g * g)
            p_mom = state.m[name] / bias_correction_1
            p_2nd_mom = state.v[name] / bias_correction_2
            p.add_(-lr * p_mom / (torch.sqrt(p_2nd_mom) + eps))
    return state


# ======================================================================================
# Batches


@dataclass
class TrainBatch:
    local_points: np.ndarray  # (B, k, 3)
    gt_normals: np.ndarray  # (B, 3) in each patch's frame

    def __len__(self) -> int:
        return len(self.local_points)


def _eligible(cloud: PointCloud) -> np.ndarray:
    ok = np.isfinite(cloud.gt_normals).all(axis=1)
    if cloud.outlier_mask is not None:
        ok &= ~cloud.outlier_mask
    return np.flatnonzero(ok)


class PatchFeeder:
    """Samples (shape, corruption variant, query point) triples and turns them into patch batches.

    Every epoch draws from its own generator seeded by (seed, epoch), so a run
    resumed at an epoch boundary sees the same batches as an uninterrupted one.
    """

    def __init__(self, clouds: list, config: TrainConfig):
        self.config = config
        self.k = config.k_neighbors
        self.variants = []
        self.train_pools = []
        self.validation_pools = []
        split_rng = np.random.default_rng([config.seed, 0x5EED])
        for i, cloud in enumerate(clouds):
            if not cloud.has_normals:
                raise InvalidInputError(f"training shape {cloud.name} has no ground-truth normals")
            if len(cloud) < self.k:
                raise InvalidInputError(f"training shape {cloud.name} has {len(cloud)} points, fewer than k={self.k}")
            noisy = [add_gaussian_noise(cloud, level, seed=config.seed * 1000 + 10 * i + j)
                     for j, level in enumerate(config.noise_levels, start=1)]
            self.variants.append([cloud] + noisy)
            eligible = split_rng.permutation(_eligible(cloud))
            held_out = max(1, int(round(config.validation_fraction * len(eligible))))
            if len(eligible) - held_out < 1:
                raise InvalidInputError(f"training shape {cloud.name} has too few points with normals")
            self.validation_pools.append(np.sort(eligible[:held_out]))
            self.train_pools.append(np.sort(eligible[held_out:]))
        if not self.variants:
            raise InvalidInputError("training dataset is empty")
        self.batches_per_epoch = max(1, config.samples_per_epoch // config.batch_size)

    def _draw(self, rng: np.random.Generator, pools: list, count: int) -> np.ndarray:
        """(count, 3) rows of (cloud, variant, point)."""
        shapes = rng.integers(0, len(pools), count)
        variants = rng.integers(0, len(self.variants[0]), count)
        points = np.array([pools[s][rng.integers(0, len(pools[s]))] for s in shapes], dtype=np.int64)
        return np.stack([shapes, variants, points], axis=1) if count else np.empty((0, 3), dtype=np.int64)

    def make_batch(self, plan: np.ndarray) -> TrainBatch:
        local_points, gt_normals = [], []
        for shape, variant in sorted({(int(s), int(v)) for s, v, _ in plan}):
            rows = plan[(plan[:, 0] == shape) & (plan[:, 1] == variant)]
            cloud = self.variants[shape][variant]
            patches = extract_patches(cloud, rows[:, 2], self.k)
            keep = ~patches.degenerate
            local_points.append(patches.local_points[keep])
            # world -> patch frame: basis^T n
            gt_normals.append(np.einsum("bji,bj->bi", patches.bases[keep], cloud.gt_normals[rows[keep, 2]]))
        return TrainBatch(np.concatenate(local_points), np.concatenate(gt_normals))

    def epoch_plans(self, epoch: int) -> list:
        rng = np.random.default_rng([self.config.seed, epoch])
        size = self.config.batch_size
        return [self._draw(rng, self.train_pools, size) for _ in range(self.batches_per_epoch)]

    def validation_batch(self) -> TrainBatch:
        rng = np.random.default_rng([self.config.seed, 0xFA11])
        total = sum(len(pool) for pool in self.validation_pools)
        return self.make_batch(self._draw(rng, self.validation_pools, min(self.config.validation_samples, total)))

    def batches(self, epoch: int, threads: int = 1, stop: threading.Event = None):
        """Yield the epoch's batches; with threads > 1 they're built ahead on a background thread."""
        plans = self.epoch_plans(epoch)
        if threads <= 1:
            for plan in plans:
                yield self.make_batch(plan)
            return

        q = queue.Queue(maxsize=FEEDER_QUEUE_SIZE)
        stop = threading.Event() if stop is None else stop

        def produce():
            try:
                for plan in plans:
                    if stop.is_set():
                        break
                    q.put(self.make_batch(plan))
            except Exception as e:
                q.put(e)
            finally:
                q.put(None)

        producer = threading.Thread(target=produce, name="patch-feeder", daemon=True)
        producer.start()
        try:
            while True:
                item = q.get()
                if item is None:
                    break
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            stop.set()
            # unblock a producer waiting on a full queue
            while producer.is_alive():
                try:
                    q.get_nowait()
                except queue.Empty:
                    producer.join(timeout=0.05)


# ======================================================================================
# Training loop


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    metrics_path: Path
    history: list
    steps: int
    best_val_rmse_deg: float
    stopped_early: bool = False


def validation_rmse(fitter: WeightedJetFitter, batch: TrainBatch) -> float:
    """Unoriented angle RMSE (degrees) of the fitter's normals on a fixed batch."""
    was_training = fitter.training
    fitter.eval()
    dtype = next(fitter.parameters()).dtype if fitter.net is not None else torch.float64
    with torch.no_grad():
        output = fitter(torch.as_tensor(batch.local_points, dtype=dtype))
    if was_training:
        fitter.train()
    return rmse(angle_error_unoriented(output.normals.numpy(), batch.gt_normals))


class Trainer:
    def __init__(self, config: TrainConfig, clouds: list, display: bool = False):
        self.config = config
        self.display = display
        self.output_dir = Path(config.output_dir)
        self.progress_interval = PROGRESS_INTERVAL
        self.feeder = PatchFeeder(clouds, config)
        self.fitter = WeightedJetFitter.create(config.seed, config.net_config, order=config.jet_order,
                                               ridge=config.ridge)
        self.params = dict(self.fitter.net.named_parameters())
        self.state = AdamState.create(self.params)
        self.epoch = 0
        self.best_val_rmse = np.inf
        self.metrics = EpochLogFrame(output_folder=self.output_dir, filename=METRICS_FILE)
        if config.resume_from is not None:
            self.resume(config.resume_from)

    def resume(self, path) -> None:
        checkpoint = load_checkpoint(path)
        restored = restore_net(checkpoint, dtype=next(self.fitter.net.parameters()).dtype)
        self.fitter.net.load_state_dict(restored.state_dict())
        self.state = AdamState.from_tensors(checkpoint.optim_state, self.params)
        self.epoch = int(checkpoint.metadata.get("epoch", 0))
        self.best_val_rmse = float(checkpoint.metadata.get("best_val_rmse_deg", np.inf))
        self.metrics.best_rmse = self.best_val_rmse
        logger.info(f"Resumed from {Path(path).name} at epoch {self.epoch}, step {self.state.step}.")

    def _metadata(self, val_rmse: float) -> dict:
        return {
            "jetfit_version": __version__,
            "epoch": self.epoch,
            "step": self.state.step,
            "jet_order": self.config.jet_order,
            "ridge": self.config.ridge,
            "k_neighbors": self.config.k_neighbors,
            "val_rmse_deg": val_rmse,
            "best_val_rmse_deg": self.best_val_rmse,
            "config": self.config.as_dict(portable=True),
        }

    def _save(self, name: str, val_rmse: float) -> Path:
        return save_checkpoint(self.output_dir / name, self.fitter.net, self._metadata(val_rmse),
                               self.state.as_tensors())

    @run_once_per_interval("progress_interval")
    def _log_progress(self, epoch: int, batch_number: int, terms: dict) -> None:
        logger.info(f"epoch {epoch} batch {batch_number}/{self.feeder.batches_per_epoch} step {self.state.step}: "
                    f"loss {terms['loss']:.5f}")

    def train_step(self, batch: TrainBatch) -> tuple:
        self.fitter.train()
        output = self.fitter(torch.as_tensor(batch.local_points, dtype=next(self.fitter.net.parameters()).dtype))
        terms = total_loss(output, batch.gt_normals, self.config.loss_weights, self.config.log_regularizer)
        grads = backward(terms.total, self.params)
        adam_step(self.params, grads, self.state, self.config.learning_rate)
        return terms.as_floats(), float(output.weights.detach().mean())

    def run(self) -> TrainResult:
        config = self.config
        validation = self.feeder.validation_batch()
        history = []
        stopped_early = False
        val_rmse = np.nan
        timer = Timer(autostart=True)

        with GracefulKiller() as killer:
            while self.epoch < config.epochs and not stopped_early:
                sums = {"loss": 0.0, "sin_loss": 0.0, "consistency_loss": 0.0, "reg_loss": 0.0}
                mean_weight, batches = 0.0, 0
                for batch_number, batch in enumerate(self.feeder.batches(self.epoch, config.threads), start=1):
                    if len(batch) < 2:  # batch statistics need two samples
                        continue
                    terms, batch_mean_weight = self.train_step(batch)
                    for key in sums:
                        sums[key] += terms[key]
                    mean_weight += batch_mean_weight
                    batches += 1
                    self._log_progress(self.epoch, batch_number, terms)
                    if killer.kill_now or (config.max_steps and self.state.step >= config.max_steps):
                        stopped_early = True
                        break

                if stopped_early and killer.kill_now:
                    logger.warning(f"Training interrupted in epoch {self.epoch}; saving last checkpoint.")
                    self._save(LAST_CHECKPOINT, val_rmse)
                    break

                self.epoch += 1
                val_rmse = validation_rmse(self.fitter, validation)
                record = {key: value / max(batches, 1) for key, value in sums.items()}
                record.update(epoch=self.epoch, step=self.state.step, mean_weight=mean_weight / max(batches, 1),
                              val_rmse_deg=val_rmse, elapsed_s=round(timer.elapsed(), 3))
                improved = self.metrics.log_epoch(record, display=self.display)
                logger.info(f"epoch {self.epoch}/{config.epochs}: loss {record['loss']:.5f}, "
                            f"mean weight {record['mean_weight']:.3f}, val RMSE {val_rmse:.3f} deg")
                history.append(record)
                if improved:
                    self.best_val_rmse = val_rmse
                    self._save(BEST_CHECKPOINT, val_rmse)
                self._save(LAST_CHECKPOINT, val_rmse)
                self.metrics.save_chunk()

        if not (self.output_dir / BEST_CHECKPOINT).is_file():
            self._save(BEST_CHECKPOINT, val_rmse)
        logger.success(f"Training finished after {self.state.step} steps in {timer.elapsed(_format='hms')}; "
                       f"best val RMSE {self.best_val_rmse:.3f} deg.")
        return TrainResult(
            best_checkpoint=self.output_dir / BEST_CHECKPOINT,
            last_checkpoint=self.output_dir / LAST_CHECKPOINT,
            metrics_path=self.metrics.path,
            history=history,
            steps=self.state.step,
            best_val_rmse_deg=self.best_val_rmse,
            stopped_early=stopped_early,
        )


def train(config: TrainConfig, dataset: list = None, display: bool = False) -> TrainResult:
    """Train a weight network; dataset defaults to the shapes of config.train_manifest.

    display prints a colored line per epoch to stdout.
    """
    if dataset is None:
        if config.train_manifest is None:
            raise InvalidInputError("no training data: pass clouds or set train_manifest")
        dataset = load_clouds(config.train_manifest)
    deterministic = config.threads == 1
    previous_threads = torch.get_num_threads()
    previous_deterministic = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(config.threads)
    torch.use_deterministic_algorithms(deterministic or previous_deterministic, warn_only=True)
    try:
        logger.info(f"Training on {len(dataset)} shapes, k={config.k_neighbors}, order {config.jet_order}, "
                    f"{config.net_size} net, {config.threads} thread(s).")
        return Trainer(config, dataset, display=display).run()
    finally:
        torch.set_num_threads(previous_threads)
        torch.use_deterministic_algorithms(previous_deterministic)


def run_ablation(config: TrainConfig, dataset: list, orders=(1, 2, 3, 4), ks=(64, 128, 256)) -> pd.DataFrame:
    """Train one network per (jet order, k) pair; returns best validation RMSE per pair."""
    rows = []
    for order in orders:
        for k in ks:
            run_config = replace(config, jet_order=order, k_neighbors=k, resume_from=None,
                                 output_dir=str(Path(config.output_dir) / f"order{order}_k{k}"))
            result = train(run_config, dataset)
            rows.append((order, k, result.best_val_rmse_deg, result.steps))
    table = pd.DataFrame(rows, columns=("jet_order", "k_neighbors", "best_val_rmse_deg", "steps"))
    logger.info(f"Ablation results:\n{table}")
    return table
