"""Versioned checkpoint container.

A checkpoint is gzip-compressed JSON:

    {"format": "jetfit-checkpoint", "version": 1, "metadata": {...},
     "tensors": [{"name": ..., "shape": [...], "dtype": "float32",
                  "data": base64(row-major little-endian float32)}, ...]}

Network tensors are named "net/<state_dict key>", optimizer tensors
"optim/<name>". The gzip header carries no timestamp, so equal content gives
equal bytes.
"""

import base64
import gzip
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from loguru import logger

from jetfit.errors import CheckpointError
from jetfit.pipeline import WeightedJetFitter
from jetfit.weightnet import WeightNet, WeightNetConfig

FORMAT_NAME = "jetfit-checkpoint"
FORMAT_VERSION = 1
NET_PREFIX = "net/"
OPTIM_PREFIX = "optim/"


@dataclass
class Checkpoint:
    metadata: dict
    net_state: dict = field(default_factory=dict)  # state_dict key -> float32 tensor
    optim_state: dict = field(default_factory=dict)  # name -> float32 tensor

    @property
    def net_config(self) -> WeightNetConfig:
        try:
            return WeightNetConfig.from_dict(self.metadata["net_config"])
        except (KeyError, TypeError) as e:
            raise CheckpointError(f"checkpoint metadata has no usable net_config: {e}") from e


def _encode(name: str, tensor: torch.Tensor) -> dict:
    # shape from the tensor, 0-d buffers stay 0-d
    array = np.ascontiguousarray(tensor.detach().cpu().to(torch.float64).numpy(), dtype="<f4")
    return {
        "name": name,
        "shape": list(tensor.shape),
        "dtype": "float32",
        "data": base64.b64encode(array.tobytes()).decode("ascii"),
    }


def _decode(entry: dict) -> torch.Tensor:
    if entry.get("dtype") != "float32":
        raise CheckpointError(f"tensor {entry.get('name')!r} has unsupported dtype {entry.get('dtype')!r}")
    shape = tuple(entry["shape"])
    array = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f4")
    if array.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"tensor {entry['name']!r} holds {array.size} values, shape {shape} needs more or fewer")
    return torch.from_numpy(array.reshape(shape).astype(np.float32))


def save_checkpoint(path, net: WeightNet, metadata: dict = None, optim_state: dict = None) -> Path:
    """Write net parameters/buffers (and optional optimizer tensors) to path."""
    path = Path(path)
    metadata = dict(metadata or {})
    metadata["net_config"] = net.config.as_dict()
    tensors = [_encode(NET_PREFIX + name, value) for name, value in net.state_dict().items()]
    for name, value in (optim_state or {}).items():
        tensors.append(_encode(OPTIM_PREFIX + name, torch.as_tensor(value)))
    document = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "metadata": metadata, "tensors": tensors}
    payload = json.dumps(document, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as raw:
        with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as f:
            f.write(payload)
    logger.debug(f"Saved checkpoint {path.name} ({len(tensors)} tensors).")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} doesn't exist")
    try:
        with gzip.open(path, "rt", encoding="utf-8") as f:
            document = json.load(f)
    except (OSError, EOFError, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"can't read checkpoint {path}: {e}") from e

    if not isinstance(document, dict) or document.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path} is not a {FORMAT_NAME} file")
    version = document.get("version")
    if not isinstance(version, int) or version > FORMAT_VERSION:
        raise CheckpointError(f"{path} has unsupported version {version!r} (this reader handles <= {FORMAT_VERSION})")

    checkpoint = Checkpoint(metadata=document.get("metadata", {}))
    for entry in document.get("tensors", []):
        name = entry.get("name", "")
        if name.startswith(NET_PREFIX):
            checkpoint.net_state[name[len(NET_PREFIX):]] = _decode(entry)
        elif name.startswith(OPTIM_PREFIX):
            checkpoint.optim_state[name[len(OPTIM_PREFIX):]] = _decode(entry)
        else:
            raise CheckpointError(f"unknown tensor namespace in {name!r}")
    logger.debug(f"Loaded checkpoint {path.name}: {len(checkpoint.net_state)} net tensors, "
                 f"{len(checkpoint.optim_state)} optimizer tensors.")
    return checkpoint


def restore_net(checkpoint: Checkpoint, dtype=torch.float32) -> WeightNet:
    net = WeightNet(checkpoint.net_config)
    reference = net.state_dict()
    missing = sorted(set(reference) - set(checkpoint.net_state))
    unexpected = sorted(set(checkpoint.net_state) - set(reference))
    if missing or unexpected:
        raise CheckpointError(f"checkpoint doesn't match the network: missing {missing[:5]}, unexpected {unexpected[:5]}")
    state = {}
    for name, value in reference.items():
        stored = checkpoint.net_state[name]
        if tuple(stored.shape) != tuple(value.shape):
            raise CheckpointError(f"tensor {name!r} has shape {tuple(stored.shape)}, expected {tuple(value.shape)}")
        # integer buffers (BatchNorm step counters) round-trip through float32
        state[name] = stored.round().to(value.dtype) if not value.is_floating_point() else stored
    net.load_state_dict(state)
    return net.to(dtype)


def load_fitter(path, order: int = None, ridge: float = None, dtype=torch.float32) -> WeightedJetFitter:
    """Weight network + jet settings stored in a checkpoint; order/ridge override the stored values."""
    checkpoint = load_checkpoint(path)
    metadata = checkpoint.metadata
    return WeightedJetFitter(
        restore_net(checkpoint, dtype=dtype),
        order=int(metadata.get("jet_order", 3)) if order is None else order,
        ridge=float(metadata.get("ridge", 1e-8)) if ridge is None else ridge,
    )
