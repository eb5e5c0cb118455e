"""Checkpoint persistence on top of the tensor container."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import container
from .network import CapsNet, ModelConfig, expected_shapes
from .tensor import Tensor
from .version import BUILD_VERSION


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: CapsNet, meta: dict | None = None,
                    optimizer=None, run_config: dict | None = None) -> None:
    tensors = {name: p.data for name, p in model.params.items()}
    info = {"config": model.config.to_dict(), "meta": meta or {}, "run_config": run_config or {},
            "version": BUILD_VERSION}
    if optimizer is not None:
        tensors.update(optimizer.state_arrays())
        info["optimizer"] = {"name": "adam", "step": optimizer.step_count, "lr": optimizer.lr,
                             "betas": [optimizer.beta1, optimizer.beta2], "eps": optimizer.eps}
    container.save(path, tensors, info, kind="checkpoint")


def load_checkpoint(path: str | Path):
    """Returns ``(model, info, tensors)``; ``tensors`` still holds optimizer state if saved."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    tensors, info, kind = container.load(path)
    if kind != "checkpoint":
        raise CheckpointError(f"{path} holds a {kind}, not a checkpoint")
    config = ModelConfig.from_dict(info["config"])
    params = {}
    for name, shape in expected_shapes(config).items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, expected {shape}")
        arr = np.array(tensors[name])
        params[name] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
    return CapsNet(config, params), info, tensors
