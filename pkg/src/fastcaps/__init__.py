"""Capsule networks with consistent dynamic routing, built on numpy."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetManifest, SynthParams, load_idx, middle_slice, split, synth_nodules
from .losses import LossConfig, margin_loss, total_loss
from .metrics import EvalReport, pr_curve
from .network import CapsNet, ModelConfig, build_model, forward, param_count, predict, preset
from .routing import RoutingGrouping, coefficient_count, route, squash
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, precision, set_precision
from .train import Trainer, TrainConfig, evaluate
from .version import BUILD_VERSION, __version__

__all__ = [
    "BUILD_VERSION", "CapsNet", "DatasetManifest", "EvalReport", "LossConfig", "ModelConfig",
    "NonFiniteError", "RoutingGrouping", "ShapeError", "SynthParams", "Tape", "Tensor", "TrainConfig",
    "Trainer", "build_model", "coefficient_count", "evaluate", "forward", "load_checkpoint", "load_idx",
    "margin_loss", "middle_slice", "param_count", "pr_curve", "precision", "predict", "preset", "route",
    "save_checkpoint", "set_precision", "split", "squash", "synth_nodules", "total_loss",
]
