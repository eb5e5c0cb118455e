"""Margin loss on capsule lengths and the combined training objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .decoder import one_hot
from .tensor import Tensor, add, as_tensor, mean, mul, relu, square, sub, sum_


@dataclass(frozen=True)
class LossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_down: float = 0.5
    recon_weight: float = 0.0005

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus <= 1:
            raise ValueError("need 0 < m_minus < m_plus <= 1")
        if self.recon_weight < 0:
            raise ValueError("recon_weight must be >= 0")
        if self.lambda_down < 0:
            raise ValueError("lambda_down must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def margin_loss(lengths, targets, cfg: LossConfig = LossConfig()) -> Tensor:
    """Batch mean of ``sum_k T_k max(0, m+ - |v_k|)^2 + lambda (1 - T_k) max(0, |v_k| - m-)^2``."""
    lengths = as_tensor(lengths)
    if lengths.ndim == 1:
        lengths = lengths.reshape(1, -1)
    t = one_hot(np.asarray(targets).reshape(-1), lengths.shape[1], lengths.dtype)
    if t.shape[0] != lengths.shape[0]:
        raise ValueError("one target per sample required")
    present = mul(square(relu(sub(cfg.m_plus, lengths))), t)
    absent = mul(square(relu(sub(lengths, cfg.m_minus))), cfg.lambda_down * (1.0 - t))
    return mean(sum_(add(present, absent), axis=1))


def total_loss(margin, recon, alpha: float) -> Tensor:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return add(margin, mul(recon, alpha))
