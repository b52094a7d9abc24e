"""Loss-weight schedules."""

from __future__ import annotations

from .core import TrainConfig


def lambda_ds_at(t: int, cfg: TrainConfig) -> float:
    """Diversity weight, decayed linearly to zero over ``ds_decay_iterations``."""
    if t < 0:
        raise ValueError("iteration must be >= 0")
    return max(0.0, cfg.lambda_ds * (1.0 - t / cfg.ds_decay_iterations))


def lambda_seg_at(t: int, cfg: TrainConfig) -> float:
    if t < 0:
        raise ValueError("iteration must be >= 0")
    return 0.0 if t < cfg.seg_warmup_iterations else cfg.lambda_seg
