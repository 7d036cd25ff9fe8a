"""DP-SGD style gradient transform: per-sample L2 clipping plus Gaussian noise."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeMismatch
from .model import ParamVector, loss_and_grad, sgd_step


@dataclass(frozen=True)
class DpSgdConfig:
    clip_norm: float
    noise_scale: float
    seed: int = 0

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be non-negative")


def clip_l2(g: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale ``g`` down so its L2 norm is at most ``clip_norm``."""
    g = np.asarray(g, dtype=np.float64)
    norm = np.linalg.norm(g)
    return g / max(1.0, norm / clip_norm)


def noise_rng(seed: int, sample_index: int = 0) -> np.random.Generator:
    # one independent stream per sample, so noising can be split across workers
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(sample_index,)))


def dp_transform(g: np.ndarray, cfg: DpSgdConfig, sample_index: int = 0) -> np.ndarray:
    clipped = clip_l2(g, cfg.clip_norm)
    if cfg.noise_scale == 0:
        return clipped
    std = cfg.noise_scale * cfg.clip_norm
    return clipped + noise_rng(cfg.seed, sample_index).normal(0.0, std, size=clipped.shape)


def dp_sgd_train_step(params: ParamVector, batch: Sequence[tuple[np.ndarray, Sequence[int]]],
                      cfg: DpSgdConfig, lr: float) -> ParamVector:
    """One DP-SGD update from a batch of ``(features, transcript)`` samples."""
    if not batch:
        raise ShapeMismatch("batch must be nonempty")
    total = None
    for i, (x, y) in enumerate(batch):
        _, view = loss_and_grad(params, x, y)
        noised = dp_transform(view.full, cfg, sample_index=i)
        total = noised if total is None else total + noised
    return sgd_step(params, total / len(batch), lr)
