"""Layer-wise (trust-ratio) and adaptive-moment optimizers on array lists.

Both optimizers treat a model as a flat list of float64 arrays paired with
a congruent list of gradients, and return fresh arrays rather than
mutating in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


def bias_like(arr: np.ndarray) -> bool:
    """Default exclusion rule: vectors and scalars skip trust adaptation."""
    return arr.ndim < 2


@dataclass(frozen=True)
class LarsConfig:
    base_lr: float
    weight_decay: float = 1.5e-6
    trust: float = 0.001
    exclude: Callable[[np.ndarray], bool] = bias_like

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")


def lars_step(
    params: list[np.ndarray], grads: list[np.ndarray], config: LarsConfig
) -> list[np.ndarray]:
    """One trust-ratio update.

    Included tensors scale their step by trust * |w| / (|g| + wd * |w|)
    and take weight decay; excluded (bias-like) tensors take the plain
    base_lr * g step with no decay.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    out = []
    for w, g in zip(params, grads):
        if w.shape != g.shape:
            raise ValueError(f"shape mismatch {w.shape} vs {g.shape}")
        if config.exclude(w):
            out.append(w - config.base_lr * g)
            continue
        norm_w = float(np.linalg.norm(w))
        norm_g = float(np.linalg.norm(g))
        denom = norm_g + config.weight_decay * norm_w
        local_lr = config.trust * norm_w / denom if norm_w > 0 and denom > 0 else 0.0
        out.append(w - config.base_lr * local_lr * (g + config.weight_decay * w))
    return out


@dataclass(frozen=True)
class AdamConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = False  # True = AdamW-style decay added outside the moments

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


@dataclass
class AdamMoments:
    step: int
    first: list[np.ndarray]
    second: list[np.ndarray]


def init_moments(params: list[np.ndarray]) -> AdamMoments:
    return AdamMoments(
        step=0,
        first=[np.zeros_like(p) for p in params],
        second=[np.zeros_like(p) for p in params],
    )


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    moments: AdamMoments,
    config: AdamConfig,
) -> tuple[list[np.ndarray], AdamMoments]:
    """Standard bias-corrected moment update; decay coupled or decoupled."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    t = moments.step + 1
    correct1 = 1.0 - config.beta1**t
    correct2 = 1.0 - config.beta2**t
    new_params, new_first, new_second = [], [], []
    for w, g, m, v in zip(params, grads, moments.first, moments.second):
        if w.shape != g.shape:
            raise ValueError(f"shape mismatch {w.shape} vs {g.shape}")
        if config.weight_decay and not config.decoupled:
            g = g + config.weight_decay * w
        m = config.beta1 * m + (1.0 - config.beta1) * g
        v = config.beta2 * v + (1.0 - config.beta2) * g * g
        step = config.lr * (m / correct1) / (np.sqrt(v / correct2) + config.eps)
        if config.weight_decay and config.decoupled:
            step = step + config.lr * config.weight_decay * w
        new_params.append(w - step)
        new_first.append(m)
        new_second.append(v)
    return new_params, AdamMoments(step=t, first=new_first, second=new_second)
