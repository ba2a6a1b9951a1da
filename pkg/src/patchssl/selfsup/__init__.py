"""Self-supervised objectives, layer-wise optimizers, and the pretraining loop."""

from .losses import (
    NtXentConfig,
    SwavState,
    byol_loss,
    ema_update,
    nt_xent_loss,
    sinkhorn_assign,
    swav_codes,
    swav_loss,
    swav_loss_with_codes,
)
from .optim import AdamConfig, AdamMoments, LarsConfig, adam_step, init_moments, lars_step
from .pretrain import LossRecord, PretrainResult, PretrainSchedule, pretrain

__all__ = [
    "AdamConfig",
    "AdamMoments",
    "LarsConfig",
    "LossRecord",
    "NtXentConfig",
    "PretrainResult",
    "PretrainSchedule",
    "SwavState",
    "adam_step",
    "byol_loss",
    "ema_update",
    "init_moments",
    "lars_step",
    "nt_xent_loss",
    "pretrain",
    "sinkhorn_assign",
    "swav_codes",
    "swav_loss",
    "swav_loss_with_codes",
]
