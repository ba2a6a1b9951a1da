"""The pretraining loop: view generation, method dispatch, model selection.

One run owns three kinds of networks built from the same dense-layer
primitive: the encoder proper, a projection head (one hidden layer,
m -> m -> m), and — for the bootstrap method — a same-shape predictor plus
exponential-moving-average copies of the encoder and head. Checkpoints
snapshot the encoder only; heads are pretraining scaffolding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..augment import AugmentPipeline, apply_view, sample_view_specs
from ..encoder import (
    EncoderParams,
    encode,
    encode_backward,
    grad_arrays,
    init_params,
    param_arrays,
)
from ..errors import DataError
from ..imaging import UINT16_MAX, Image16
from .losses import (
    NtXentConfig,
    SwavState,
    byol_loss,
    ema_update,
    nt_xent_loss,
    swav_codes,
    swav_loss,
    swav_loss_with_codes,
)
from .optim import AdamConfig, LarsConfig, adam_step, init_moments, lars_step

METHODS = ("simclr", "byol", "swav")

# entropy tags so the per-purpose seed streams never collide
_TRAIN_TAG, _VAL_TAG, _INIT_TAG, _ORDER_TAG = 0, 1, 2, 3


@dataclass
class PretrainSchedule:
    """Everything a pretraining run needs besides the data and the seed."""

    epochs: int = 20
    batch_size: int = 64
    encoder_hidden: int = 96
    embedding_dim: int = 64
    optimizer: str = "lars"
    base_lr: float = 0.4
    weight_decay: float = 1.5e-6
    trust: float = 0.001
    temperature: float = 0.5
    ema_decay: float = 0.99
    n_prototypes: int = 20
    queue_capacity: int = 3000
    swav_temperature: float = 0.1
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 3

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if self.optimizer not in ("lars", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class LossRecord:
    epoch: int
    split: str
    loss: float


@dataclass
class PretrainResult:
    checkpoints: list[EncoderParams]
    best_index: int
    records: list[LossRecord] = field(default_factory=list)
    prototypes: np.ndarray | None = None  # final matrix, clustering method only
    head: EncoderParams | None = None  # final projection head

    @property
    def best_encoder(self) -> EncoderParams:
        return self.checkpoints[self.best_index]

    def val_losses(self) -> list[float]:
        return [r.loss for r in self.records if r.split == "val"]


def _flatten_batch(images: list[Image16]) -> np.ndarray:
    return np.stack([img.pixels.reshape(-1) for img in images]).astype(np.float64) / UINT16_MAX


def _pair_seed(seed: int, tag: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, tag, epoch, index]).generate_state(1)[0])


def _make_views(
    patches: list[Image16],
    indices: list[int],
    pipeline: AugmentPipeline,
    seed: int,
    tag: int,
    epoch: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Flattened normalized view pairs; each patch gets its own seed stream."""
    views_a, views_b = [], []
    for idx in indices:
        rng = np.random.default_rng(_pair_seed(seed, tag, epoch, idx))
        views_a.append(apply_view(patches[idx], sample_view_specs(pipeline, rng)))
        views_b.append(apply_view(patches[idx], sample_view_specs(pipeline, rng)))
    return _flatten_batch(views_a), _flatten_batch(views_b)


class _Model:
    """Per-method parameter containers and the forward/backward kernels."""

    def __init__(self, method: str, input_dim: int, schedule: PretrainSchedule, seed: int):
        self.method = method
        self.schedule = schedule
        h, m = schedule.encoder_hidden, schedule.embedding_dim

        def net_seed(k: int) -> int:
            return _pair_seed(seed, _INIT_TAG, 0, k)

        self.encoder = init_params([input_dim, h, h, m], net_seed(0))
        self.head = init_params([m, m, m], net_seed(1))
        self.predictor = None
        self.target_encoder = None
        self.target_head = None
        self.swav_state = None
        if method == "byol":
            self.predictor = init_params([m, m, m], net_seed(2))
            self.target_encoder = self.encoder.copy()
            self.target_head = self.head.copy()
        elif method == "swav":
            rng = np.random.default_rng(net_seed(3))
            protos = rng.normal(size=(schedule.n_prototypes, m))
            state = SwavState(
                protos,
                queue_capacity=schedule.queue_capacity,
                temperature=schedule.swav_temperature,
                sinkhorn_epsilon=schedule.sinkhorn_epsilon,
                sinkhorn_iters=schedule.sinkhorn_iters,
            )
            state.renormalize_prototypes()
            self.swav_state = state

    def trainable_arrays(self) -> list[np.ndarray]:
        arrays = param_arrays(self.encoder) + param_arrays(self.head)
        if self.method == "byol":
            arrays += param_arrays(self.predictor)
        elif self.method == "swav":
            arrays.append(self.swav_state.prototypes)
        return arrays

    def assign_arrays(self, arrays: list[np.ndarray]) -> None:
        nets = [self.encoder, self.head]
        if self.method == "byol":
            nets.append(self.predictor)
        cursor = 0
        for net in nets:
            for layer in net.layers:
                layer.weight = arrays[cursor]
                layer.bias = arrays[cursor + 1]
                cursor += 2
        if self.method == "swav":
            self.swav_state.prototypes = np.ascontiguousarray(arrays[cursor])
            cursor += 1
        assert cursor == len(arrays)

    def _backward_two_views(
        self,
        net: EncoderParams,
        inputs_a: np.ndarray,
        inputs_b: np.ndarray,
        grad_a: np.ndarray,
        grad_b: np.ndarray,
    ) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
        ba = encode_backward(net, inputs_a, grad_a)
        bb = encode_backward(net, inputs_b, grad_b)
        summed = [ga + gb for ga, gb in zip(grad_arrays(ba), grad_arrays(bb))]
        return summed, ba.input_grad, bb.input_grad

    def loss_and_grads(
        self, x_a: np.ndarray, x_b: np.ndarray, update_state: bool
    ) -> tuple[float, list[np.ndarray] | None]:
        """Batch loss; gradients for trainable_arrays() when update_state."""
        enc_a = encode(self.encoder, x_a)
        enc_b = encode(self.encoder, x_b)

        if self.method == "simclr":
            proj_a = encode(self.head, enc_a)
            proj_b = encode(self.head, enc_b)
            stacked = np.empty((2 * proj_a.shape[0], proj_a.shape[1]))
            stacked[0::2] = proj_a
            stacked[1::2] = proj_b
            loss, grad = nt_xent_loss(stacked, NtXentConfig(self.schedule.temperature))
            if not update_state:
                return loss, None
            head_g, up_a, up_b = self._backward_two_views(
                self.head, enc_a, enc_b, grad[0::2], grad[1::2]
            )
            enc_g, _, _ = self._backward_two_views(self.encoder, x_a, x_b, up_a, up_b)
            return loss, enc_g + head_g

        if self.method == "byol":
            proj_a = encode(self.head, enc_a)
            proj_b = encode(self.head, enc_b)
            pred_a = encode(self.predictor, proj_a)
            pred_b = encode(self.predictor, proj_b)
            targ_a = encode(self.target_head, encode(self.target_encoder, x_a))
            targ_b = encode(self.target_head, encode(self.target_encoder, x_b))
            n = x_a.shape[0]
            loss, grad_pred = byol_loss(
                np.vstack([pred_a, pred_b]), np.vstack([targ_b, targ_a])
            )
            if not update_state:
                return loss, None
            pred_g, up_a, up_b = self._backward_two_views(
                self.predictor, proj_a, proj_b, grad_pred[:n], grad_pred[n:]
            )
            head_g, up_a, up_b = self._backward_two_views(
                self.head, enc_a, enc_b, up_a, up_b
            )
            enc_g, _, _ = self._backward_two_views(self.encoder, x_a, x_b, up_a, up_b)
            return loss, enc_g + head_g + pred_g

        # swav
        proj_a = encode(self.head, enc_a)
        proj_b = encode(self.head, enc_b)
        state = self.swav_state
        if update_state:
            loss, grad_a, grad_b, grad_protos = swav_loss(proj_a, proj_b, state)
            head_g, up_a, up_b = self._backward_two_views(
                self.head, enc_a, enc_b, grad_a, grad_b
            )
            enc_g, _, _ = self._backward_two_views(self.encoder, x_a, x_b, up_a, up_b)
            return loss, enc_g + head_g + [grad_protos]
        codes_a = swav_codes(proj_a, state)
        codes_b = swav_codes(proj_b, state)
        loss, _, _, _ = swav_loss_with_codes(
            proj_a, proj_b, state.prototypes, codes_a, codes_b, state.temperature
        )
        return loss, None

    def post_step(self) -> None:
        if self.method == "byol":
            online = param_arrays(self.encoder) + param_arrays(self.head)
            target = param_arrays(self.target_encoder) + param_arrays(self.target_head)
            updated = ema_update(target, online, self.schedule.ema_decay)
            nets = [self.target_encoder, self.target_head]
            cursor = 0
            for net in nets:
                for layer in net.layers:
                    layer.weight = updated[cursor]
                    layer.bias = updated[cursor + 1]
                    cursor += 2
        elif self.method == "swav":
            self.swav_state.renormalize_prototypes()


def pretrain(
    train_patches: list[Image16],
    val_patches: list[Image16],
    method: str,
    pipeline: AugmentPipeline,
    schedule: PretrainSchedule,
    seed: int,
) -> PretrainResult:
    """Train one SSL method and select the epoch with the lowest val loss.

    Train and val patch sets must be disjoint (patient-level upstream).
    Fully deterministic for a fixed seed under single-worker execution:
    every view pair draws from its own (seed, split, epoch, patch) stream,
    and validation views are frozen across epochs.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; pick from {METHODS}")
    if not train_patches or not val_patches:
        raise DataError("pretraining needs nonempty train and val patch sets")

    input_dim = train_patches[0].width * train_patches[0].height
    model = _Model(method, input_dim, schedule, seed)
    config = (
        LarsConfig(schedule.base_lr, schedule.weight_decay, schedule.trust)
        if schedule.optimizer == "lars"
        else AdamConfig(schedule.base_lr, weight_decay=schedule.weight_decay)
    )
    moments = (
        init_moments(model.trainable_arrays()) if schedule.optimizer == "adam" else None
    )

    val_a, val_b = _make_views(
        val_patches, list(range(len(val_patches))), pipeline, seed, _VAL_TAG, 0
    )

    order_rng = np.random.default_rng(np.random.SeedSequence([seed, _ORDER_TAG]))
    n = len(train_patches)
    eff_batch = min(schedule.batch_size, n)
    records: list[LossRecord] = []
    checkpoints: list[EncoderParams] = []

    for epoch in range(schedule.epochs):
        perm = order_rng.permutation(n)
        train_losses = []
        for start in range(0, n - eff_batch + 1, eff_batch):
            indices = [int(i) for i in perm[start : start + eff_batch]]
            x_a, x_b = _make_views(
                train_patches, indices, pipeline, seed, _TRAIN_TAG, epoch
            )
            loss, grads = model.loss_and_grads(x_a, x_b, update_state=True)
            train_losses.append(loss)
            params = model.trainable_arrays()
            if schedule.optimizer == "lars":
                new_params = lars_step(params, grads, config)
            else:
                new_params, moments = adam_step(params, grads, moments, config)
            model.assign_arrays(new_params)
            model.post_step()

        val_loss, _ = model.loss_and_grads(val_a, val_b, update_state=False)
        records.append(LossRecord(epoch, "train", float(np.mean(train_losses))))
        records.append(LossRecord(epoch, "val", float(val_loss)))
        checkpoints.append(model.encoder.copy())

    val_losses = [r.loss for r in records if r.split == "val"]
    best_index = int(np.argmin(val_losses))
    return PretrainResult(
        checkpoints=checkpoints,
        best_index=best_index,
        records=records,
        prototypes=model.swav_state.prototypes.copy() if method == "swav" else None,
        head=model.head.copy(),
    )
