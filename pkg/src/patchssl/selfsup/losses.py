"""The three pretraining objectives, each with hand-derived gradients.

Every loss is cosine-based and normalizes its inputs internally, so all
three are invariant under positive rescaling of the embeddings. Gradients
are returned with respect to the raw (unnormalized) inputs.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError


@dataclass(frozen=True)
class NtXentConfig:
    temperature: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class SwavState:
    """Prototype matrix plus the FIFO queue of past normalized embeddings."""

    prototypes: np.ndarray
    queue_capacity: int = 3000
    temperature: float = 0.1
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 3
    queue: deque = field(init=False)

    def __post_init__(self):
        self.prototypes = np.ascontiguousarray(self.prototypes, dtype=np.float64)
        if self.prototypes.ndim != 2:
            raise ValueError("prototypes must be a P x m matrix")
        if self.queue_capacity < 0:
            raise ValueError("queue capacity must be nonnegative")
        self.queue = deque(maxlen=self.queue_capacity)

    def queue_matrix(self) -> np.ndarray | None:
        if not self.queue:
            return None
        return np.stack(list(self.queue))

    def renormalize_prototypes(self) -> None:
        norms = np.linalg.norm(self.prototypes, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise NumericError("prototype row collapsed to zero norm")
        self.prototypes /= norms


def _l2_rows(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized copy plus the row norms; rejects zero rows."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise NumericError(f"zero-norm {what}")
    return x / norms[:, np.newaxis], norms


def _through_normalization(
    grad_z: np.ndarray, z: np.ndarray, norms: np.ndarray
) -> np.ndarray:
    """Pull a gradient on unit rows z back to the raw rows e = norms * z."""
    radial = np.sum(grad_z * z, axis=1, keepdims=True)
    return (grad_z - radial * z) / norms[:, np.newaxis]


def nt_xent_loss(
    embeddings: np.ndarray, config: NtXentConfig
) -> tuple[float, np.ndarray]:
    """Contrastive loss over 2N view embeddings paired as (2i, 2i+1).

    Similarities are cosines; each anchor's positive is its pair mate and
    its negatives are every other view in the batch. Returns the mean loss
    over all 2N anchors and its exact gradient with respect to the raw
    embeddings.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] % 2 or embeddings.shape[0] < 4:
        raise ValueError("need an even number of embeddings covering at least 2 pairs")
    two_n = embeddings.shape[0]
    z, norms = _l2_rows(embeddings, "embedding")
    sims = z @ z.T
    logits = sims / config.temperature
    np.fill_diagonal(logits, -np.inf)  # an anchor never contrasts with itself

    positives = np.arange(two_n) ^ 1
    row_max = logits.max(axis=1, keepdims=True)
    expv = np.exp(logits - row_max)
    denom = expv.sum(axis=1, keepdims=True)
    softmax = expv / denom
    log_probs = (logits - row_max) - np.log(denom)
    loss = float(-log_probs[np.arange(two_n), positives].mean())

    grad_sims = softmax.copy()
    grad_sims[np.arange(two_n), positives] -= 1.0
    grad_sims /= two_n * config.temperature
    grad_z = (grad_sims + grad_sims.T) @ z
    return loss, _through_normalization(grad_z, z, norms)


def byol_loss(
    online_prediction: np.ndarray, target_projection: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean of 2 - 2*cos(p, t) over the batch; gradient wrt the online side only.

    The target is a stop-gradient input: no gradient for it exists or is
    returned. Callers symmetrize over the two view orderings by stacking
    both (prediction, target) directions into one batch.
    """
    p = np.asarray(online_prediction, dtype=np.float64)
    t = np.asarray(target_projection, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 2:
        raise ValueError(f"prediction {p.shape} and target {t.shape} must match")
    p_hat, p_norms = _l2_rows(p, "online prediction")
    t_hat, _ = _l2_rows(t, "target projection")
    cos = np.sum(p_hat * t_hat, axis=1)
    loss = float(np.mean(2.0 - 2.0 * cos))
    # d(-2 cos)/dp = -2 (t_hat - cos p_hat) / |p|
    grad_p = -2.0 * (t_hat - cos[:, np.newaxis] * p_hat) / p_norms[:, np.newaxis]
    return loss, grad_p / p.shape[0]


def ema_update(target: list[np.ndarray], online: list[np.ndarray], decay: float) -> list[np.ndarray]:
    """Elementwise decay*target + (1-decay)*online over parallel array lists."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    if len(target) != len(online):
        raise ValueError("target and online parameter lists differ in length")
    out = []
    for t, o in zip(target, online):
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch {t.shape} vs {o.shape}")
        out.append(decay * t + (1.0 - decay) * o)
    return out


def sinkhorn_assign(scores: np.ndarray, epsilon: float, iters: int) -> np.ndarray:
    """Balanced soft assignment of B rows onto P prototypes.

    Starts from exp(scores/epsilon) (per-row max subtracted for overflow
    safety) and alternates scaling column sums to B/P and row sums to 1,
    finishing with a row pass so every row sums to exactly 1.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.size == 0:
        raise ValueError("scores must be a nonempty B x P matrix")
    if not np.all(np.isfinite(scores)):
        raise NumericError("nonfinite assignment scores")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    b, p = scores.shape
    q = np.exp((scores - scores.max(axis=1, keepdims=True)) / epsilon)
    target_col = b / p
    for _ in range(iters):
        q *= target_col / q.sum(axis=0, keepdims=True)
        q /= q.sum(axis=1, keepdims=True)
    return q


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    return expv / expv.sum(axis=1, keepdims=True)


def swav_loss_with_codes(
    embeddings_a: np.ndarray,
    embeddings_b: np.ndarray,
    prototypes: np.ndarray,
    codes_a: np.ndarray,
    codes_b: np.ndarray,
    temperature: float,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Swapped cross-entropy for fixed codes.

    This is the differentiable part of the objective: the codes are
    constants (stop-gradient), so the returned gradients — with respect to
    both raw embedding batches and the prototype matrix — are exact
    gradients of this function. Each view is scored against the prototypes
    and must predict the other view's code.
    """
    z_a, norms_a = _l2_rows(np.asarray(embeddings_a, dtype=np.float64), "embedding")
    z_b, norms_b = _l2_rows(np.asarray(embeddings_b, dtype=np.float64), "embedding")
    c = np.asarray(prototypes, dtype=np.float64)
    n = z_a.shape[0]
    if n == 0:
        raise ValueError("empty batch")

    scores_a = z_a @ c.T
    scores_b = z_b @ c.T
    log_p_a = np.log(_softmax_rows(scores_a / temperature))
    log_p_b = np.log(_softmax_rows(scores_b / temperature))
    loss = float(
        -0.5 * (np.sum(codes_a * log_p_b) + np.sum(codes_b * log_p_a)) / n
    )

    p_a = np.exp(log_p_a)
    p_b = np.exp(log_p_b)
    row_mass_a = codes_b.sum(axis=1, keepdims=True)  # 1 per row for sinkhorn codes
    row_mass_b = codes_a.sum(axis=1, keepdims=True)
    grad_scores_a = 0.5 * (row_mass_a * p_a - codes_b) / (n * temperature)
    grad_scores_b = 0.5 * (row_mass_b * p_b - codes_a) / (n * temperature)

    grad_z_a = grad_scores_a @ c
    grad_z_b = grad_scores_b @ c
    grad_c = grad_scores_a.T @ z_a + grad_scores_b.T @ z_b
    return (
        loss,
        _through_normalization(grad_z_a, z_a, norms_a),
        _through_normalization(grad_z_b, z_b, norms_b),
        grad_c,
    )


def swav_codes(embeddings: np.ndarray, state: SwavState) -> np.ndarray:
    """Sinkhorn codes for a batch, balanced jointly with the queued embeddings.

    The queue rows participate in the balancing but their codes are thrown
    away; the queue itself is not modified.
    """
    z, _ = _l2_rows(np.asarray(embeddings, dtype=np.float64), "embedding")
    n = z.shape[0]
    scores = z @ state.prototypes.T
    queued = state.queue_matrix()
    if queued is not None:
        scores = np.vstack([scores, queued @ state.prototypes.T])
    q = sinkhorn_assign(scores, state.sinkhorn_epsilon, state.sinkhorn_iters)
    return q[:n]


def swav_loss(
    embeddings_a: np.ndarray, embeddings_b: np.ndarray, state: SwavState
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Full swapped-prediction step: codes, loss, gradients, queue update.

    Codes come from sinkhorn_assign over each view's scores augmented with
    the queued embeddings' scores (queue rows' codes are discarded). After
    the loss, the batch's view-a embeddings enter the queue FIFO. Returns
    (loss, grad wrt embeddings_a, grad wrt embeddings_b, grad wrt prototypes).
    """
    z_a, _ = _l2_rows(np.asarray(embeddings_a, dtype=np.float64), "embedding")
    n = z_a.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    codes_a = swav_codes(embeddings_a, state)
    codes_b = swav_codes(embeddings_b, state)
    loss, grad_a, grad_b, grad_c = swav_loss_with_codes(
        embeddings_a, embeddings_b, state.prototypes, codes_a, codes_b, state.temperature
    )
    for row in z_a:
        state.queue.append(row.copy())
    return loss, grad_a, grad_b, grad_c
