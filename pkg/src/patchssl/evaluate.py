"""Whole-image evaluation: linear probes, two-stage finetuning, and metrics.

Images are tiled into bags of patch embeddings by a frozen (or, in
finetuning stage 2, trainable) encoder; a pooling module collapses each
bag to one vector and a softmax head classifies it. Training is
full-batch Adam, so every routine here is deterministic without any
sampling beyond the explicitly seeded stage-2 augmentations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats

from .encoder import EncoderParams, encode, encode_backward, grad_arrays, param_arrays
from .errors import ConfigError, DataError
from .imaging import UINT16_MAX, Image16, resize
from .pooling import (
    AttentionParams,
    EmbeddingBag,
    SaParams,
    gap,
    init_attention_params,
    init_sa_params,
    mip_backward,
    mip_forward,
    sa_backward,
    sa_pool,
)
from .selfsup import (
    AdamConfig,
    LossRecord,
    PretrainSchedule,
    adam_step,
    init_moments,
    pretrain,
)
from .augment import TRANSFORM_KINDS, AugmentPipeline
from .tiling import (
    Manifest,
    ManifestEntry,
    PatchSpec,
    grid_shape,
    is_positive_label,
    stratified_patient_split,
    tile_grid,
)

POOLING_KINDS = ("gap", "mip", "sa")
SWEEP_FRACTIONS = (0.10, 0.25, 0.50, 0.75, 0.90, 1.0)

# independent seed stream for stage-2 augmentation draws
_STAGE2_TAG = 11


@dataclass
class ImageRecord:
    """One whole image with its label and owning patient."""

    image: Image16
    label: str
    patient_id: str

    def __post_init__(self):
        if not self.label:
            raise ValueError("label must be nonempty")
        if not self.patient_id:
            raise ValueError("patient_id must be nonempty")


@dataclass
class EvalDataset:
    train: list[ImageRecord]
    val: list[ImageRecord]
    test: list[ImageRecord]

    def classes(self) -> list[str]:
        labels = {r.label for r in self.train + self.val + self.test}
        return sorted(labels)

    def counts(self) -> dict[str, int]:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}


@dataclass(frozen=True)
class StageProtocol:
    """One training stage: epoch budget plus Adam learning rate and decay."""

    epochs: int
    lr: float
    weight_decay: float

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay nonnegative")


# standalone linear probe defaults
LINEAR_PROTOCOL = StageProtocol(epochs=100, lr=1e-3, weight_decay=0.01)


@dataclass(frozen=True)
class FinetuneProtocol:
    """Head-only stage, then full-model stage at a lower learning rate."""

    stage1: StageProtocol = StageProtocol(epochs=100, lr=1e-4, weight_decay=1e-3)
    stage2: StageProtocol = StageProtocol(epochs=50, lr=1e-5, weight_decay=1e-2)


@dataclass(frozen=True)
class PoolingSpec:
    kind: str = "gap"
    hidden: int = 512  # gated-attention width
    seed: int = 0

    def __post_init__(self):
        if self.kind not in POOLING_KINDS:
            raise ConfigError(f"unknown pooling kind {self.kind!r}")
        if self.hidden < 1:
            raise ConfigError("pooling hidden width must be >= 1")


@dataclass
class MetricReport:
    """Test-set metrics; auc is present only for two-class problems."""

    auc: float | None
    accuracy: float
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.auc is not None and not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"auc {self.auc} out of range")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} out of range")


@dataclass
class LinearHead:
    weight: np.ndarray  # classes x features
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("head weight must be classes x features with matching bias")

    def copy(self) -> "LinearHead":
        return LinearHead(self.weight.copy(), self.bias.copy())


def init_head(n_classes: int, n_features: int) -> LinearHead:
    """All-zero head: epoch zero predicts the uniform distribution."""
    return LinearHead(np.zeros((n_classes, n_features)), np.zeros(n_classes))


class PoolModel:
    """A pooling choice plus its trainable parameters, if it has any."""

    def __init__(
        self,
        kind: str,
        attention: AttentionParams | None = None,
        sa: SaParams | None = None,
    ):
        self.kind = kind
        self.attention = attention
        self.sa = sa

    def forward(self, bag: EmbeddingBag) -> np.ndarray:
        if self.kind == "gap":
            return gap(bag)
        if self.kind == "mip":
            return mip_forward(bag, self.attention)[0]
        return sa_pool(bag, self.sa)

    def backward(
        self, bag: EmbeddingBag, grad_z: np.ndarray
    ) -> tuple[list[np.ndarray], np.ndarray]:
        """(parameter grads in trainable order, gradient into the bag)."""
        if self.kind == "gap":
            k = len(bag)
            return [], np.tile(grad_z / k, (k, 1))
        if self.kind == "mip":
            g = mip_backward(bag, self.attention, grad_z)
            return [g["v"], g["u"], g["w"]], g["bag"]
        g = sa_backward(bag, self.sa, grad_z)
        return [g["cls_token"], g["wq"], g["wk"], g["wv"]], g["bag"]

    def trainable_arrays(self) -> list[np.ndarray]:
        if self.kind == "gap":
            return []
        if self.kind == "mip":
            return [self.attention.v, self.attention.u, self.attention.w]
        return [self.sa.cls_token, self.sa.wq, self.sa.wk, self.sa.wv]

    def assign(self, arrays: list[np.ndarray]) -> None:
        if self.kind == "mip":
            self.attention = AttentionParams(*arrays)
        elif self.kind == "sa":
            self.sa = SaParams(*arrays)

    def copy(self) -> "PoolModel":
        if self.kind == "gap":
            return PoolModel("gap")
        if self.kind == "mip":
            a = self.attention
            return PoolModel("mip", attention=AttentionParams(a.v.copy(), a.u.copy(), a.w.copy()))
        s = self.sa
        return PoolModel(
            "sa", sa=SaParams(s.cls_token.copy(), s.wq.copy(), s.wk.copy(), s.wv.copy())
        )


def build_pool(spec: PoolingSpec, embedding_dim: int) -> PoolModel:
    if spec.kind == "gap":
        return PoolModel("gap")
    if spec.kind == "mip":
        return PoolModel(
            "mip", attention=init_attention_params(embedding_dim, spec.hidden, spec.seed)
        )
    return PoolModel("sa", sa=init_sa_params(embedding_dim, spec.seed))


def split_records(
    records: list[ImageRecord], ratios: tuple[float, float, float], seed: int
) -> EvalDataset:
    """Patient-level stratified train/val/test partition of whole images."""
    entries = [
        ManifestEntry(image_path=str(i), patient_id=r.patient_id, label=r.label, view="")
        for i, r in enumerate(records)
    ]
    parts = stratified_patient_split(Manifest(entries), ratios, seed)
    picked = [[records[int(e.image_path)] for e in part.entries] for part in parts]
    return EvalDataset(train=picked[0], val=picked[1], test=picked[2])


def auc(scores, positives) -> float:
    """Probability a random positive outscores a random negative; ties 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("auc needs both classes present")
    ranks = stats.rankdata(scores)  # average ranks handle ties
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def image_bag(encoder: EncoderParams, image: Image16, spec: PatchSpec) -> EmbeddingBag:
    """Tile one image and embed every grid patch (no background filtering)."""
    patches = tile_grid(image, spec)
    rows, cols = grid_shape(image, spec)
    batch = (
        np.stack([p.image.pixels.reshape(-1) for p in patches]).astype(np.float64)
        / UINT16_MAX
    )
    provenance = [(r, c) for r in range(rows) for c in range(cols)]
    return EmbeddingBag(encode(encoder, batch), provenance)


def extract_bags(
    encoder: EncoderParams, records: list[ImageRecord], spec: PatchSpec
) -> list[EmbeddingBag]:
    return [image_bag(encoder, r.image, spec) for r in records]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


def _label_indices(records: list[ImageRecord], classes: list[str]) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([index[r.label] for r in records], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"label {exc.args[0]!r} missing from the class list") from exc


def _positive_index(classes: list[str]) -> int:
    flags = [is_positive_label(c) for c in classes]
    if sum(flags) == 1:
        return flags.index(True)
    return len(classes) - 1


class _Classifier:
    """Pooling plus linear head; everything the probe stages train."""

    def __init__(self, pool: PoolModel, head: LinearHead):
        self.pool = pool
        self.head = head

    def copy(self) -> "_Classifier":
        return _Classifier(self.pool.copy(), self.head.copy())

    def trainable_arrays(self) -> list[np.ndarray]:
        return self.pool.trainable_arrays() + [self.head.weight, self.head.bias]

    def assign(self, arrays: list[np.ndarray]) -> None:
        n_pool = len(self.pool.trainable_arrays())
        self.pool.assign(arrays[:n_pool])
        self.head = LinearHead(arrays[n_pool], arrays[n_pool + 1])

    def probabilities(self, bag: EmbeddingBag) -> np.ndarray:
        z = self.pool.forward(bag)
        return _softmax(self.head.weight @ z + self.head.bias)


def _split_scores(
    clf: _Classifier, bags: list[EmbeddingBag], labels: np.ndarray, pos_index: int
) -> tuple[float, float, np.ndarray]:
    """(mean cross-entropy, accuracy, positive-class probabilities)."""
    losses = np.empty(len(bags))
    hits = 0
    pos_probs = np.empty(len(bags))
    for i, (bag, y) in enumerate(zip(bags, labels)):
        probs = clf.probabilities(bag)
        losses[i] = -np.log(max(probs[y], 1e-300))
        hits += int(np.argmax(probs) == y)
        pos_probs[i] = probs[pos_index]
    return float(losses.mean()), hits / len(bags), pos_probs


def _split_metric(
    clf: _Classifier,
    bags: list[EmbeddingBag],
    labels: np.ndarray,
    binary: bool,
    pos_index: int,
) -> tuple[float, float]:
    """(selection metric, mean loss): AUC for two classes, else accuracy."""
    loss, accuracy, pos_probs = _split_scores(clf, bags, labels, pos_index)
    metric = auc(pos_probs, labels == pos_index) if binary else accuracy
    return metric, loss


def _report(
    clf: _Classifier,
    bags: list[EmbeddingBag],
    labels: np.ndarray,
    binary: bool,
    pos_index: int,
    counts: dict[str, int],
) -> MetricReport:
    _, accuracy, pos_probs = _split_scores(clf, bags, labels, pos_index)
    value = auc(pos_probs, labels == pos_index) if binary else None
    return MetricReport(auc=value, accuracy=accuracy, counts=dict(counts))


def _check_dataset(dataset: EvalDataset, classes: list[str]) -> None:
    for name, part in (("train", dataset.train), ("val", dataset.val), ("test", dataset.test)):
        if not part:
            raise DataError(f"{name} split is empty")
    if len({r.label for r in dataset.train}) < 2:
        raise DataError("train split holds a single class")
    if len(classes) == 2:
        for name, part in (("val", dataset.val), ("test", dataset.test)):
            if len({r.label for r in part}) < 2:
                raise DataError(f"{name} split holds a single class; auc undefined")


def _head_batch_grads(
    clf: _Classifier, bags: list[EmbeddingBag], labels: np.ndarray
) -> tuple[float, list[np.ndarray]]:
    """Full-batch mean cross-entropy and grads in trainable-array order."""
    pool_grads = [np.zeros_like(a) for a in clf.pool.trainable_arrays()]
    grad_w = np.zeros_like(clf.head.weight)
    grad_b = np.zeros_like(clf.head.bias)
    total = 0.0
    scale = 1.0 / len(bags)
    for bag, y in zip(bags, labels):
        z = clf.pool.forward(bag)
        probs = _softmax(clf.head.weight @ z + clf.head.bias)
        total += -np.log(max(probs[y], 1e-300))
        delta = probs.copy()
        delta[y] -= 1.0
        delta *= scale
        grad_w += np.outer(delta, z)
        grad_b += delta
        if pool_grads:
            part, _ = clf.pool.backward(bag, clf.head.weight.T @ delta)
            for acc, g in zip(pool_grads, part):
                acc += g
    return total * scale, pool_grads + [grad_w, grad_b]


def _fit_probe(
    clf: _Classifier,
    bags_train: list[EmbeddingBag],
    y_train: np.ndarray,
    bags_val: list[EmbeddingBag],
    y_val: np.ndarray,
    protocol: StageProtocol,
    binary: bool,
    pos_index: int,
) -> tuple[_Classifier, int, list[LossRecord]]:
    """Full-batch Adam on pooling+head; best epoch by validation metric."""
    arrays = clf.trainable_arrays()
    moments = init_moments(arrays)
    config = AdamConfig(protocol.lr, weight_decay=protocol.weight_decay)
    best = clf.copy()
    best_metric, best_loss = -np.inf, np.inf
    best_epoch = 0
    history: list[LossRecord] = []
    for epoch in range(1, protocol.epochs + 1):
        train_loss, grads = _head_batch_grads(clf, bags_train, y_train)
        arrays, moments = adam_step(arrays, grads, moments, config)
        clf.assign(arrays)
        arrays = clf.trainable_arrays()
        val_metric, val_loss = _split_metric(clf, bags_val, y_val, binary, pos_index)
        history.append(LossRecord(epoch, "train", train_loss))
        history.append(LossRecord(epoch, "val", val_loss))
        # metric ties (AUC saturates early on easy data) go to the epoch
        # with the lower validation loss, i.e. the better-calibrated head
        if val_metric > best_metric or (val_metric == best_metric and val_loss < best_loss):
            best, best_metric, best_loss, best_epoch = clf.copy(), val_metric, val_loss, epoch
    return best, best_epoch, history


@dataclass
class EvalResult:
    head: LinearHead
    pool: PoolModel
    report: MetricReport
    history: list[LossRecord]
    best_epoch: int


def linear_eval(
    encoder: EncoderParams,
    dataset: EvalDataset,
    spec: PatchSpec,
    pooling: PoolingSpec = PoolingSpec(),
    protocol: StageProtocol = LINEAR_PROTOCOL,
) -> EvalResult:
    """Train pooling(+head) on frozen patch embeddings; report on test.

    The encoder is used forward-only: its parameters are never copied
    into the optimizer, so they are bit-identical before and after.
    """
    classes = dataset.classes()
    _check_dataset(dataset, classes)
    binary = len(classes) == 2
    pos_index = _positive_index(classes)
    bags = {
        name: extract_bags(encoder, part, spec)
        for name, part in (("train", dataset.train), ("val", dataset.val), ("test", dataset.test))
    }
    labels = {
        "train": _label_indices(dataset.train, classes),
        "val": _label_indices(dataset.val, classes),
        "test": _label_indices(dataset.test, classes),
    }
    clf = _Classifier(
        build_pool(pooling, encoder.embedding_dim),
        init_head(len(classes), encoder.embedding_dim),
    )
    best, best_epoch, history = _fit_probe(
        clf, bags["train"], labels["train"], bags["val"], labels["val"],
        protocol, binary, pos_index,
    )
    report = _report(
        best, bags["test"], labels["test"], binary, pos_index, dataset.counts()
    )
    return EvalResult(best.head, best.pool, report, history, best_epoch)


def finetune_view(image: Image16, rng: np.random.Generator) -> Image16:
    """Stage-2 augmentation: resized crop 80-120%, flips, rotation, brightness.

    A crop scale above 1 zooms out: the image lands at a random offset on
    a larger black canvas before resizing back. Brightness of +/-20 8-bit
    levels maps to +/-20*257 on the 16-bit scale.
    """
    scale = 0.8 + 0.4 * rng.random()
    off_x, off_y = rng.random(), rng.random()
    if scale <= 1.0:
        crop_w = max(1, int(image.width * scale + 0.5))
        crop_h = max(1, int(image.height * scale + 0.5))
        ox = int(off_x * (image.width - crop_w) + 0.5)
        oy = int(off_y * (image.height - crop_h) + 0.5)
        window = image.pixels[oy : oy + crop_h, ox : ox + crop_w]
    else:
        canvas_w = int(image.width * scale + 0.5)
        canvas_h = int(image.height * scale + 0.5)
        ox = int(off_x * (canvas_w - image.width) + 0.5)
        oy = int(off_y * (canvas_h - image.height) + 0.5)
        window = np.zeros((canvas_h, canvas_w), dtype=np.uint16)
        window[oy : oy + image.height, ox : ox + image.width] = image.pixels
    out = resize(Image16.from_array(np.ascontiguousarray(window)), image.width, image.height)

    pixels = out.pixels
    if rng.random() < 0.5:
        pixels = pixels[:, ::-1]
    if rng.random() < 0.5:
        pixels = pixels[::-1, :]

    angle = -25.0 + 50.0 * rng.random()
    rotated = ndimage.rotate(
        pixels.astype(np.float64), angle, reshape=False, order=1, mode="constant", cval=0.0
    )

    delta = (-20.0 + 40.0 * rng.random()) * 257.0
    shifted = np.clip(np.floor(rotated + delta + 0.5), 0, UINT16_MAX)
    return Image16.from_array(shifted.astype(np.uint16))


@dataclass
class FinetuneResult:
    encoder: EncoderParams
    head: LinearHead
    pool: PoolModel
    report: MetricReport
    history: list[LossRecord]


def _full_backprop_epoch(
    encoder: EncoderParams,
    clf: _Classifier,
    records: list[ImageRecord],
    labels: np.ndarray,
    spec: PatchSpec,
    config: AdamConfig,
    moments,
    seed: int,
    epoch: int,
):
    """One pass of per-image updates through encoder, pooling, and head."""
    total = 0.0
    for i, (record, y) in enumerate(zip(records, labels)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, _STAGE2_TAG, epoch, i]))
        view = finetune_view(record.image, rng)
        patches = tile_grid(view, spec)
        rows, cols = grid_shape(view, spec)
        batch = (
            np.stack([p.image.pixels.reshape(-1) for p in patches]).astype(np.float64)
            / UINT16_MAX
        )
        provenance = [(r, c) for r in range(rows) for c in range(cols)]
        bag = EmbeddingBag(encode(encoder, batch), provenance)

        z = clf.pool.forward(bag)
        probs = _softmax(clf.head.weight @ z + clf.head.bias)
        total += -np.log(max(probs[y], 1e-300))
        delta = probs.copy()
        delta[y] -= 1.0
        pool_grads, bag_grad = clf.pool.backward(bag, clf.head.weight.T @ delta)
        bundle = encode_backward(encoder, batch, bag_grad)

        arrays = param_arrays(encoder) + clf.trainable_arrays()
        grads = grad_arrays(bundle) + pool_grads + [np.outer(delta, z), delta]
        arrays, moments = adam_step(arrays, grads, moments, config)
        n_enc = len(param_arrays(encoder))
        for target, source in zip(param_arrays(encoder), arrays[:n_enc]):
            target[...] = source
        clf.assign(arrays[n_enc:])
    return total / len(records), moments


def finetune(
    encoder: EncoderParams,
    dataset: EvalDataset,
    spec: PatchSpec,
    pooling: PoolingSpec = PoolingSpec(),
    protocol: FinetuneProtocol = FinetuneProtocol(),
    seed: int = 0,
) -> FinetuneResult:
    """Head-only stage on the frozen encoder, then full-model training.

    Stage 2 starts from the stage-1 classifier and works on a copy of the
    encoder; the best state by validation metric (the stage-1 result
    included) is reported, so a zero-epoch stage 2 reproduces the
    stage-1 linear probe exactly.
    """
    stage1 = linear_eval(encoder, dataset, spec, pooling, protocol.stage1)
    classes = dataset.classes()
    binary = len(classes) == 2
    pos_index = _positive_index(classes)
    labels = {
        "train": _label_indices(dataset.train, classes),
        "val": _label_indices(dataset.val, classes),
        "test": _label_indices(dataset.test, classes),
    }

    current = encoder.copy()
    clf = _Classifier(stage1.pool.copy(), stage1.head.copy())
    config = AdamConfig(protocol.stage2.lr, weight_decay=protocol.stage2.weight_decay)
    moments = init_moments(param_arrays(current) + clf.trainable_arrays())
    history = list(stage1.history)

    best_encoder = encoder.copy()
    best_clf = clf.copy()
    start_bags = extract_bags(best_encoder, dataset.val, spec)
    best_metric, best_loss = _split_metric(
        best_clf, start_bags, labels["val"], binary, pos_index
    )
    for epoch in range(1, protocol.stage2.epochs + 1):
        train_loss, moments = _full_backprop_epoch(
            current, clf, dataset.train, labels["train"], spec, config, moments, seed, epoch
        )
        bags_val = extract_bags(current, dataset.val, spec)
        metric, val_loss = _split_metric(clf, bags_val, labels["val"], binary, pos_index)
        history.append(LossRecord(epoch, "finetune_train", train_loss))
        history.append(LossRecord(epoch, "finetune_val", val_loss))
        if metric > best_metric or (metric == best_metric and val_loss < best_loss):
            best_metric, best_loss = metric, val_loss
            best_encoder = current.copy()
            best_clf = clf.copy()

    bags_test = extract_bags(best_encoder, dataset.test, spec)
    report = _report(
        best_clf, bags_test, labels["test"], binary, pos_index, dataset.counts()
    )
    return FinetuneResult(best_encoder, best_clf.head, best_clf.pool, report, history)


def nested_fraction_subsets(
    records: list[ImageRecord],
    fractions: tuple[float, ...],
    seed: int,
) -> dict[float, list[ImageRecord]]:
    """Patient-level stratified prefixes: smaller fractions nest in larger.

    Patients are grouped by their majority label, each group is shuffled
    once, and fraction f keeps the first round(f * group size) patients
    of every group.
    """
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fraction {f} outside (0, 1]")
    by_patient: dict[str, list[ImageRecord]] = {}
    for r in records:
        by_patient.setdefault(r.patient_id, []).append(r)
    strata: dict[str, list[str]] = {}
    for pid, group in by_patient.items():
        tally: dict[str, int] = {}
        for r in group:
            tally[r.label] = tally.get(r.label, 0) + 1
        majority = sorted(tally, key=lambda lab: (-tally[lab], lab))[0]
        strata.setdefault(majority, []).append(pid)

    rng = np.random.default_rng(seed)
    for label in sorted(strata):
        pids = strata[label]
        rng.shuffle(pids)

    out: dict[float, list[ImageRecord]] = {}
    all_labels = {r.label for r in records}
    for f in fractions:
        keep: set[str] = set()
        for label in sorted(strata):
            pids = strata[label]
            keep.update(pids[: int(f * len(pids) + 0.5)])
        subset = [r for r in records if r.patient_id in keep]
        if {r.label for r in subset} != all_labels:
            raise DataError(f"fraction {f} drops a class entirely")
        out[f] = subset
    return out


@dataclass(frozen=True)
class SweepRecord:
    fraction: float
    condition: str  # "pretrained" or "scratch"
    auc: float | None
    accuracy: float


def data_efficiency_sweep(
    pretrained: EncoderParams,
    scratch: EncoderParams,
    dataset: EvalDataset,
    spec: PatchSpec,
    pooling: PoolingSpec = PoolingSpec(),
    protocol: StageProtocol = LINEAR_PROTOCOL,
    fractions: tuple[float, ...] = SWEEP_FRACTIONS,
    seed: int = 0,
) -> list[SweepRecord]:
    """Linear probes for both encoders over nested label budgets."""
    subsets = nested_fraction_subsets(dataset.train, fractions, seed)
    records: list[SweepRecord] = []
    for f in sorted(subsets):
        reduced = EvalDataset(train=subsets[f], val=dataset.val, test=dataset.test)
        for condition, enc in (("pretrained", pretrained), ("scratch", scratch)):
            result = linear_eval(enc, reduced, spec, pooling, protocol)
            records.append(
                SweepRecord(f, condition, result.report.auc, result.report.accuracy)
            )
    return records


def sweep_to_tsv(records: list[SweepRecord]) -> str:
    lines = ["fraction\tcondition\tauc\taccuracy"]
    for r in records:
        auc_text = "" if r.auc is None else format(r.auc, ".6f")
        lines.append(f"{r.fraction:g}\t{r.condition}\t{auc_text}\t{r.accuracy:.6f}")
    return "\n".join(lines) + "\n"


def transform_grid_experiment(
    kinds: tuple[str, ...],
    train_patches: list[Image16],
    val_patches: list[Image16],
    dataset: EvalDataset,
    spec: PatchSpec,
    method: str,
    schedule: PretrainSchedule,
    pooling: PoolingSpec = PoolingSpec(),
    protocol: StageProtocol = LINEAR_PROTOCOL,
    seed: int = 0,
) -> np.ndarray:
    """Pretrain once per single/pair pipeline cell; matrix of test accuracies.

    Cell (i, j) applies kinds[i] then kinds[j]; the diagonal is the single
    transform alone.
    """
    for kind in kinds:
        if kind not in TRANSFORM_KINDS:
            raise ConfigError(f"unknown transform kind {kind!r}")
    if not kinds:
        raise ConfigError("transform grid needs at least one kind")
    matrix = np.zeros((len(kinds), len(kinds)))
    for i, first in enumerate(kinds):
        for j, second in enumerate(kinds):
            cell = (first,) if i == j else (first, second)
            pipeline = AugmentPipeline(cell)
            run = pretrain(train_patches, val_patches, method, pipeline, schedule, seed)
            result = linear_eval(run.best_encoder, dataset, spec, pooling, protocol)
            matrix[i, j] = result.report.accuracy
    return matrix


def matrix_to_tsv(kinds: tuple[str, ...], matrix: np.ndarray) -> str:
    lines = ["\t" + "\t".join(kinds)]
    for name, row in zip(kinds, np.asarray(matrix)):
        lines.append(name + "\t" + "\t".join(format(v, ".6f") for v in row))
    return "\n".join(lines) + "\n"
