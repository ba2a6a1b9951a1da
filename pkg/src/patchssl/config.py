"""Run configuration: one JSON file with a section per pipeline stage.

Validation is fail-closed — an unknown section or key is a ConfigError,
not a warning — so a typo like "overlap_fration" cannot silently fall
back to a default. Values are pushed into the owning domain types
(PatchSpec, PretrainSchedule, ...) at load time so their range checks
fire before any command starts working.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .augment import TRANSFORM_KINDS
from .errors import ConfigError, DataError
from .evaluate import FinetuneProtocol, PoolingSpec, StageProtocol, SWEEP_FRACTIONS
from .phantom import PhantomConfig
from .selfsup import PretrainSchedule
from .tiling import PatchSpec

PATH_KEYS = (
    "manifest",        # whole-image manifest TSV
    "patch_manifest",  # per-patch manifest TSV written by the tile command
    "checkpoint",      # encoder checkpoint written by the pretrain command
    "pooling",         # trained pooling arrays written by linear-eval
    "prototypes",      # prototype matrix written by a swav pretrain
    "image",           # single image input for the heatmap command
    "output_dir",
)

PRETRAIN_METHODS = ("simclr", "byol", "swav")

_MISSING = object()


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be an object")
    return dict(value)


def _pop(section: dict, name: str, key: str, kinds, default=_MISSING):
    if key not in section:
        if default is _MISSING:
            raise ConfigError(f"{name}.{key} is required")
        return default
    value = section.pop(key)
    if kinds is bool:
        good = isinstance(value, bool)
    elif kinds is float:
        good = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif kinds is int:
        good = isinstance(value, int) and not isinstance(value, bool)
    else:
        good = isinstance(value, kinds)
    if not good:
        raise ConfigError(f"{name}.{key} has the wrong type: {value!r}")
    return float(value) if kinds is float else value


def _reject_leftovers(section: dict, name: str) -> None:
    if section:
        extra = ", ".join(sorted(section))
        raise ConfigError(f"unknown key(s) in {name!r}: {extra}")


def _kind_tuple(section: dict, name: str, key: str, default) -> tuple[str, ...]:
    value = _pop(section, name, key, list, list(default))
    kinds = tuple(value)
    for kind in kinds:
        if kind not in TRANSFORM_KINDS:
            raise ConfigError(f"{name}.{key}: unknown transform kind {kind!r}")
    return kinds


def _protocol(section: dict, name: str, default: StageProtocol) -> StageProtocol:
    epochs = _pop(section, name, "epochs", int, default.epochs)
    lr = _pop(section, name, "lr", float, default.lr)
    decay = _pop(section, name, "weight_decay", float, default.weight_decay)
    _reject_leftovers(section, name)
    try:
        return StageProtocol(epochs=epochs, lr=lr, weight_decay=decay)
    except ValueError as err:
        raise ConfigError(f"{name}: {err}") from err


@dataclass
class RunConfig:
    seed: int
    paths: dict[str, str]
    patch_spec: PatchSpec
    augment_kinds: tuple[str, ...]
    method: str
    schedule: PretrainSchedule
    train_cap: int
    val_cap: int
    pooling: PoolingSpec
    linear: StageProtocol
    finetune: FinetuneProtocol
    sweep_fractions: tuple[float, ...]
    grid_kinds: tuple[str, ...]
    phantom: PhantomConfig
    split_ratios: tuple[float, float, float]
    workers: int = 1
    prototype_temperature: float = 0.1
    prototype_top_k: int = 5
    prototype_sample_cap: int = 2000

    def path(self, key: str) -> str:
        """Configured path for an input the running command needs."""
        if key not in PATH_KEYS:
            raise ConfigError(f"unknown path key {key!r}")
        value = self.paths.get(key)
        if not value:
            raise ConfigError(f"paths.{key} is required by this command")
        return value

    def require_inputs(self, *keys: str) -> list[str]:
        """Resolve input paths and fail if any is missing on disk."""
        resolved = []
        for key in keys:
            value = self.path(key)
            if not os.path.exists(value):
                raise DataError(f"paths.{key}: no such file or directory: {value}")
            resolved.append(value)
        return resolved

    def output_dir(self) -> str:
        out = self.path("output_dir")
        os.makedirs(out, exist_ok=True)
        return out


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    raw = dict(raw)
    if "seed" not in raw:
        raise ConfigError("seed is required")
    seed = raw.pop("seed")
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    paths = _section(raw, "paths")
    raw.pop("paths", None)
    for key, value in paths.items():
        if key not in PATH_KEYS:
            raise ConfigError(f"unknown key(s) in 'paths': {key}")
        if not isinstance(value, str):
            raise ConfigError(f"paths.{key} must be a string")

    section = _section(raw, "patches")
    raw.pop("patches", None)
    try:
        patch_spec = PatchSpec(
            size=_pop(section, "patches", "size", int, 16),
            overlap_fraction=_pop(section, "patches", "overlap_fraction", float, 0.5),
            background_max=_pop(section, "patches", "background_max", float, 0.20),
            background_intensity_threshold=_pop(
                section, "patches", "background_intensity_threshold", int, 0
            ),
        )
    except ValueError as err:
        raise ConfigError(f"patches: {err}") from err
    _reject_leftovers(section, "patches")

    section = _section(raw, "augment")
    raw.pop("augment", None)
    augment_kinds = _kind_tuple(section, "augment", "kinds", ("crop_resize", "gaussian_blur"))
    if not 1 <= len(augment_kinds) <= 2:
        raise ConfigError("augment.kinds takes one or two transform kinds")
    _reject_leftovers(section, "augment")

    section = _section(raw, "pretrain")
    raw.pop("pretrain", None)
    method = _pop(section, "pretrain", "method", str, "simclr")
    if method not in PRETRAIN_METHODS:
        raise ConfigError(f"pretrain.method must be one of {PRETRAIN_METHODS}")
    train_cap = _pop(section, "pretrain", "train_cap", int, 3000)
    val_cap = _pop(section, "pretrain", "val_cap", int, 400)
    if train_cap < 1 or val_cap < 1:
        raise ConfigError("pretrain caps must be positive")
    defaults = PretrainSchedule()
    kwargs = {}
    for name in (
        "epochs", "batch_size", "encoder_hidden", "embedding_dim",
        "n_prototypes", "queue_capacity", "sinkhorn_iters",
    ):
        kwargs[name] = _pop(section, "pretrain", name, int, getattr(defaults, name))
    for name in (
        "base_lr", "weight_decay", "trust", "temperature", "ema_decay",
        "swav_temperature", "sinkhorn_epsilon",
    ):
        kwargs[name] = _pop(section, "pretrain", name, float, getattr(defaults, name))
    kwargs["optimizer"] = _pop(section, "pretrain", "optimizer", str, defaults.optimizer)
    _reject_leftovers(section, "pretrain")
    try:
        schedule = PretrainSchedule(**kwargs)
    except ValueError as err:
        raise ConfigError(f"pretrain: {err}") from err

    section = _section(raw, "pooling")
    raw.pop("pooling", None)
    try:
        pooling = PoolingSpec(
            kind=_pop(section, "pooling", "kind", str, "gap"),
            hidden=_pop(section, "pooling", "hidden", int, 512),
            seed=seed,
        )
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(f"pooling: {err}") from err
    _reject_leftovers(section, "pooling")

    linear = _protocol(
        _section(raw, "linear"), "linear",
        StageProtocol(epochs=100, lr=1e-3, weight_decay=0.01),
    )
    raw.pop("linear", None)

    section = _section(raw, "finetune")
    raw.pop("finetune", None)
    default_ft = FinetuneProtocol()
    stage1 = _protocol(_section(section, "stage1"), "finetune.stage1", default_ft.stage1)
    stage2_section = _section(section, "stage2")
    epochs = _pop(stage2_section, "finetune.stage2", "epochs", int, default_ft.stage2.epochs)
    lr = _pop(stage2_section, "finetune.stage2", "lr", float, default_ft.stage2.lr)
    decay = _pop(
        stage2_section, "finetune.stage2", "weight_decay", float,
        default_ft.stage2.weight_decay,
    )
    _reject_leftovers(stage2_section, "finetune.stage2")
    if epochs < 0:
        raise ConfigError("finetune.stage2: epochs must be >= 0")
    try:
        stage2 = StageProtocol(epochs=epochs, lr=lr, weight_decay=decay)
    except ValueError as err:
        raise ConfigError(f"finetune.stage2: {err}") from err
    section.pop("stage1", None)
    section.pop("stage2", None)
    _reject_leftovers(section, "finetune")
    finetune = FinetuneProtocol(stage1=stage1, stage2=stage2)

    section = _section(raw, "sweep")
    raw.pop("sweep", None)
    fractions = _pop(section, "sweep", "fractions", list, list(SWEEP_FRACTIONS))
    _reject_leftovers(section, "sweep")
    for f in fractions:
        if not isinstance(f, (int, float)) or isinstance(f, bool) or not 0.0 < f <= 1.0:
            raise ConfigError(f"sweep.fractions: bad fraction {f!r}")
    sweep_fractions = tuple(float(f) for f in fractions)

    section = _section(raw, "grid")
    raw.pop("grid", None)
    grid_kinds = _kind_tuple(
        section, "grid", "kinds", ("crop_resize", "brightness", "hist_eq")
    )
    if len(grid_kinds) < 1:
        raise ConfigError("grid.kinds needs at least one transform kind")
    _reject_leftovers(section, "grid")

    section = _section(raw, "phantom")
    raw.pop("phantom", None)
    defaults = PhantomConfig()
    kwargs = {}
    for name in ("n_images", "size", "images_per_patient"):
        kwargs[name] = _pop(section, "phantom", name, int, getattr(defaults, name))
    for name in (
        "positive_fraction", "background_level", "brightness_jitter",
        "texture_amplitude", "texture_sigma", "lesion_gain",
    ):
        kwargs[name] = _pop(section, "phantom", name, float, getattr(defaults, name))
    semiaxes = _pop(
        section, "phantom", "lesion_semiaxis_range", list,
        list(defaults.lesion_semiaxis_range),
    )
    if len(semiaxes) != 2:
        raise ConfigError("phantom.lesion_semiaxis_range takes [low, high]")
    kwargs["lesion_semiaxis_range"] = (float(semiaxes[0]), float(semiaxes[1]))
    _reject_leftovers(section, "phantom")
    try:
        phantom = PhantomConfig(**kwargs)
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(f"phantom: {err}") from err

    section = _section(raw, "split")
    raw.pop("split", None)
    ratios = _pop(section, "split", "ratios", list, [0.7, 0.15, 0.15])
    _reject_leftovers(section, "split")
    if len(ratios) != 3 or any(
        not isinstance(r, (int, float)) or isinstance(r, bool) or r <= 0 for r in ratios
    ):
        raise ConfigError("split.ratios takes three positive numbers")
    split_ratios = (float(ratios[0]), float(ratios[1]), float(ratios[2]))

    section = _section(raw, "prototypes")
    raw.pop("prototypes", None)
    temperature = _pop(section, "prototypes", "temperature", float, 0.1)
    top_k = _pop(section, "prototypes", "top_k", int, 5)
    sample_cap = _pop(section, "prototypes", "sample_cap", int, 2000)
    _reject_leftovers(section, "prototypes")
    if temperature <= 0:
        raise ConfigError("prototypes.temperature must be positive")
    if top_k < 1 or sample_cap < 1:
        raise ConfigError("prototypes.top_k and sample_cap must be >= 1")

    workers = raw.pop("workers", 1)
    if not isinstance(workers, int) or isinstance(workers, bool) or workers < 1:
        raise ConfigError("workers must be a positive integer")

    _reject_leftovers(raw, "config")
    return RunConfig(
        seed=seed,
        paths=paths,
        patch_spec=patch_spec,
        augment_kinds=augment_kinds,
        method=method,
        schedule=schedule,
        train_cap=train_cap,
        val_cap=val_cap,
        pooling=pooling,
        linear=linear,
        finetune=finetune,
        sweep_fractions=sweep_fractions,
        grid_kinds=grid_kinds,
        phantom=phantom,
        split_ratios=split_ratios,
        workers=workers,
        prototype_temperature=temperature,
        prototype_top_k=top_k,
        prototype_sample_cap=sample_cap,
    )


def apply_overrides(raw: dict, assignments: list[str]) -> dict:
    """Apply `section.key=value` command-line overrides onto the raw dict.

    Values parse as JSON first (numbers, booleans, lists) and fall back
    to plain strings, so `--set pretrain.epochs=5` and
    `--set paths.manifest=data/m.tsv` both work.
    """
    out = json.loads(json.dumps(raw))  # deep copy, JSON types only
    for text in assignments:
        if "=" not in text:
            raise ConfigError(f"override {text!r} is not of the form key=value")
        dotted, value_text = text.split("=", 1)
        keys = dotted.split(".")
        if not all(keys):
            raise ConfigError(f"override {text!r} has an empty key segment")
        try:
            value = json.loads(value_text)
        except json.JSONDecodeError:
            value = value_text
        node = out
        for key in keys[:-1]:
            nxt = node.get(key)
            if nxt is None:
                nxt = node[key] = {}
            elif not isinstance(nxt, dict):
                raise ConfigError(f"override {text!r} descends into a non-object")
            node = nxt
        node[keys[-1]] = value
    return out


def load_config(path: str | os.PathLike, overrides: list[str] | None = None) -> RunConfig:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ConfigError(f"no such config file: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from err
    if overrides:
        raw = apply_overrides(raw, overrides)
    return parse_config(raw)
