"""Command-line front end wiring the pipeline stages together.

Every command reads one JSON config (overridable with repeated
``--set section.key=value`` flags), works under the configured output
directory, and is deterministic for a fixed config and seed: rerunning
a command overwrites its artifacts with byte-identical content.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. On failure a single machine-readable line is printed to
stderr: ``ERROR<TAB>kind<TAB>message``.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .augment import AugmentPipeline
from .config import RunConfig, load_config
from .encoder import EncoderParams, encode, init_params, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericError
from .evaluate import (
    EvalDataset,
    ImageRecord,
    build_pool,
    data_efficiency_sweep,
    finetune,
    image_bag,
    linear_eval,
    matrix_to_tsv,
    sweep_to_tsv,
    transform_grid_experiment,
)
from .imaging import UINT16_MAX, Image16, load_png16, save_png16
from .phantom import generate
from .pooling import (
    AttentionParams,
    AttentionScores,
    SaParams,
    attention_heatmap,
    heatmap_to_tsv,
    mip_forward,
    render_pgm,
    sa_attention,
)
from .prototypes import (
    assign,
    enrichment,
    nearest_patches,
    normalize_rows,
    table_to_tsv,
    write_embeddings,
)
from .selfsup import pretrain
from .tiling import (
    Manifest,
    ManifestEntry,
    filter_patches,
    grid_shape,
    read_manifest,
    stratified_patient_split,
    tile_grid,
    write_manifest,
)

COMMANDS = (
    "phantom",
    "tile",
    "pretrain",
    "linear-eval",
    "finetune",
    "sweep",
    "gridexp",
    "heatmap",
    "prototypes",
)


def _resolve(manifest_path: str, image_path: str) -> str:
    """Manifest rows hold paths relative to the manifest's directory."""
    if os.path.isabs(image_path):
        return image_path
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), image_path)


def _load_entry_image(manifest_path: str, entry: ManifestEntry) -> Image16:
    path = _resolve(manifest_path, entry.image_path)
    if not os.path.exists(path):
        raise DataError(f"{entry.image_path}: no such image (from {manifest_path})")
    return load_png16(path)


def _records(manifest_path: str, manifest: Manifest) -> list[ImageRecord]:
    return [
        ImageRecord(_load_entry_image(manifest_path, e), e.label, e.patient_id)
        for e in manifest.entries
    ]


def _dataset(config: RunConfig, manifest_path: str) -> EvalDataset:
    manifest = read_manifest(manifest_path)
    train, val, test = stratified_patient_split(manifest, config.split_ratios, config.seed)
    return EvalDataset(
        train=_records(manifest_path, train),
        val=_records(manifest_path, val),
        test=_records(manifest_path, test),
    )


def _capped(images: list[Image16], cap: int, rng: np.random.Generator) -> list[Image16]:
    if len(images) <= cap:
        return images
    keep = rng.permutation(len(images))[:cap]
    return [images[i] for i in keep]


def _patch_pools(config: RunConfig, manifest_path: str):
    """Patient-split patch sets for pretraining: (train, val) image lists."""
    manifest = read_manifest(manifest_path)
    train, val, _ = stratified_patient_split(manifest, config.split_ratios, config.seed)
    rng = np.random.default_rng(config.seed)
    train_images = [_load_entry_image(manifest_path, e) for e in train.entries]
    val_images = [_load_entry_image(manifest_path, e) for e in val.entries]
    return (
        _capped(train_images, config.train_cap, rng),
        _capped(val_images, config.val_cap, rng),
    )


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def _history_tsv(records) -> str:
    lines = ["epoch\tsplit\tloss"]
    for r in records:
        lines.append(f"{r.epoch}\t{r.split}\t{format(r.loss, '.17g')}")
    return "\n".join(lines) + "\n"


def _metrics_tsv(report) -> str:
    auc_text = "" if report.auc is None else format(report.auc, ".6f")
    counts = report.counts
    header = "auc\taccuracy\ttrain\tval\ttest"
    row = (
        f"{auc_text}\t{report.accuracy:.6f}\t"
        f"{counts.get('train', 0)}\t{counts.get('val', 0)}\t{counts.get('test', 0)}"
    )
    return header + "\n" + row + "\n"


def _save_probe(path: str, pool, head) -> None:
    arrays = {"kind": np.array(pool.kind)}
    if pool.kind == "mip":
        arrays.update(v=pool.attention.v, u=pool.attention.u, w=pool.attention.w)
    elif pool.kind == "sa":
        arrays.update(
            cls_token=pool.sa.cls_token, wq=pool.sa.wq, wk=pool.sa.wk, wv=pool.sa.wv
        )
    arrays.update(head_weight=head.weight, head_bias=head.bias)
    np.savez(path, **arrays)


def cmd_phantom(config: RunConfig) -> str:
    out = config.output_dir()
    image_dir = os.path.join(out, "phantom")
    os.makedirs(image_dir, exist_ok=True)
    samples = generate(config.phantom, config.seed)
    manifest = Manifest()
    for i, sample in enumerate(samples):
        name = f"phantom_{i:05d}.png"
        save_png16(sample.image, os.path.join(image_dir, name))
        manifest.entries.append(
            ManifestEntry(f"phantom/{name}", sample.patient_id, sample.label, "synthetic")
        )
    manifest_path = os.path.join(out, "manifest.tsv")
    write_manifest(manifest, manifest_path)
    patients = len({s.patient_id for s in samples})
    return f"phantom images={len(samples)} patients={patients} manifest={manifest_path}"


def _tile_one(config: RunConfig, manifest_path: str, patch_dir: str, entry: ManifestEntry):
    image = _load_entry_image(manifest_path, entry)
    kept = filter_patches(tile_grid(image, config.patch_spec), config.patch_spec)
    stem = os.path.splitext(os.path.basename(entry.image_path))[0]
    rows = []
    for patch in kept:
        ox, oy = patch.origin
        name = f"{stem}_y{oy:05d}_x{ox:05d}.png"
        save_png16(patch.image, os.path.join(patch_dir, name))
        rows.append(ManifestEntry(name, entry.patient_id, entry.label, entry.view))
    return rows


def cmd_tile(config: RunConfig) -> str:
    (manifest_path,) = config.require_inputs("manifest")
    out = config.output_dir()
    patch_dir = os.path.join(out, "patches")
    os.makedirs(patch_dir, exist_ok=True)
    manifest = read_manifest(manifest_path)
    patch_manifest = Manifest()
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = [
                pool.submit(_tile_one, config, manifest_path, patch_dir, e)
                for e in manifest.entries
            ]
            for future in futures:
                patch_manifest.entries.extend(future.result())
    else:
        for entry in manifest.entries:
            patch_manifest.entries.extend(_tile_one(config, manifest_path, patch_dir, entry))
    write_manifest(patch_manifest, os.path.join(patch_dir, "manifest.tsv"))
    return (
        f"tile images={len(manifest.entries)} patches={len(patch_manifest.entries)} "
        f"dir={patch_dir}"
    )


def cmd_pretrain(config: RunConfig) -> str:
    (patch_manifest,) = config.require_inputs("patch_manifest")
    out = config.output_dir()
    train_images, val_images = _patch_pools(config, patch_manifest)
    pipeline = AugmentPipeline(config.augment_kinds)
    result = pretrain(
        train_images, val_images, config.method, pipeline, config.schedule, config.seed
    )
    save_checkpoint(result.best_encoder, os.path.join(out, "encoder.ckpt"))
    _write_text(os.path.join(out, "pretrain_losses.tsv"), _history_tsv(result.records))
    extra = ""
    if result.prototypes is not None:
        np.save(os.path.join(out, "prototypes.npy"), result.prototypes)
        extra = f" prototypes={result.prototypes.shape[0]}"
    best_val = result.val_losses()[result.best_index]
    return (
        f"pretrain method={config.method} train={len(train_images)} "
        f"val={len(val_images)} best_epoch={result.best_index + 1} "
        f"val_loss={best_val:.6f}{extra}"
    )


def cmd_linear_eval(config: RunConfig) -> str:
    manifest_path, checkpoint = config.require_inputs("manifest", "checkpoint")
    out = config.output_dir()
    encoder = load_checkpoint(checkpoint)
    dataset = _dataset(config, manifest_path)
    result = linear_eval(encoder, dataset, config.patch_spec, config.pooling, config.linear)
    _write_text(os.path.join(out, "linear_metrics.tsv"), _metrics_tsv(result.report))
    _write_text(os.path.join(out, "linear_history.tsv"), _history_tsv(result.history))
    _save_probe(os.path.join(out, "probe.npz"), result.pool, result.head)
    auc_text = "" if result.report.auc is None else f" auc={result.report.auc:.6f}"
    return (
        f"linear-eval pooling={config.pooling.kind}{auc_text} "
        f"accuracy={result.report.accuracy:.6f} best_epoch={result.best_epoch}"
    )


def cmd_finetune(config: RunConfig) -> str:
    manifest_path, checkpoint = config.require_inputs("manifest", "checkpoint")
    out = config.output_dir()
    encoder = load_checkpoint(checkpoint)
    dataset = _dataset(config, manifest_path)
    result = finetune(
        encoder, dataset, config.patch_spec, config.pooling, config.finetune, config.seed
    )
    save_checkpoint(result.encoder, os.path.join(out, "encoder_finetuned.ckpt"))
    _write_text(os.path.join(out, "finetune_metrics.tsv"), _metrics_tsv(result.report))
    _write_text(os.path.join(out, "finetune_history.tsv"), _history_tsv(result.history))
    _save_probe(os.path.join(out, "finetune_probe.npz"), result.pool, result.head)
    auc_text = "" if result.report.auc is None else f" auc={result.report.auc:.6f}"
    return (
        f"finetune pooling={config.pooling.kind}{auc_text} "
        f"accuracy={result.report.accuracy:.6f}"
    )


def cmd_sweep(config: RunConfig) -> str:
    manifest_path, checkpoint = config.require_inputs("manifest", "checkpoint")
    out = config.output_dir()
    pretrained = load_checkpoint(checkpoint)
    sizes = [pretrained.input_dim] + [layer.weight.shape[1] for layer in pretrained.layers]
    scratch = init_params(sizes, seed=config.seed + 1)
    dataset = _dataset(config, manifest_path)
    records = data_efficiency_sweep(
        pretrained,
        scratch,
        dataset,
        config.patch_spec,
        config.pooling,
        config.linear,
        config.sweep_fractions,
        config.seed,
    )
    _write_text(os.path.join(out, "sweep.tsv"), sweep_to_tsv(records))
    return f"sweep fractions={len(config.sweep_fractions)} rows={len(records)}"


def cmd_gridexp(config: RunConfig) -> str:
    manifest_path, patch_manifest = config.require_inputs("manifest", "patch_manifest")
    out = config.output_dir()
    train_images, val_images = _patch_pools(config, patch_manifest)
    dataset = _dataset(config, manifest_path)
    matrix = transform_grid_experiment(
        config.grid_kinds,
        train_images,
        val_images,
        dataset,
        config.patch_spec,
        config.method,
        config.schedule,
        config.pooling,
        config.linear,
        config.seed,
    )
    _write_text(os.path.join(out, "grid.tsv"), matrix_to_tsv(config.grid_kinds, matrix))
    return (
        f"gridexp kinds={len(config.grid_kinds)} cells={matrix.size} "
        f"mean_accuracy={float(matrix.mean()):.6f}"
    )


def _load_probe_scores(config: RunConfig, bag) -> AttentionScores:
    """Patch attention scores for the configured pooling.

    With a trained probe on disk (paths.pooling) its parameters are used;
    otherwise the pooling is freshly initialized from the config seed.
    GAP has no parameters and always yields uniform weights.
    """
    kind = config.pooling.kind
    if kind == "gap":
        k = len(bag)
        return AttentionScores(np.full(k, 1.0 / k), provenance=bag.provenance)
    probe_path = config.paths.get("pooling")
    if probe_path:
        if not os.path.exists(probe_path):
            raise DataError(f"paths.pooling: no such file or directory: {probe_path}")
        with np.load(probe_path) as data:
            stored = str(data["kind"])
            if stored != kind:
                raise ConfigError(
                    f"probe at {probe_path} holds {stored!r} pooling, config says {kind!r}"
                )
            if kind == "mip":
                params = AttentionParams(data["v"], data["u"], data["w"])
            else:
                params = SaParams(data["cls_token"], data["wq"], data["wk"], data["wv"])
    else:
        pool = build_pool(config.pooling, bag.embeddings.shape[1])
        params = pool.attention if kind == "mip" else pool.sa
    if kind == "mip":
        return mip_forward(bag, params)[1]
    weights = sa_attention(bag, params)[0, 1:]
    return AttentionScores(weights, provenance=bag.provenance)


def cmd_heatmap(config: RunConfig) -> str:
    image_path, checkpoint = config.require_inputs("image", "checkpoint")
    out = config.output_dir()
    encoder = load_checkpoint(checkpoint)
    image = load_png16(image_path)
    bag = image_bag(encoder, image, config.patch_spec)
    rows, cols = grid_shape(image, config.patch_spec)
    scores = _load_probe_scores(config, bag)
    heatmap = attention_heatmap(scores, rows, cols)
    _write_text(os.path.join(out, "heatmap.tsv"), heatmap_to_tsv(heatmap))
    with open(os.path.join(out, "heatmap.pgm"), "wb") as f:
        f.write(render_pgm(heatmap))
    return f"heatmap rows={rows} cols={cols} pooling={config.pooling.kind}"


def cmd_prototypes(config: RunConfig) -> str:
    patch_manifest, checkpoint, proto_path = config.require_inputs(
        "patch_manifest", "checkpoint", "prototypes"
    )
    out = config.output_dir()
    encoder = load_checkpoint(checkpoint)
    prototypes = normalize_rows(np.load(proto_path))
    manifest = read_manifest(patch_manifest)
    rng = np.random.default_rng(config.seed)
    entries = list(manifest.entries)
    if len(entries) > config.prototype_sample_cap:
        keep = rng.permutation(len(entries))[: config.prototype_sample_cap]
        entries = [entries[i] for i in keep]
    if not entries:
        raise DataError(f"{patch_manifest}: no patches to assign")
    batch = np.stack(
        [
            _load_entry_image(patch_manifest, e).pixels.reshape(-1).astype(np.float64)
            / UINT16_MAX
            for e in entries
        ]
    )
    embeddings = normalize_rows(encode(encoder, batch))
    refs = [e.image_path for e in entries]
    labels = [e.label for e in entries]

    assignment = assign(embeddings, prototypes, config.prototype_temperature)
    table = enrichment(assignment, labels)
    proto_names = [f"p{i}" for i in range(table.counts.shape[0])]
    _write_text(
        os.path.join(out, "enrichment_counts.tsv"),
        table_to_tsv(proto_names, table.classes, table.counts, corner="prototype"),
    )
    _write_text(
        os.path.join(out, "class_proportions.tsv"),
        table_to_tsv(table.classes, proto_names, table.class_proportions, corner="class"),
    )
    _write_text(
        os.path.join(out, "prototype_proportions.tsv"),
        table_to_tsv(proto_names, table.classes, table.prototype_proportions, corner="prototype"),
    )
    k = min(config.prototype_top_k, len(refs))
    lines = ["prototype\trank\tref\tdistance"]
    for p in range(prototypes.shape[0]):
        for rank, (ref, distance) in enumerate(
            nearest_patches(prototypes, p, embeddings, refs, k), start=1
        ):
            lines.append(f"p{p}\t{rank}\t{ref}\t{format(distance, '.17g')}")
    _write_text(os.path.join(out, "nearest_patches.tsv"), "\n".join(lines) + "\n")
    write_embeddings(os.path.join(out, "embeddings.bin"), refs, embeddings)
    return (
        f"prototypes n={prototypes.shape[0]} samples={len(refs)} "
        f"top_k={k} out={out}"
    )


_DISPATCH = {
    "phantom": cmd_phantom,
    "tile": cmd_tile,
    "pretrain": cmd_pretrain,
    "linear-eval": cmd_linear_eval,
    "finetune": cmd_finetune,
    "sweep": cmd_sweep,
    "gridexp": cmd_gridexp,
    "heatmap": cmd_heatmap,
    "prototypes": cmd_prototypes,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run configuration")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable); the value parses as JSON",
    )
    common.add_argument(
        "--workers", type=int, default=None, help="worker threads for tiling"
    )
    parser = argparse.ArgumentParser(
        prog="patchssl",
        description="Tiled-patch self-supervised learning pipeline for 16-bit grayscale images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "phantom": "generate the synthetic lesion dataset and its manifest",
        "tile": "cut every manifest image into background-filtered patches",
        "pretrain": "self-supervised pretraining on tiled patches",
        "linear-eval": "linear probe of a frozen encoder checkpoint",
        "finetune": "two-stage finetuning of a pretrained checkpoint",
        "sweep": "label-efficiency sweep: pretrained vs scratch probes",
        "gridexp": "transform-pair grid: pretrain and probe per cell",
        "heatmap": "attention heatmap of one image as TSV and PGM",
        "prototypes": "assign patches to prototypes and export tables",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.overrides)
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers must be a positive integer")
            config.workers = args.workers
        print(_DISPATCH[args.command](config))
        return 0
    except ConfigError as err:
        print(f"ERROR\tconfig\t{err}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as err:
        print(f"ERROR\tdata\t{err}", file=sys.stderr)
        return 3
    except NumericError as err:
        print(f"ERROR\tnumeric\t{err}", file=sys.stderr)
        return 4
    except ValueError as err:
        print(f"ERROR\tconfig\t{err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
