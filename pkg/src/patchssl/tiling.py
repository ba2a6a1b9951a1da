"""Grid tiling, background filtering, manifests, and patient-level splits."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .imaging import Image16

BINARY_LABELS = ("negative", "positive")
PATCH_LABELS = (
    "background",
    "malignant_mass",
    "benign_mass",
    "malignant_calcification",
    "benign_calcification",
)
KNOWN_LABELS = frozenset(BINARY_LABELS) | frozenset(PATCH_LABELS)

MANIFEST_FIELDS = ("image_path", "patient_id", "label", "view")


@dataclass(frozen=True)
class PatchSpec:
    """Square tiling parameters plus the background-removal rule."""

    size: int
    overlap_fraction: float = 0.5
    background_max: float = 0.20
    background_intensity_threshold: int = 0

    def __post_init__(self):
        if self.size < 8:
            raise ValueError("patch size must be >= 8")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError("overlap_fraction must be in [0, 1)")
        if not 0.0 <= self.background_max <= 1.0:
            raise ValueError("background_max must be in [0, 1]")

    @property
    def stride(self) -> int:
        # half-up rounding, with a nudge so decimal fractions like 0.55
        # that sit one ulp below .5 still round up; stride 0 would never advance
        return max(1, int(self.size * (1.0 - self.overlap_fraction) + 0.5 + 1e-9))


@dataclass
class Patch:
    """A square crop plus where it came from."""

    image: Image16
    origin: tuple[int, int]
    source_id: str = ""


@dataclass
class ManifestEntry:
    image_path: str
    patient_id: str
    label: str
    view: str

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError("patient_id must be nonempty")
        if self.label not in KNOWN_LABELS:
            raise ValueError(f"unknown label {self.label!r}")


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def patient_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            seen.setdefault(e.patient_id, None)
        return list(seen)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class RoiAnnotation:
    center: tuple[int, int]
    cls: str

    def __post_init__(self):
        if self.cls not in PATCH_LABELS:
            raise ValueError(f"ROI class {self.cls!r} not in {PATCH_LABELS}")


def _axis_origins(dim: int, size: int, stride: int) -> list[int]:
    last = dim - size
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)  # flush with the far edge
    return origins


def tile_grid(image: Image16, spec: PatchSpec) -> list[Patch]:
    """Tile an image into overlapping square patches on a regular grid.

    Origins advance by the spec stride in each axis, with a final origin
    flush against the far edge so the whole image is covered. Patches are
    returned row-major (y outer, x inner).
    """
    if image.width < spec.size or image.height < spec.size:
        raise DataError(
            f"image {image.width}x{image.height} smaller than patch size {spec.size}"
        )
    xs = _axis_origins(image.width, spec.size, spec.stride)
    ys = _axis_origins(image.height, spec.size, spec.stride)
    patches = []
    for oy in ys:
        for ox in xs:
            crop = image.pixels[oy : oy + spec.size, ox : ox + spec.size]
            patches.append(Patch(Image16.from_array(crop.copy()), (ox, oy)))
    return patches


def grid_shape(image: Image16, spec: PatchSpec) -> tuple[int, int]:
    """(rows, cols) of the tiling grid produced by :func:`tile_grid`."""
    return (
        len(_axis_origins(image.height, spec.size, spec.stride)),
        len(_axis_origins(image.width, spec.size, spec.stride)),
    )


def background_fraction(patch: Patch, threshold: int) -> float:
    """Fraction of pixels at or below the background intensity threshold."""
    pix = patch.image.pixels
    return float(np.count_nonzero(pix <= threshold)) / pix.size


def filter_patches(patches: list[Patch], spec: PatchSpec) -> list[Patch]:
    """Drop patches whose background fraction is strictly above the cap."""
    return [
        p
        for p in patches
        if background_fraction(p, spec.background_intensity_threshold)
        <= spec.background_max
    ]


def _window_background_fractions(
    pixels: np.ndarray, size: int, threshold: int
) -> np.ndarray:
    """Background fraction of every size x size window, via a summed-area table."""
    mask = (pixels <= threshold).astype(np.int64)
    sat = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    sat[1:, 1:] = mask.cumsum(0).cumsum(1)
    h, w = mask.shape
    ys = np.arange(h - size + 1)
    xs = np.arange(w - size + 1)
    counts = (
        sat[np.ix_(ys + size, xs + size)]
        - sat[np.ix_(ys, xs + size)]
        - sat[np.ix_(ys + size, xs)]
        + sat[np.ix_(ys, xs)]
    )
    return counts / float(size * size)


def extract_annotated_pair(
    image: Image16,
    roi: RoiAnnotation,
    size: int,
    rng: np.random.Generator,
    *,
    background_max: float = 0.20,
    background_intensity_threshold: int = 0,
) -> tuple[Patch, Patch]:
    """One patch centered on the ROI plus one random non-overlapping patch.

    The random origin is drawn uniformly from all positions whose patch
    passes the background cap and is disjoint from the ROI patch. The ROI
    origin is clamped so the patch stays inside the image.
    """
    if image.width < size or image.height < size:
        raise DataError("image smaller than requested patch size")
    cx, cy = roi.center
    rx = min(max(cx - size // 2, 0), image.width - size)
    ry = min(max(cy - size // 2, 0), image.height - size)
    roi_patch = Patch(
        Image16.from_array(image.pixels[ry : ry + size, rx : rx + size].copy()),
        (rx, ry),
    )

    fractions = _window_background_fractions(
        image.pixels, size, background_intensity_threshold
    )
    oy, ox = np.indices(fractions.shape)
    overlaps = (np.abs(ox - rx) < size) & (np.abs(oy - ry) < size)
    eligible = (fractions <= background_max) & ~overlaps
    candidates = np.flatnonzero(eligible)
    if candidates.size == 0:
        raise DataError("no eligible position for the random patch")
    pick = candidates[int(rng.integers(candidates.size))]
    py, px = np.unravel_index(pick, fractions.shape)
    rand_patch = Patch(
        Image16.from_array(image.pixels[py : py + size, px : px + size].copy()),
        (int(px), int(py)),
    )
    return roi_patch, rand_patch


def is_positive_label(label: str) -> bool:
    return label == "positive" or label.startswith("malignant")


def _patient_majority_positive(entries: list[ManifestEntry]) -> bool:
    pos = sum(1 for e in entries if is_positive_label(e.label))
    return pos * 2 >= len(entries)  # ties resolve positive


def _allocate(n: int, ratios: tuple[float, ...], rotation: int) -> list[int]:
    """Largest-remainder apportionment of n items over the ratios.

    Remainder ties go to splits in rotated index order so that successive
    strata do not all starve the same split.
    """
    exact = [r * n for r in ratios]
    counts = [int(np.floor(v)) for v in exact]
    leftover = n - sum(counts)
    order = sorted(
        range(len(ratios)),
        key=lambda i: (-(exact[i] - counts[i]), (i + rotation) % len(ratios)),
    )
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def stratified_patient_split(
    manifest: Manifest,
    ratios: tuple[float, float, float],
    seed: int,
) -> tuple[Manifest, Manifest, Manifest]:
    """Partition patients into train/val/test keeping label proportions.

    All images of one patient land in one split. Within each stratum
    (positive / negative patients) counts follow the ratios to within one
    patient. Deterministic for a fixed seed.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    by_patient: dict[str, list[ManifestEntry]] = {}
    for e in manifest.entries:
        by_patient.setdefault(e.patient_id, []).append(e)
    n_nonzero = sum(1 for r in ratios if r > 0)
    if len(by_patient) < n_nonzero:
        raise DataError(
            f"{len(by_patient)} patients cannot fill {n_nonzero} nonempty splits"
        )

    strata = {True: [], False: []}
    for pid in sorted(by_patient):
        strata[_patient_majority_positive(by_patient[pid])].append(pid)

    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    for stratum_idx, positive in enumerate((True, False)):
        pids = strata[positive]
        rng.shuffle(pids)
        counts = _allocate(len(pids), ratios, rotation=stratum_idx)
        cursor = 0
        for split_idx, count in enumerate(counts):
            for pid in pids[cursor : cursor + count]:
                assignment[pid] = split_idx
            cursor += count

    splits = (Manifest(), Manifest(), Manifest())
    for e in manifest.entries:
        splits[assignment[e.patient_id]].entries.append(e)
    return splits


def write_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    """Write one tab-separated record per image, with a header line."""
    with open(os.fspath(path), "w", encoding="utf-8") as f:
        f.write("\t".join(MANIFEST_FIELDS) + "\n")
        for e in manifest.entries:
            f.write(f"{e.image_path}\t{e.patient_id}\t{e.label}\t{e.view}\n")


def read_manifest(path: str | os.PathLike) -> Manifest:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such manifest: {path}")
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if tuple(header.split("\t")) != MANIFEST_FIELDS:
            raise DataError(f"{path}: bad manifest header {header!r}")
        manifest = Manifest()
        for lineno, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(MANIFEST_FIELDS):
                raise DataError(f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} fields")
            try:
                manifest.entries.append(ManifestEntry(*parts))
            except ValueError as err:
                raise DataError(f"{path}:{lineno}: {err}") from err
    return manifest
