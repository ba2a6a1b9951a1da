"""Intensity and geometry transforms for 16-bit grayscale patches.

All pixel math happens on a [0, 1] float copy and is re-quantized to
uint16 with half-up rounding and clamping at the end of each transform,
so outputs can never wrap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imaging import UINT16_MAX, Image16, resize

TRANSFORM_KINDS = (
    "crop_resize",
    "brightness",
    "contrast",
    "gamma",
    "gaussian_blur",
    "hist_eq",
    "sharpen",
    "highpass",
)

# sigma of the smoothing kernel inside sharpen and highpass
DETAIL_SIGMA = 1.0
BLUR_TRUNCATE = 3.0


@dataclass(frozen=True)
class TransformSpec:
    """One transform kind with concrete (already sampled) parameters."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")


@dataclass(frozen=True)
class ParamRanges:
    """Sampling intervals for each transform's parameter."""

    crop_scale: tuple[float, float] = (0.5, 1.0)
    brightness_delta: tuple[float, float] = (-0.2, 0.2)
    contrast_factor: tuple[float, float] = (0.6, 1.4)
    gamma_exponent: tuple[float, float] = (0.5, 2.0)
    blur_sigma: tuple[float, float] = (0.5, 2.0)
    sharpen_strength: tuple[float, float] = (0.5, 2.0)


@dataclass
class AugmentPipeline:
    """One or two transform kinds applied in order with sampled parameters."""

    kinds: tuple[str, ...]
    ranges: ParamRanges = field(default_factory=ParamRanges)
    seed: int = 0

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        if not 1 <= len(self.kinds) <= 2:
            raise ValueError("pipeline takes one or two transform kinds")
        for kind in self.kinds:
            if kind not in TRANSFORM_KINDS:
                raise ValueError(f"unknown transform kind {kind!r}")


def _to_unit(image: Image16) -> np.ndarray:
    return image.pixels.astype(np.float64) / UINT16_MAX


def _from_unit(arr: np.ndarray) -> Image16:
    quantized = np.floor(np.clip(arr, 0.0, 1.0) * UINT16_MAX + 0.5)
    return Image16.from_array(quantized.astype(np.uint16))


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def _blur_unit(unit: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(
        unit, sigma=sigma, mode="reflect", truncate=BLUR_TRUNCATE
    )


def _hist_eq(pixels: np.ndarray) -> np.ndarray:
    """Equalize within the intensity band the patch actually occupies."""
    lo = int(pixels.min())
    hi = int(pixels.max())
    if hi == lo:
        return pixels.copy()
    counts = np.bincount(pixels.ravel(), minlength=hi + 1)
    cdf = np.cumsum(counts)
    cdf_lo = cdf[lo]
    span = cdf[hi] - cdf_lo
    levels = lo + (cdf[lo : hi + 1] - cdf_lo) / span * (hi - lo)
    lut = np.floor(levels + 0.5).astype(np.uint16)
    return lut[pixels.astype(np.int64) - lo]


def apply_transform(image: Image16, spec: TransformSpec) -> Image16:
    """Apply one fully specified transform; deterministic given the spec."""
    p = spec.params
    if spec.kind == "crop_resize":
        scale = p["scale"]
        crop_w = max(1, _round_half_up(image.width * scale))
        crop_h = max(1, _round_half_up(image.height * scale))
        ox = _round_half_up(p["offset_x"] * (image.width - crop_w))
        oy = _round_half_up(p["offset_y"] * (image.height - crop_h))
        crop = Image16.from_array(
            image.pixels[oy : oy + crop_h, ox : ox + crop_w].copy()
        )
        return resize(crop, image.width, image.height)
    if spec.kind == "brightness":
        return _from_unit(_to_unit(image) + p["delta"])
    if spec.kind == "contrast":
        unit = _to_unit(image)
        mean = unit.mean()
        return _from_unit((unit - mean) * p["factor"] + mean)
    if spec.kind == "gamma":
        return _from_unit(_to_unit(image) ** p["exponent"])
    if spec.kind == "gaussian_blur":
        return _from_unit(_blur_unit(_to_unit(image), p["sigma"]))
    if spec.kind == "hist_eq":
        return Image16.from_array(_hist_eq(image.pixels))
    if spec.kind == "sharpen":
        unit = _to_unit(image)
        return _from_unit(unit + p["strength"] * (unit - _blur_unit(unit, DETAIL_SIGMA)))
    if spec.kind == "highpass":
        unit = _to_unit(image)
        return _from_unit(0.5 + (unit - _blur_unit(unit, DETAIL_SIGMA)))
    raise ValueError(f"unknown transform kind {spec.kind!r}")


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    return float(lo + (hi - lo) * rng.random())


def sample_spec(
    kind: str, ranges: ParamRanges, rng: np.random.Generator
) -> TransformSpec:
    """Draw concrete parameters for one transform kind."""
    if kind == "crop_resize":
        return TransformSpec(
            kind,
            {
                "scale": _uniform(rng, ranges.crop_scale),
                "offset_x": rng.random(),
                "offset_y": rng.random(),
            },
        )
    if kind == "brightness":
        return TransformSpec(kind, {"delta": _uniform(rng, ranges.brightness_delta)})
    if kind == "contrast":
        return TransformSpec(kind, {"factor": _uniform(rng, ranges.contrast_factor)})
    if kind == "gamma":
        return TransformSpec(kind, {"exponent": _uniform(rng, ranges.gamma_exponent)})
    if kind == "gaussian_blur":
        return TransformSpec(kind, {"sigma": _uniform(rng, ranges.blur_sigma)})
    if kind == "hist_eq":
        return TransformSpec(kind, {})
    if kind == "sharpen":
        return TransformSpec(kind, {"strength": _uniform(rng, ranges.sharpen_strength)})
    if kind == "highpass":
        return TransformSpec(kind, {})
    raise ValueError(f"unknown transform kind {kind!r}")


def sample_view_specs(
    pipeline: AugmentPipeline, rng: np.random.Generator
) -> list[TransformSpec]:
    """Sampled specs for one view, in pipeline order."""
    return [sample_spec(kind, pipeline.ranges, rng) for kind in pipeline.kinds]


def apply_view(image: Image16, specs: list[TransformSpec]) -> Image16:
    for spec in specs:
        image = apply_transform(image, spec)
    return image


def make_view_pair(image: Image16, pipeline: AugmentPipeline) -> tuple[Image16, Image16]:
    """Two independently parameterized passes of the same pipeline."""
    rng = np.random.default_rng(pipeline.seed)
    view_a = apply_view(image, sample_view_specs(pipeline, rng))
    view_b = apply_view(image, sample_view_specs(pipeline, rng))
    return view_a, view_b


def to_three_channel(image: Image16) -> np.ndarray:
    """(height, width, 3) uint16 raster with the patch on every channel."""
    return np.repeat(image.pixels[:, :, np.newaxis], 3, axis=2)
