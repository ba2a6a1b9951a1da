"""Synthetic needle-in-a-haystack phantoms for desk-scale experiments.

Each phantom is a textured 16-bit square; positives additionally carry
one small bright elliptical lesion (under 5% of the area). A per-image
brightness jitter much larger than the lesion's contribution to the
global mean keeps whole-image averages uninformative, so classifiers
must find the local cue.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .evaluate import ImageRecord
from .imaging import UINT16_MAX, Image16
from .tiling import RoiAnnotation


@dataclass(frozen=True)
class PhantomConfig:
    n_images: int = 500
    size: int = 64
    images_per_patient: int = 2
    positive_fraction: float = 0.5
    background_level: float = 0.35
    brightness_jitter: float = 0.12
    texture_amplitude: float = 0.04
    texture_sigma: float = 3.0
    lesion_gain: float = 0.28
    lesion_semiaxis_range: tuple[float, float] = (4.0, 8.0)

    def __post_init__(self):
        if self.n_images < 2:
            raise ConfigError("need at least two phantoms")
        if self.size < 16:
            raise ConfigError("phantom size must be >= 16")
        if self.images_per_patient < 1:
            raise ConfigError("images_per_patient must be >= 1")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ConfigError("positive_fraction must be in (0, 1)")
        lo, hi = self.lesion_semiaxis_range
        if not 1.0 <= lo <= hi:
            raise ConfigError("lesion semi-axes must be >= 1 and ordered")
        if self.size < 4 * hi:
            raise ConfigError("phantom too small for the largest lesion")
        if np.pi * hi * hi > 0.05 * self.size * self.size:
            raise ConfigError("largest lesion would exceed 5% of the area")
        if self.lesion_gain <= 0:
            raise ConfigError("lesion_gain must be positive")


@dataclass
class PhantomSample:
    image: Image16
    label: str  # "positive" or "negative"
    patient_id: str
    roi: RoiAnnotation | None


def lesion_bump(
    size: int,
    center: tuple[float, float],
    semiaxes: tuple[float, float],
    angle: float,
    gain: float,
) -> np.ndarray:
    """Additive elliptical bump, gain at the center, zero at the rim."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xs - center[0]
    dy = ys - center[1]
    major = np.cos(angle) * dx + np.sin(angle) * dy
    minor = -np.sin(angle) * dx + np.cos(angle) * dy
    rho2 = (major / semiaxes[0]) ** 2 + (minor / semiaxes[1]) ** 2
    return gain * np.clip(1.0 - rho2, 0.0, None)


def _texture(rng: np.random.Generator, cfg: PhantomConfig) -> np.ndarray:
    field = ndimage.gaussian_filter(
        rng.standard_normal((cfg.size, cfg.size)), cfg.texture_sigma, mode="reflect"
    )
    field -= field.mean()
    return field / field.std() * cfg.texture_amplitude


def generate(cfg: PhantomConfig, seed: int) -> list[PhantomSample]:
    """Deterministic phantom corpus; patients are label-pure."""
    rng = np.random.default_rng(seed)
    n_patients = -(-cfg.n_images // cfg.images_per_patient)
    n_positive_patients = int(n_patients * cfg.positive_fraction + 0.5)
    samples: list[PhantomSample] = []
    lo, hi = cfg.lesion_semiaxis_range
    for idx in range(cfg.n_images):
        patient = idx // cfg.images_per_patient
        positive = patient < n_positive_patients
        jitter = (2.0 * rng.random() - 1.0) * cfg.brightness_jitter
        unit = cfg.background_level + jitter + _texture(rng, cfg)
        roi = None
        if positive:
            a = lo + (hi - lo) * rng.random()
            b = lo + (hi - lo) * rng.random()
            angle = np.pi * rng.random()
            margin = max(a, b) + 1.0
            cx = margin + (cfg.size - 2 * margin) * rng.random()
            cy = margin + (cfg.size - 2 * margin) * rng.random()
            unit = unit + lesion_bump(cfg.size, (cx, cy), (a, b), angle, cfg.lesion_gain)
            roi = RoiAnnotation(center=(int(cx + 0.5), int(cy + 0.5)), cls="malignant_mass")
        pixels = np.floor(np.clip(unit, 0.0, 1.0) * UINT16_MAX + 0.5).astype(np.uint16)
        samples.append(
            PhantomSample(
                image=Image16.from_array(pixels),
                label="positive" if positive else "negative",
                patient_id=f"pt{patient:04d}",
                roi=roi,
            )
        )
    return samples


def records(samples: list[PhantomSample]) -> list[ImageRecord]:
    return [ImageRecord(s.image, s.label, s.patient_id) for s in samples]
