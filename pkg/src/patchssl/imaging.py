"""16-bit grayscale raster I/O, resizing, and line intensity profiles.

All pixel data lives in a single internal type, :class:`Image16`: a
row-major ``uint16`` buffer. 8-bit PNG inputs are promoted to the 16-bit
range on load (x257) so downstream code never branches on bit depth.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

UINT16_MAX = 65535


class UnsupportedImageError(DataError):
    """The file decodes but is not a single-channel 8/16-bit PNG."""


class CorruptImageError(DataError):
    """The byte stream cannot be decoded as a PNG."""


@dataclass
class Image16:
    """Single-channel 16-bit image.

    ``pixels`` is a ``(height, width)`` C-ordered (row-major) uint16 array.
    """

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint16)
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.pixels.shape != (self.height, self.width):
            raise ValueError(
                f"pixel buffer shape {self.pixels.shape} does not match "
                f"(height={self.height}, width={self.width})"
            )

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "Image16":
        pixels = np.asarray(pixels)
        if pixels.ndim != 2:
            raise ValueError("expected a 2-D single-channel array")
        return cls(width=pixels.shape[1], height=pixels.shape[0], pixels=pixels)

    def copy(self) -> "Image16":
        return Image16(self.width, self.height, self.pixels.copy())


@dataclass(frozen=True)
class LineProbe:
    """Sampling segment for intensity profiles, endpoints in pixel coords."""

    start: tuple[float, float]
    end: tuple[float, float]
    samples: int

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("a probe needs at least 2 samples")


def load_png16(path: str | os.PathLike) -> Image16:
    """Load a grayscale PNG of bit depth 8 or 16 as an :class:`Image16`.

    8-bit pixels are promoted by x257 so 255 maps to 65535. Raises
    ``FileNotFoundError`` for a missing file, :class:`CorruptImageError`
    for an undecodable stream, and :class:`UnsupportedImageError` for
    multi-channel or non-PNG content.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such image file: {path}")
    try:
        with Image.open(path) as img:
            img.load()
            fmt = img.format
            mode = img.mode
            arr = np.asarray(img)
    except UnidentifiedImageError as e:
        raise CorruptImageError(f"cannot decode image stream: {path}") from e
    except OSError as e:
        raise CorruptImageError(f"truncated or corrupt image: {path}") from e

    if fmt != "PNG":
        raise UnsupportedImageError(f"{path}: expected PNG, got {fmt}")
    if mode == "L":
        pixels = arr.astype(np.uint16) * 257
    elif mode in ("I;16", "I;16B", "I;16L"):
        pixels = arr.astype(np.uint16)
    elif mode == "I":
        # some decoders widen 16-bit grayscale to 32-bit signed
        if arr.min() < 0 or arr.max() > UINT16_MAX:
            raise UnsupportedImageError(f"{path}: intensity outside 16-bit range")
        pixels = arr.astype(np.uint16)
    else:
        raise UnsupportedImageError(
            f"{path}: unsupported mode {mode!r} (single-channel 8/16-bit only)"
        )
    return Image16.from_array(pixels)


def save_png16(image: Image16, path: str | os.PathLike) -> None:
    """Write a 16-bit grayscale PNG that reloads bit-exactly."""
    out = Image.fromarray(image.pixels.astype("<u2"))
    out.save(os.fspath(path), format="PNG")


def _axis_positions(n_src: int, n_dst: int) -> np.ndarray:
    # corner-aligned sampling; a single output sample sits on the first corner
    if n_dst == 1:
        return np.zeros(1)
    return np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))


def _bilinear_gather(pixels: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``pixels`` at fractional coords, clamping neighbors at edges."""
    h, w = pixels.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.clip(x0, 0, w - 1)
    y0 = np.clip(y0, 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    p = pixels.astype(np.float64)
    top = p[y0, x0] * (1.0 - fx) + p[y0, x1] * fx
    bot = p[y1, x0] * (1.0 - fx) + p[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def resize(image: Image16, new_width: int, new_height: int) -> Image16:
    """Bilinear resize with corner-aligned sampling.

    Midpoints round half-up; output is clamped to the 16-bit range.
    Resizing to the source dimensions is the bit-exact identity.
    """
    if new_width < 1 or new_height < 1:
        raise ValueError("target dimensions must be >= 1")
    if new_width == image.width and new_height == image.height:
        return image.copy()
    xs = _axis_positions(image.width, new_width)
    ys = _axis_positions(image.height, new_height)
    gx, gy = np.meshgrid(xs, ys)
    values = _bilinear_gather(image.pixels, gx, gy)
    quantized = np.clip(np.floor(values + 0.5), 0, UINT16_MAX).astype(np.uint16)
    return Image16(new_width, new_height, quantized)


def intensity_profile(image: Image16, probe: LineProbe) -> np.ndarray:
    """Bilinear intensities at equally spaced points on the probe segment.

    Both endpoints are included; returns a float array of length
    ``probe.samples``.
    """
    for x, y in (probe.start, probe.end):
        if not (0.0 <= x <= image.width - 1 and 0.0 <= y <= image.height - 1):
            raise ValueError(f"probe endpoint ({x}, {y}) outside image bounds")
    t = np.linspace(0.0, 1.0, probe.samples)
    xs = probe.start[0] + t * (probe.end[0] - probe.start[0])
    ys = probe.start[1] + t * (probe.end[1] - probe.start[1])
    return _bilinear_gather(image.pixels, xs, ys)
