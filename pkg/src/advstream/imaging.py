"""Raster images and the pixel-level transforms the detectors build on.

Images are 8-bit, row-major, 1 or 3 channels. All operations here are pure:
they return new Image values and never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ImageError(ValueError):
    """Base class for raster I/O and transform errors."""


class MalformedHeaderError(ImageError):
    pass


class UnsupportedMaxvalError(ImageError):
    pass


class TruncatedPayloadError(ImageError):
    pass


@dataclass(frozen=True)
class Image:
    """H x W x C raster of 8-bit pixel levels."""

    height: int
    width: int
    channels: int
    pixels: np.ndarray  # uint8, shape (height, width, channels)

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ImageError("image dimensions must be positive")
        if self.channels not in (1, 3):
            raise ImageError("channels must be 1 or 3")
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.shape != (self.height, self.width, self.channels):
            raise ImageError(
                f"pixel buffer shape {px.shape} does not match "
                f"({self.height}, {self.width}, {self.channels})"
            )
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_flat(cls, height, width, channels, data) -> "Image":
        data = np.asarray(data, dtype=np.int64)
        if data.size != height * width * channels:
            raise ImageError("flat data length does not match dimensions")
        if data.min(initial=0) < 0 or data.max(initial=0) > 255:
            raise ImageError("pixel levels must lie in [0, 255]")
        return cls(height, width, channels,
                   data.reshape(height, width, channels).astype(np.uint8))

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view of the pixel levels."""
        return self.pixels.reshape(-1)

    @property
    def size(self) -> int:
        return self.height * self.width * self.channels


@dataclass(frozen=True)
class FilterSpec:
    """Smoothing mask: box, cross (plus sign) or diamond, odd size >= 3."""

    shape: str = "box"
    size: int = 3

    def __post_init__(self):
        if self.shape not in ("box", "cross", "diamond"):
            raise ImageError(f"unknown filter shape {self.shape!r}")
        if self.size < 3 or self.size % 2 == 0:
            raise ImageError("filter size must be an odd integer >= 3")

    def mask(self) -> np.ndarray:
        n, c = self.size, self.size // 2
        if self.shape == "box":
            return np.ones((n, n), dtype=bool)
        ii, jj = np.mgrid[0:n, 0:n]
        if self.shape == "cross":
            return (ii == c) | (jj == c)
        return np.abs(ii - c) + np.abs(jj - c) <= c


@dataclass(frozen=True)
class BrightnessSpec:
    """Brightness (V channel) transform: set V to a value, or add to it."""

    mode: str = "set"
    value: int = 200

    def __post_init__(self):
        if self.mode not in ("set", "add"):
            raise ImageError(f"unknown brightness mode {self.mode!r}")
        if not 0 <= self.value <= 255:
            raise ImageError("brightness value must lie in [0, 255]")


# ---------------------------------------------------------------------------
# PPM / PGM I/O


def _read_header_tokens(blob: bytes, count: int):
    """Read `count` whitespace-separated tokens, honoring '#' comments.

    Returns (tokens, offset of the byte after the single whitespace that
    terminates the last token).
    """
    tokens = []
    i = 0
    n = len(blob)
    while len(tokens) < count:
        while i < n and blob[i : i + 1].isspace():
            i += 1
        if i < n and blob[i] == ord("#"):
            while i < n and blob[i] != ord("\n"):
                i += 1
            continue
        start = i
        while i < n and not blob[i : i + 1].isspace() and blob[i] != ord("#"):
            i += 1
        if i == start:
            raise MalformedHeaderError("unexpected end of header")
        tokens.append(blob[start:i])
        if len(tokens) == count:
            # exactly one whitespace byte separates header from payload
            if i >= n or not blob[i : i + 1].isspace():
                raise MalformedHeaderError("missing separator after maxval")
            i += 1
    return tokens, i


def load_ppm(path) -> Image:
    """Load a binary PPM (P6) or PGM (P5) file with maxval 255."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 2:
        raise MalformedHeaderError("file too short for a PNM header")
    magic = blob[:2]
    if magic == b"P6":
        channels = 3
    elif magic == b"P5":
        channels = 1
    else:
        raise MalformedHeaderError(f"unsupported magic {magic!r}")
    tokens, offset = _read_header_tokens(blob[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise MalformedHeaderError(f"non-numeric header token: {exc}") from exc
    if width < 1 or height < 1:
        raise MalformedHeaderError("non-positive image dimensions")
    if maxval != 255:
        raise UnsupportedMaxvalError(f"maxval {maxval} unsupported (need 255)")
    payload = blob[2 + offset :]
    need = width * height * channels
    if len(payload) < need:
        raise TruncatedPayloadError(
            f"payload holds {len(payload)} bytes, header promises {need}"
        )
    data = np.frombuffer(payload[:need], dtype=np.uint8)
    return Image(height, width, channels, data.reshape(height, width, channels))


def save_ppm(img: Image, path) -> None:
    """Write a binary P6 (3-channel) or P5 (1-channel) file, maxval 255."""
    magic = b"P6" if img.channels == 3 else b"P5"
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(img.pixels.tobytes())


# ---------------------------------------------------------------------------
# HSV conversion and the brightness transform


def rgb_to_hsv(img: Image):
    """Hexcone HSV: H in [0,360) degrees, S in [0,1], V in [0,255]."""
    if img.channels != 3:
        raise ImageError("rgb_to_hsv needs a 3-channel image")
    rgb = img.pixels.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(v > 0, c / v, 0.0)
        hr = np.where(c > 0, ((g - b) / c) % 6.0, 0.0)
        hg = np.where(c > 0, (b - r) / c + 2.0, 0.0)
        hb = np.where(c > 0, (r - g) / c + 4.0, 0.0)
    h = 60.0 * np.select([v == r, v == g], [hr, hg], default=hb)
    h = np.where(c > 0, h % 360.0, 0.0)
    return h, s, v


def hsv_to_rgb(h, s, v) -> np.ndarray:
    """Inverse hexcone transform; returns uint8 array of shape h.shape + (3,)."""
    h = np.asarray(h, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    c = v * s
    hp = (h % 360.0) / 60.0
    x = c * (1.0 - np.abs(hp % 2.0 - 1.0))
    z = np.zeros_like(c)
    sextant = np.floor(hp).astype(int) % 6
    r1 = np.choose(sextant, [c, x, z, z, x, c])
    g1 = np.choose(sextant, [x, c, c, x, z, z])
    b1 = np.choose(sextant, [z, z, x, c, c, x])
    m = v - c
    rgb = np.stack([r1 + m, g1 + m, b1 + m], axis=-1)
    return np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)


def brightness_transform(img: Image, spec: BrightnessSpec) -> Image:
    """Flatten or shift the V channel in HSV space, preserving H and S."""
    h, s, v = rgb_to_hsv(img)
    if spec.mode == "set":
        v = np.full_like(v, float(spec.value))
    else:
        v = np.clip(v + spec.value, 0.0, 255.0)
    return Image(img.height, img.width, 3, hsv_to_rgb(h, s, v))


# ---------------------------------------------------------------------------
# Entropy, quantization, smoothing


def pixel_entropy(img: Image) -> float:
    """Shannon entropy of the pixel-level histogram, in bits.

    For 3-channel images the result is the mean of the per-channel entropies.
    """
    total = img.height * img.width
    ent = 0.0
    for ch in range(img.channels):
        freq = np.bincount(img.pixels[..., ch].reshape(-1), minlength=256)
        p = freq[freq > 0] / total
        ent += float(-(p * np.log2(p)).sum())
    return ent / img.channels


def quantize(img: Image, intervals: int) -> Image:
    """Uniform scalar quantization to `intervals` codewords per channel.

    Codewords sit at interval midpoints, floored to integer levels, so the
    map is idempotent and intervals=256 is the identity.
    """
    if not 2 <= intervals <= 256:
        raise ImageError("intervals must lie in [2, 256]")
    w = 256.0 / intervals
    k = np.minimum(np.floor(img.pixels / w), intervals - 1)
    code = np.floor((k + 0.5) * w).astype(np.uint8)
    return Image(img.height, img.width, img.channels, code)


def spatial_smooth(img: Image, spec: FilterSpec) -> Image:
    """Mean filter over the mask footprint, edge-replicated borders."""
    mask = spec.mask()
    c = spec.size // 2
    padded = np.pad(img.pixels.astype(np.float64),
                    ((c, c), (c, c), (0, 0)), mode="edge")
    acc = np.zeros_like(img.pixels, dtype=np.float64)
    taps = 0
    for di in range(spec.size):
        for dj in range(spec.size):
            if not mask[di, dj]:
                continue
            acc += padded[di : di + img.height, dj : dj + img.width, :]
            taps += 1
    out = np.floor(acc / taps + 0.5).astype(np.uint8)
    return Image(img.height, img.width, img.channels, out)
