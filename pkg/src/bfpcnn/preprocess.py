"""Four-stage image preprocessing: histogram equalization, median filtering,
nearest-neighbor resizing and pixel normalization, plus binary PGM I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import EvenWindow, UnreadableImage

INTENSITY_LEVELS = 256
DEFAULT_WINDOW = 3
DEFAULT_TARGET = 224


@dataclass
class GrayImage:
    """2-D grid of 8-bit intensities, stored row-major."""

    height: int
    width: int
    pixels: np.ndarray  # uint8, shape (height, width)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8).reshape(self.height, self.width)
        if self.height < 1 or self.width < 1:
            raise ValueError("image dimensions must be positive")

    @classmethod
    def from_array(cls, array) -> "GrayImage":
        arr = np.asarray(array, dtype=np.uint8)
        return cls(arr.shape[0], arr.shape[1], arr)


@dataclass
class NormalizedImage:
    """2-D grid of floats in [0, 1]."""

    height: int
    width: int
    values: np.ndarray  # float32, shape (height, width)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).reshape(self.height, self.width)


def histogram_equalize(img: GrayImage) -> GrayImage:
    """Remap intensities through the cumulative histogram to flatten contrast.

    Each pixel p maps to round((CDF(p) - CDF_min) / (CDF_max - CDF_min) * 255)
    where CDF_min is the CDF at the darkest intensity present. A constant
    image (CDF_max == CDF_min) is returned unchanged.
    """
    hist = np.bincount(img.pixels.reshape(-1), minlength=INTENSITY_LEVELS)
    cdf = np.cumsum(hist) / img.pixels.size
    present = np.nonzero(hist)[0]
    cdf_min = cdf[present[0]]
    cdf_max = cdf[present[-1]]
    if cdf_max == cdf_min:
        return GrayImage(img.height, img.width, img.pixels.copy())
    scaled = (cdf - cdf_min) / (cdf_max - cdf_min) * (INTENSITY_LEVELS - 1)
    lut = np.floor(scaled + 0.5).clip(0, 255).astype(np.uint8)  # round half up
    return GrayImage(img.height, img.width, lut[img.pixels])


def median_filter(img: GrayImage, window: int = DEFAULT_WINDOW) -> GrayImage:
    """Replace each pixel by the exact median of its window x window
    neighborhood; borders are padded by edge replication."""
    if window < 1 or window % 2 == 0:
        raise EvenWindow(f"window must be odd and positive, got {window}")
    if window == 1:
        return GrayImage(img.height, img.width, img.pixels.copy())
    r = window // 2
    padded = np.pad(img.pixels, r, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (window, window))
    # odd count of values: the median is an element of the neighborhood
    med = np.median(windows.reshape(img.height, img.width, -1), axis=-1)
    return GrayImage(img.height, img.width, med.astype(np.uint8))


def resize(img: GrayImage, target: int) -> GrayImage:
    """Nearest-neighbor resize to target x target.

    Output pixel (i, j) reads source (floor(i*h/t), floor(j*w/t)); integer
    arithmetic keeps the floor exact for every index.
    """
    if target < 1:
        raise ValueError("target must be positive")
    rows = (np.arange(target) * img.height) // target
    cols = (np.arange(target) * img.width) // target
    return GrayImage(target, target, img.pixels[np.ix_(rows, cols)])


def normalize(img: GrayImage) -> NormalizedImage:
    """Scale intensities to [0, 1] by dividing by 255."""
    return NormalizedImage(img.height, img.width,
                           img.pixels.astype(np.float32) / np.float32(255.0))


def preprocess_pipeline(img: GrayImage, target: int = DEFAULT_TARGET,
                        window: int = DEFAULT_WINDOW) -> NormalizedImage:
    """equalize -> median filter -> resize -> normalize, in that order."""
    return normalize(resize(median_filter(histogram_equalize(img), window), target))


# -- binary PGM (P5) ---------------------------------------------------------

def read_pgm(path) -> GrayImage:
    """Read an 8-bit binary PGM file."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc
    try:
        magic, rest = _next_token(raw, 0)
        if magic != b"P5":
            raise ValueError("bad magic")
        width_tok, rest = _next_token(raw, rest)
        height_tok, rest = _next_token(raw, rest)
        maxval_tok, rest = _next_token(raw, rest)
        width, height, maxval = int(width_tok), int(height_tok), int(maxval_tok)
        if width < 1 or height < 1 or maxval != 255:
            raise ValueError("unsupported header")
        data = raw[rest + 1: rest + 1 + width * height]  # single byte after maxval
        if len(data) != width * height:
            raise ValueError("truncated pixel data")
    except (ValueError, IndexError) as exc:
        raise UnreadableImage(f"{path}: not a valid 8-bit binary PGM ({exc})") from exc
    pixels = np.frombuffer(data, dtype=np.uint8).reshape(height, width)
    return GrayImage(height, width, pixels.copy())


def write_pgm(img: GrayImage, path) -> None:
    """Write an 8-bit binary PGM file: P5 header, maxval 255, raw bytes."""
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(img.pixels.tobytes())
    os.replace(tmp, path)


def _next_token(raw: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comment lines between header fields
    while True:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        break
    start = pos
    while pos < len(raw) and not raw[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError("missing header token")
    return raw[start:pos], pos
