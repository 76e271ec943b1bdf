"""Synthetic labeled images, a corruption bank and ordered sample streams.

Each image is a low-contrast colored clutter background with one class object
(an 8x8 windowed grating) at a random position, plus an optional uncolored
distractor grating. Class = orientation (5 values) x palette (warm / cool).

Corruptions are deterministic in ``(seed, sample_id, name)``. The random draws
do not depend on severity, so higher severities scale the same noise field.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import fft as sfft
from scipy import ndimage

OBJECT_SIZE = 8
NUM_ORIENTATIONS = 5
PALETTES = (np.array([0.95, 0.45, 0.15]), np.array([0.15, 0.45, 0.95]))


@dataclass
class LabeledSample:
    sample_id: int
    image: np.ndarray  # (C, S, S) in [0, 1]
    label: int
    corruption: str | None = None
    severity: int | None = None


# ---------------------------------------------------------------- generation

def _grating(size: int, angle: float, period: float, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = xx * np.cos(angle) + yy * np.sin(angle)
    return np.sin(2 * np.pi * u / period + phase)


def _window(size: int) -> np.ndarray:
    w = np.hanning(size + 2)[1:-1]
    return np.sqrt(np.outer(w, w))


def class_of(orientation: int, palette: int) -> int:
    return palette * NUM_ORIENTATIONS + orientation


def make_image(label: int, rng: np.random.Generator, image_size: int = 16,
               channels: int = 3) -> np.ndarray:
    s = image_size
    orient, palette = label % NUM_ORIENTATIONS, (label // NUM_ORIENTATIONS) % len(PALETTES)

    # smooth clutter background
    coarse = rng.normal(0.0, 1.0, size=(channels, 4, 4))
    bg = np.stack([ndimage.zoom(c, s / 4, order=1) for c in coarse])
    img = 0.5 + 0.06 * bg + 0.02 * rng.normal(size=(channels, s, s))

    k = min(OBJECT_SIZE, s)
    win = _window(k)
    if rng.random() < 0.5:
        a = rng.uniform(0, np.pi)
        g = 0.12 * _grating(k, a, 3.5, rng.uniform(0, 2 * np.pi)) * win
        y, x = rng.integers(0, s - k + 1, size=2)
        img[:, y:y + k, x:x + k] += g

    angle = np.pi * orient / NUM_ORIENTATIONS + rng.normal(0, 0.05)
    amp = rng.uniform(0.3, 0.45)
    g = _grating(k, angle, 4.0, rng.uniform(0, 2 * np.pi)) * win
    color = PALETTES[palette][:channels] if channels <= 3 else np.ones(channels)
    y, x = rng.integers(0, s - k + 1, size=2)
    tint = (color - 0.5)[:, None, None] * win * 0.5
    img[:, y:y + k, x:x + k] += tint + amp * g[None] * (0.5 + 0.5 * color[:, None, None])
    return np.clip(img, 0.0, 1.0)


def generate_dataset(num_classes: int = 10, samples_per_class: int = 100, image_size: int = 16,
                     seed: int = 0, channels: int = 3, id_offset: int = 0) -> list[LabeledSample]:
    """Class-balanced dataset in shuffled order; deterministic from ``seed``."""
    if num_classes < 1 or samples_per_class < 1 or image_size < 1:
        raise ValueError("num_classes, samples_per_class and image_size must be positive")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    rng.shuffle(labels)
    return [LabeledSample(id_offset + i, make_image(int(y), rng, image_size, channels), int(y))
            for i, y in enumerate(labels)]


# ---------------------------------------------------------------- corruptions
# Severity tables, index 0 = severity 1.

SEVERITY_TABLES: dict[str, tuple[float, ...]] = {
    "brightness": (0.08, 0.16, 0.24, 0.32, 0.40),         # additive offset
    "contrast": (0.85, 0.75, 0.65, 0.55, 0.40),           # contrast factor
    "defocus_blur": (0.6, 0.9, 1.2, 1.45, 1.6),            # disk radius (px)
    "gaussian_blur": (0.4, 0.55, 0.7, 0.8, 0.9),          # sigma (px)
    "gaussian_noise": (0.04, 0.08, 0.12, 0.16, 0.20),     # sigma
    "impulse_noise": (0.01, 0.02, 0.04, 0.07, 0.12),      # salt & pepper fraction
    "jpeg_compression": (0.05, 0.10, 0.15, 0.22, 0.30),   # DCT quantization step
    "motion_blur": (2, 3, 4, 5, 7),                       # kernel length (px)
    "pixelate": (14, 12, 10, 8, 7),                       # intermediate resolution
    "shot_noise": (200.0, 100.0, 50.0, 25.0, 14.0),       # photon count scale
    "speckle_noise": (0.08, 0.15, 0.22, 0.30, 0.38),      # multiplicative sigma
}


def brightness(x: np.ndarray, delta: float) -> np.ndarray:
    return x + delta


def contrast(x: np.ndarray, factor: float) -> np.ndarray:
    mean = x.mean(axis=(1, 2), keepdims=True)
    return (x - mean) * factor + mean


def _conv(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kernel = kernel / kernel.sum()
    return np.stack([ndimage.convolve(c, kernel, mode="reflect") for c in x])


def disk_kernel(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    # supersampled coverage so fractional radii give distinct kernels
    sub = np.linspace(-0.375, 0.375, 4)
    k = np.zeros(yy.shape)
    for dy in sub:
        for dx in sub:
            k += ((yy + dy) ** 2 + (xx + dx) ** 2 <= radius ** 2)
    return k


def line_kernel(length: int, angle: float) -> np.ndarray:
    r = length // 2 + 1
    k = np.zeros((2 * r + 1, 2 * r + 1))
    for t in np.linspace(-(length - 1) / 2, (length - 1) / 2, 4 * length):
        y = int(round(r + t * np.sin(angle)))
        x = int(round(r + t * np.cos(angle)))
        k[y, x] += 1.0
    return k


def _jpeg_like(x: np.ndarray, step: float, block: int = 4) -> np.ndarray:
    c, s, _ = x.shape
    out = np.empty_like(x)
    fy, fx = np.mgrid[0:block, 0:block]
    q = step * (1.0 + fy + fx)  # coarser at high frequency
    for y in range(0, s, block):
        for xo in range(0, s, block):
            tile = x[:, y:y + block, xo:xo + block]
            co = sfft.dctn(tile, axes=(1, 2), norm="ortho")
            co = np.round(co / q) * q
            out[:, y:y + block, xo:xo + block] = sfft.idctn(co, axes=(1, 2), norm="ortho")
    return out


def _pixelate(x: np.ndarray, res: int) -> np.ndarray:
    """Box-filter down to ``res`` x ``res``, nearest-neighbour back up."""
    s = x.shape[-1]
    out = np.empty_like(x)
    for i, c in enumerate(x):
        small = Image.fromarray(c.astype(np.float32), mode="F").resize((res, res), Image.BOX)
        out[i] = np.asarray(small.resize((s, s), Image.NEAREST), dtype=np.float64)
    return out


def _apply(name: str, x: np.ndarray, level, rng: np.random.Generator) -> np.ndarray:
    if name == "brightness":
        return brightness(x, level)
    if name == "contrast":
        return contrast(x, level)
    if name == "defocus_blur":
        return _conv(x, disk_kernel(level))
    if name == "gaussian_blur":
        return np.stack([ndimage.gaussian_filter(c, level, mode="reflect") for c in x])
    if name == "gaussian_noise":
        return x + level * rng.normal(size=x.shape)
    if name == "impulse_noise":
        u = rng.random(x.shape)
        salt = rng.random(x.shape) < 0.5
        out = x.copy()
        hit = u < level
        out[hit] = np.where(salt[hit], 1.0, 0.0)
        return out
    if name == "jpeg_compression":
        return _jpeg_like(x, level)
    if name == "motion_blur":
        return _conv(x, line_kernel(int(level), rng.uniform(0, np.pi)))
    if name == "pixelate":
        return _pixelate(x, int(level))
    if name == "shot_noise":
        return rng.poisson(x * level) / level
    if name == "speckle_noise":
        return x + x * level * rng.normal(size=x.shape)
    raise KeyError(name)


CORRUPTIONS: tuple[str, ...] = tuple(sorted(SEVERITY_TABLES))

# how the bank maps onto the 19 CIFAR-10-C corruption names
CIFAR_C_NAMES = {
    "brightness": "Brightness", "contrast": "Contrast", "defocus_blur": "Defocus Blur",
    "gaussian_blur": "Gaussian Blur", "gaussian_noise": "Gaussian Noise",
    "impulse_noise": "Impulse Noise", "jpeg_compression": "JPEG Compression",
    "motion_blur": "Motion Blur", "pixelate": "Pixelate", "shot_noise": "Shot Noise",
    "speckle_noise": "Speckle Noise",
}


class UnknownCorruption(KeyError):
    def __init__(self, name):
        super().__init__(f"unknown corruption {name!r}; registry: {list(CORRUPTIONS)}")


@dataclass(frozen=True)
class CorruptionSpec:
    name: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.name not in SEVERITY_TABLES:
            raise UnknownCorruption(self.name)
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")


def corruption_rng(seed: int, sample_id: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, sample_id, zlib.crc32(name.encode())])


def apply_corruption(sample: LabeledSample, spec: CorruptionSpec) -> LabeledSample:
    level = SEVERITY_TABLES[spec.name][spec.severity - 1]
    rng = corruption_rng(spec.seed, sample.sample_id, spec.name)
    out = np.clip(_apply(spec.name, sample.image, level, rng), 0.0, 1.0)
    return replace(sample, image=out, corruption=spec.name, severity=spec.severity)


# ---------------------------------------------------------------- streams

SPLITS = ("search", "eval", "all")


def split_indices(n: int, split: str) -> range:
    """First 10% of positions for search, the rest for eval."""
    n_search = n // 10
    if split == "search":
        return range(0, n_search)
    if split == "eval":
        return range(n_search, n)
    if split == "all":
        return range(n)
    raise ValueError(f"split must be one of {SPLITS}")


def make_stream(dataset: Sequence[LabeledSample],
                corruption: CorruptionSpec | Sequence[CorruptionSpec] | None = None,
                split: str = "eval", order_seed: int = 0) -> list[LabeledSample]:
    """Ordered, optionally corrupted stream over one split.

    ``corruption`` may be a list of specs (e.g. all severities of one
    corruption); sample ``i`` then gets ``specs[sample_id % len(specs)]``.
    """
    idx = np.array(split_indices(len(dataset), split))
    order = np.random.default_rng(order_seed).permutation(len(idx))
    picked = [dataset[i] for i in idx[order]]
    if corruption is None:
        return picked
    specs = [corruption] if isinstance(corruption, CorruptionSpec) else list(corruption)
    return [apply_corruption(s, specs[s.sample_id % len(specs)]) for s in picked]


def pooled_specs(name: str, severities: Sequence[int] = (1, 2, 3, 4, 5),
                 seed: int = 0) -> list[CorruptionSpec]:
    return [CorruptionSpec(name, int(s), seed) for s in severities]


# ---------------------------------------------------------------- export / import

DATASET_FORMAT = "attn-tta-dataset"


def export_dataset(dataset: Sequence[LabeledSample], directory: str | Path) -> None:
    """Write ``images.bin`` (little-endian float64, concatenated) + ``index.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    shape = list(dataset[0].image.shape) if dataset else []
    with open(d / "images.bin", "wb") as fh:
        for s in dataset:
            fh.write(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
    index = {"format": DATASET_FORMAT, "version": 1, "image_shape": shape, "dtype": "<f8",
             "file": "images.bin",
             "samples": [{"sample_id": s.sample_id, "label": s.label, "offset": i,
                          "corruption": s.corruption, "severity": s.severity}
                         for i, s in enumerate(dataset)]}
    (d / "index.json").write_text(json.dumps(index, indent=1))


def import_dataset(directory: str | Path) -> list[LabeledSample]:
    d = Path(directory)
    index = json.loads((d / "index.json").read_text())
    if index.get("format") != DATASET_FORMAT:
        raise ValueError(f"{d} is not an exported dataset")
    shape = tuple(index["image_shape"])
    flat = np.fromfile(d / index["file"], dtype=index["dtype"]).astype(np.float64)
    images = flat.reshape((-1,) + shape) if shape else flat.reshape(0)
    return [LabeledSample(e["sample_id"], images[e["offset"]].copy(), e["label"],
                          e.get("corruption"), e.get("severity"))
            for e in index["samples"]]

