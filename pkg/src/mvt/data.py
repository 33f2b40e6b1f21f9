"""Dataset plumbing: the CIFAR-10 binary batch format, deterministic synthetic
sets for desk-scale checks, and preprocessing (nearest-neighbor resize,
pad-and-crop / flip augmentation, channel normalization).

Loaders materialize one split at a time and are read-only after construction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError
from .seeding import substream

RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 channel-planar pixels
CIFAR_SIDE = 32
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (3, S, S) float64 in [0, 1]
    label: int


# --------------------------------------------------------------------------
# CIFAR-10 binary batches
# --------------------------------------------------------------------------

def read_batch_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch into uint8 images (n, 3, 32, 32) and labels (n,)."""
    if not os.path.isfile(path):
        raise DataFormatError(f"batch file not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) == 0 or len(blob) % RECORD_BYTES:
        offset = len(blob) - (len(blob) % RECORD_BYTES)
        raise DataFormatError(
            f"{path}: size {len(blob)} is not a whole number of {RECORD_BYTES}-byte "
            f"records (truncated record starts at byte offset {offset})")
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(
            f"{path}: label byte {labels[i]} > 9 at byte offset {i * RECORD_BYTES}")
    images = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).copy()
    return images, labels


def write_batch_file(path: str, images: np.ndarray, labels: np.ndarray) -> None:
    """Serialize uint8 images (n, 3, 32, 32) + labels back into the batch format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels)
    if images.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE) or labels.shape != (images.shape[0],):
        raise DataFormatError(
            f"cannot serialize images {images.shape} with labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 9:
        raise DataFormatError("labels must lie in [0, 9]")
    records = np.empty((images.shape[0], RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = images.reshape(images.shape[0], -1)
    with open(path, "wb") as fh:
        fh.write(records.tobytes())


def load_cifar10(root: str, split: str) -> list[LabeledImage]:
    """Load the train (50k) or test (10k) split from binary batches under root."""
    if split not in ("train", "test"):
        raise ConfigError(f"unknown split {split!r} (expected 'train' or 'test')")
    names = TRAIN_FILES if split == "train" else TEST_FILES
    out: list[LabeledImage] = []
    for name in names:
        images, labels = read_batch_file(os.path.join(root, name))
        scaled = images.astype(np.float64) / 255.0
        out.extend(LabeledImage(scaled[i], int(labels[i])) for i in range(len(labels)))
    return out


# --------------------------------------------------------------------------
# Synthetic, provably separable sets
# --------------------------------------------------------------------------

def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % k
    return labels[rng.permutation(n)]


def quadrant_means(pixels: np.ndarray) -> np.ndarray:
    """Mean brightness of the four image quadrants, row-major (TL, TR, BL, BR)."""
    s = pixels.shape[-1]
    h = s // 2
    return np.array([
        pixels[..., :h, :h].mean(), pixels[..., :h, h:].mean(),
        pixels[..., h:, :h].mean(), pixels[..., h:, h:].mean(),
    ])


def brightest_quadrant(pixels: np.ndarray) -> int:
    return int(np.argmax(quadrant_means(pixels)))


def synthetic_set(kind: str, n: int, size: int, num_classes: int, seed: int,
                  noise_std: float | None = None) -> list[LabeledImage]:
    """Deterministic labeled images.

    two_gaussians: per-class constant mean images at 0.5 -+ 0.15 plus iid noise,
    class means at least six noise sigmas apart (linearly separable).
    grid_patterns: a bright blob centered in quadrant `label`; the label always
    equals the index of the brightest quadrant.
    """
    if n < num_classes:
        raise ConfigError(f"need n >= num_classes, got n={n} < {num_classes}")
    rng = substream(seed, "synthetic", kind, n, size, num_classes)
    if kind == "two_gaussians":
        if num_classes != 2:
            raise ConfigError("two_gaussians is a binary set; num_classes must be 2")
        sigma = 0.04 if noise_std is None else float(noise_std)
        if sigma < 0 or 6.0 * sigma > 0.3:
            raise ConfigError(
                f"noise_std {sigma} breaks the 6-sigma class separation contract")
        labels = _balanced_labels(n, 2, rng)
        means = np.array([0.35, 0.65])
        out = []
        for lab in labels:
            pix = np.full((3, size, size), means[lab])
            if sigma > 0:
                pix = pix + rng.normal(0.0, sigma, size=pix.shape)
            out.append(LabeledImage(np.clip(pix, 0.0, 1.0), int(lab)))
        return out
    if kind == "grid_patterns":
        if not 2 <= num_classes <= 4:
            raise ConfigError("grid_patterns supports 2 to 4 quadrant classes")
        if size < 8:
            raise ConfigError(f"grid_patterns needs size >= 8, got {size}")
        labels = _balanced_labels(n, num_classes, rng)
        rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        tau = size / 8.0
        out = []
        for lab in labels:
            qr, qc = divmod(int(lab), 2)
            cy = (2 * qr + 1) * size / 4.0 - 0.5
            cx = (2 * qc + 1) * size / 4.0 - 0.5
            blob = 0.6 * np.exp(-((rr - cy) ** 2 + (cc - cx) ** 2) / (2.0 * tau * tau))
            pix = rng.uniform(0.0, 0.3, size=(3, size, size)) + blob
            out.append(LabeledImage(np.clip(pix, 0.0, 1.0), int(lab)))
        return out
    raise ConfigError(f"unknown synthetic kind {kind!r}")


# --------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------

def resize_nearest(pixels: np.ndarray, target: int) -> np.ndarray:
    """Nearest-neighbor resize of (..., H, W) to (..., target, target)."""
    h, w = pixels.shape[-2:]
    if (h, w) == (target, target):
        return pixels.copy()
    rows = (np.arange(target) * h) // target
    cols = (np.arange(target) * w) // target
    return pixels[..., rows[:, None], cols[None, :]]


def hflip(pixels: np.ndarray) -> np.ndarray:
    return pixels[..., ::-1].copy()


def pad_crop(pixels: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad by `pad` on each side, then crop back to the original size."""
    c, h, w = pixels.shape
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad))
    padded[:, pad:pad + h, pad:pad + w] = pixels
    top = int(rng.integers(0, 2 * pad + 1))
    left = int(rng.integers(0, 2 * pad + 1))
    return padded[:, top:top + h, left:left + w].copy()


def _channel_stats(value, channels: int) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    if arr.size == 1:
        arr = np.repeat(arr, channels)
    if arr.size != channels:
        raise ConfigError(f"normalization constants need 1 or {channels} entries")
    return arr.reshape(channels, 1, 1)


def normalize(pixels: np.ndarray, mean=0.5, std=0.5) -> np.ndarray:
    c = pixels.shape[0]
    return (pixels - _channel_stats(mean, c)) / _channel_stats(std, c)


def denormalize(pixels: np.ndarray, mean=0.5, std=0.5) -> np.ndarray:
    c = pixels.shape[0]
    return pixels * _channel_stats(std, c) + _channel_stats(mean, c)


def preprocess(pixels: np.ndarray, target: int, train: bool,
               rng: np.random.Generator | None = None,
               mean=0.5, std=0.5, pad: int = 4, crop: bool = True,
               flip: bool = True) -> np.ndarray:
    """Resize -> (train-only pad/crop + random flip) -> normalize.

    Eval mode never touches rng, so evaluation is deterministic by construction.
    Flips swap left/right image halves, so they must be disabled for any task
    whose label depends on horizontal position (e.g. quadrant classification).
    """
    if target < 8:
        raise ConfigError(f"target size {target} < 8")
    x = resize_nearest(np.asarray(pixels, dtype=np.float64), target)
    if train:
        if rng is None:
            raise ConfigError("train-mode preprocessing needs an rng")
        if crop:
            x = pad_crop(x, pad, rng)
        if flip and rng.random() < 0.5:
            x = hflip(x)
    return normalize(x, mean, std)


def batch_arrays(images: list[LabeledImage], target: int, train: bool,
                 rng: np.random.Generator | None = None,
                 mean=0.5, std=0.5, crop: bool = True,
                 flip: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Stack preprocessed images into (B, 3, T, T) plus an int label vector."""
    xs = np.stack([preprocess(im.pixels, target, train, rng, mean, std,
                              crop=crop, flip=flip) for im in images])
    ys = np.array([im.label for im in images], dtype=np.int64)
    return xs, ys


def cifar10_root() -> str | None:
    """Directory holding the binary batches, if one is present."""
    for cand in (os.environ.get("MVT_CIFAR10_DIR"), os.path.join("data", "cifar-10-batches-bin")):
        if cand and os.path.isfile(os.path.join(cand, TEST_FILES[0])):
            return cand
    return None
