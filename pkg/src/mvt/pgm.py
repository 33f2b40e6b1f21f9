"""Minimal binary netpbm I/O: P5 (grayscale) writing/reading for weight
heatmaps and P6 (color) reading for visualization inputs. Comment lines are
tolerated when reading; maxval is fixed at 255.
"""

from __future__ import annotations

import numpy as np

from .errors import DataFormatError


def write_pgm(path: str, gray: np.ndarray) -> None:
    """Write a 2-D uint8 array as binary P5."""
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise DataFormatError(f"P5 writer needs a 2-D uint8 array, got {gray.dtype} {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def _read_tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    """First `count` whitespace tokens of a netpbm header, skipping comments."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(blob):
            raise DataFormatError("truncated netpbm header")
        ch = blob[i:i + 1]
        if ch == b"#":
            while i < len(blob) and blob[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j:j + 1].isspace():
                j += 1
            tokens.append(blob[i:j])
            i = j
    return tokens, i + 1  # single whitespace byte separates header from raster


def _read_netpbm(path: str, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, offset = _read_tokens(blob, 4)
    if tokens[0] != magic:
        raise DataFormatError(f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    need = w * h * channels
    raster = blob[offset:offset + need]
    if len(raster) != need:
        raise DataFormatError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels)


def read_pgm(path: str) -> np.ndarray:
    """Binary P5 -> (H, W) uint8."""
    return _read_netpbm(path, b"P5", 1)[:, :, 0]


def read_ppm(path: str) -> np.ndarray:
    """Binary P6 -> (3, H, W) uint8."""
    return _read_netpbm(path, b"P6", 3).transpose(2, 0, 1)


def write_ppm(path: str, rgb: np.ndarray) -> None:
    """Write a (3, H, W) uint8 array as binary P6."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3 or rgb.dtype != np.uint8:
        raise DataFormatError(f"P6 writer needs (3, H, W) uint8, got {rgb.dtype} {rgb.shape}")
    _, h, w = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.transpose(1, 2, 0).tobytes())
