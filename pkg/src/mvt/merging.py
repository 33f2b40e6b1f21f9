"""Token readouts: class token, average pooling, and adaptive merging where a
per-token gate (shared tiny MLP) is multiplied with a learned per-position
global gate, normalized into a probability vector, and used to average tokens.

The gating MLP's final layer and the global logits start at zero, so a fresh
adaptive merge is exactly average pooling and learns to deviate from it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericsError
from .init import Init
from .pgm import write_pgm
from .stems import Provenance
from .tensor import Tensor


@dataclass
class MergeWeights:
    """Per-image record of one adaptive merge."""

    weights: np.ndarray          # (N,) nonnegative, sums to 1
    adaptive_logits: np.ndarray  # (N,) pre-sigmoid per-token MLP outputs
    global_logits: np.ndarray    # (N,) shared parameter snapshot


def normalize_raw(raw: Tensor, axis: int = 1) -> Tensor:
    """raw -> raw / sum(raw): scale-invariant in any positive common factor."""
    sums = T.tsum(raw, axis=axis, keepdims=True)
    if np.any(sums.data < 1e-12):
        raise NumericsError(
            f"merge weights sum to {float(sums.data.min()):.3e} (< 1e-12); cannot normalize")
    return raw / sums


def avg_pool_merge(tokens: Tensor) -> Tensor:
    """(B, N, C) -> (B, C) unweighted token mean."""
    return T.tmean(tokens, axis=1)


def class_token_readout(tokens: Tensor) -> Tensor:
    """(B, N, C) -> (B, C): the token at index 0."""
    b, _, c = tokens.shape
    return T.reshape(T.slice_axis(tokens, 1, 0, 1), (b, c))


class AdaptiveMerge:
    """Gated weighted average over a fixed-length token sequence."""

    def __init__(self, init: Init, name: str, channel: int, count: int):
        if count < 1:
            raise ConfigError(f"adaptive merge needs at least one token, got {count}")
        hidden = max(1, channel // 4)
        self.count = count
        self.fc1_w = init.trunc_normal(f"{name}.fc1.w", (hidden, channel))
        self.fc1_b = init.zeros(f"{name}.fc1.b", (hidden,))
        self.fc2_w = init.zeros(f"{name}.fc2.w", (1, hidden))
        self.fc2_b = init.zeros(f"{name}.fc2.b", (1,))
        self.global_logits = init.zeros(f"{name}.global_logits", (count,))

    def __call__(self, tokens: Tensor) -> tuple[Tensor, list[MergeWeights]]:
        b, n, _ = tokens.shape
        if n != self.count:
            raise ConfigError(f"merge built for {self.count} tokens, got {n}")
        h = T.relu(T.linear(tokens, self.fc1_w.tensor, self.fc1_b.tensor))
        logits = T.linear(h, self.fc2_w.tensor, self.fc2_b.tensor)  # (B, N, 1)
        adaptive = T.sigmoid(logits)
        glob = T.sigmoid(T.reshape(self.global_logits.tensor, (1, n, 1)))
        weights = normalize_raw(adaptive * glob, axis=1)
        feature = T.tsum(weights * tokens, axis=1)
        records = [MergeWeights(weights=weights.data[i, :, 0].copy(),
                                adaptive_logits=logits.data[i, :, 0].copy(),
                                global_logits=self.global_logits.data.copy())
                   for i in range(b)]
        return feature, records


# --------------------------------------------------------------------------
# Weight-grid export
# --------------------------------------------------------------------------

def weights_to_gray(grid: np.ndarray) -> np.ndarray:
    """Min-max normalize to uint8; an all-equal grid maps to mid-gray 128."""
    lo, hi = float(grid.min()), float(grid.max())
    if hi - lo < 1e-12:
        return np.full(grid.shape, 128, dtype=np.uint8)
    return np.round(255.0 * (grid - lo) / (hi - lo)).astype(np.uint8)


def export_weight_grids(weights: np.ndarray, provenance: list[Provenance],
                        out_dir: str, image_id: str, scale: int = 1) -> list[str]:
    """One P5 file per branch, named `<image_id>.branch<k>.pgm`.

    Token weights are placed on each branch's (row, col) grid, min-max
    normalized per image, and optionally nearest-upsampled by `scale`.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if len(provenance) != weights.shape[0]:
        raise ConfigError(
            f"provenance covers {len(provenance)} tokens, weights have {weights.shape[0]}")
    if scale < 1:
        raise ConfigError(f"scale {scale} must be >= 1")
    branches = sorted({p.branch_id for p in provenance})
    paths = []
    for k in branches:
        cells = [(p.row, p.col, w) for p, w in zip(provenance, weights) if p.branch_id == k]
        gh = max(r for r, _, _ in cells) + 1
        gw = max(c for _, c, _ in cells) + 1
        grid = np.zeros((gh, gw))
        for r, c, w in cells:
            grid[r, c] = w
        gray = weights_to_gray(grid)
        if scale > 1:
            gray = np.kron(gray, np.ones((scale, scale), dtype=np.uint8))
        path = os.path.join(out_dir, f"{image_id}.branch{k}.pgm")
        write_pgm(path, gray)
        paths.append(path)
    return paths
