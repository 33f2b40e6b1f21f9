"""Patch-embedding stems: naive linear patches, a single conv trunk, and the
multi-branch irregular embedding whose branches emit token grids with
different receptive fields (e.g. 7x7 + 4x4 + 1x1 = 66 tokens at 224 input).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .init import Init
from .tensor import Tensor


class Provenance(NamedTuple):
    branch_id: int
    row: int
    col: int


@dataclass
class TokenSet:
    """Batch of token matrices plus per-token grid provenance (shared across the batch)."""

    tokens: Tensor  # (B, N, C)
    provenance: list[Provenance]

    @property
    def count(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class BranchSpec:
    """One conv branch: stage 0 is an ordinary 3x3 stem conv, the rest are
    inverted-residual blocks. A stride-7 stage uses a 7x7 depth-wise kernel
    (pad 0); strides 1 and 2 use 3x3 (pad 1).
    """

    target_grid: tuple[int, int]
    stage_channels: tuple[int, ...]
    stage_strides: tuple[int, ...]
    expansion: int = 4
    se_reduction: int = 4
    final_pool: str = "none"  # none | global_avg

    def validate(self, input_size: int) -> None:
        if len(self.stage_channels) != len(self.stage_strides):
            raise ConfigError(
                f"branch has {len(self.stage_channels)} channels but {len(self.stage_strides)} strides")
        for s in self.stage_strides:
            if s not in (1, 2, 7):
                raise ConfigError(f"unsupported stage stride {s} (must be 1, 2 or 7)")
        if self.final_pool not in ("none", "global_avg"):
            raise ConfigError(f"unknown final_pool {self.final_pool!r}")
        prod = math.prod(self.stage_strides)
        gh, gw = self.target_grid
        if self.final_pool == "none":
            if prod * gh != input_size or prod * gw != input_size:
                raise ConfigError(
                    f"stride product {prod} x grid {gh}x{gw} does not cover input {input_size}")
        else:
            if (gh, gw) != (1, 1):
                raise ConfigError("a pooled branch must target a 1x1 grid")
            if input_size % prod or input_size // prod < 1:
                raise ConfigError(
                    f"stride product {prod} does not evenly reduce input {input_size}")

    @property
    def token_count(self) -> int:
        return self.target_grid[0] * self.target_grid[1]


def dw_kernel_for_stride(stride: int) -> tuple[int, int]:
    """(kernel, padding) of the depth-wise conv used at this stride."""
    return (7, 0) if stride == 7 else (3, 1)


class Conv:
    def __init__(self, init: Init, name: str, cin: int, cout: int, k: int,
                 stride: int = 1, padding: int = 0, groups: int = 1):
        self.w = init.kaiming_conv(f"{name}.w", (cout, cin // groups, k, k))
        self.b = init.zeros(f"{name}.b", (cout,))
        self.stride, self.padding, self.groups = stride, padding, groups

    def __call__(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.w.tensor, stride=self.stride, padding=self.padding, groups=self.groups)
        return out + T.reshape(self.b.tensor, (1, -1, 1, 1))


class SqueezeExcite:
    """Channel gate: global pool -> linear C/r -> relu -> linear C -> sigmoid -> scale."""

    def __init__(self, init: Init, name: str, channels: int, reduction: int):
        hidden = max(1, channels // reduction)
        self.fc1_w = init.trunc_normal(f"{name}.fc1.w", (hidden, channels))
        self.fc1_b = init.zeros(f"{name}.fc1.b", (hidden,))
        self.fc2_w = init.trunc_normal(f"{name}.fc2.w", (channels, hidden))
        self.fc2_b = init.zeros(f"{name}.fc2.b", (channels,))

    def __call__(self, x: Tensor) -> Tensor:
        squeezed = T.global_avg_pool(x)
        gate = T.linear(squeezed, self.fc1_w.tensor, self.fc1_b.tensor)
        gate = T.relu(gate)
        gate = T.linear(gate, self.fc2_w.tensor, self.fc2_b.tensor)
        gate = T.sigmoid(gate)
        b, c = gate.shape
        return x * T.reshape(gate, (b, c, 1, 1))


class InvertedResidual:
    """Expand 1x1 -> depth-wise kxk (stride s) -> SE -> project 1x1, with a
    skip connection when stride is 1 and channel counts match."""

    def __init__(self, init: Init, name: str, cin: int, cout: int, stride: int,
                 expansion: int, se_reduction: int):
        hidden = cin * expansion
        k, pad = dw_kernel_for_stride(stride)
        self.expand = Conv(init, f"{name}.expand", cin, hidden, 1)
        self.dw = Conv(init, f"{name}.dw", hidden, hidden, k, stride=stride, padding=pad, groups=hidden)
        self.se = SqueezeExcite(init, f"{name}.se", hidden, se_reduction) if se_reduction > 0 else None
        self.project = Conv(init, f"{name}.project", hidden, cout, 1)
        self.use_skip = stride == 1 and cin == cout

    def __call__(self, x: Tensor) -> Tensor:
        out = T.relu(self.expand(x))
        out = T.relu(self.dw(out))
        if self.se is not None:
            out = self.se(out)
        out = self.project(out)
        if self.use_skip:
            out = out + x
        return out


class BranchStem:
    """Stem conv + inverted-residual stages, ending at a token grid (or a
    pooled single token), projected to the model channel when needed."""

    def __init__(self, init: Init, name: str, spec: BranchSpec, input_size: int, channel: int):
        spec.validate(input_size)
        self.spec = spec
        self.channel = channel
        ch = spec.stage_channels
        self.stem = Conv(init, f"{name}.stem", 3, ch[0], 3, stride=spec.stage_strides[0], padding=1)
        self.blocks = []
        for i in range(1, len(ch)):
            self.blocks.append(InvertedResidual(
                init, f"{name}.ir{i}", ch[i - 1], ch[i], spec.stage_strides[i],
                spec.expansion, spec.se_reduction))
        needs_proj = ch[-1] != channel
        if spec.final_pool == "none" and needs_proj:
            raise ConfigError(
                f"unpooled branch must end at model channel {channel}, got {ch[-1]}")
        if needs_proj:
            self.proj_w = init.trunc_normal(f"{name}.proj.w", (channel, ch[-1]))
            self.proj_b = init.zeros(f"{name}.proj.b", (channel,))
        else:
            self.proj_w = self.proj_b = None

    def __call__(self, image: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, n_tokens, C), grid flattened row-major."""
        x = T.relu(self.stem(image))
        for block in self.blocks:
            x = block(x)
        if self.spec.final_pool == "global_avg":
            feat = T.global_avg_pool(x)
            if self.proj_w is not None:
                feat = T.linear(feat, self.proj_w.tensor, self.proj_b.tensor)
            return T.reshape(feat, (feat.shape[0], 1, self.channel))
        b, c, gh, gw = x.shape
        if (gh, gw) != self.spec.target_grid:
            raise ConfigError(f"branch produced grid {gh}x{gw}, expected {self.spec.target_grid}")
        return T.transpose(T.reshape(x, (b, c, gh * gw)), (0, 2, 1))


class IrregularPatchEmbed:
    """Parallel branch stems; token grids are concatenated in branch order."""

    def __init__(self, init: Init, specs: list[BranchSpec], input_size: int, channel: int):
        if not specs:
            raise ConfigError("irregular embedding needs at least one branch")
        self.stems = [BranchStem(init, f"embed.branch{k}", spec, input_size, channel)
                      for k, spec in enumerate(specs)]
        self.provenance = []
        for k, spec in enumerate(specs):
            gh, gw = spec.target_grid
            self.provenance.extend(Provenance(k, r, c) for r in range(gh) for c in range(gw))

    @property
    def token_count(self) -> int:
        return len(self.provenance)

    def __call__(self, image: Tensor) -> TokenSet:
        parts = [stem(image) for stem in self.stems]
        tokens = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        return TokenSet(tokens, self.provenance)


class ConvPatchEmbed:
    """Single-branch convolutional trunk ending at a square token grid."""

    def __init__(self, init: Init, grid: int, channels: tuple[int, ...],
                 input_size: int, channel: int, expansion: int = 4, se_reduction: int = 4):
        if input_size % grid:
            raise ConfigError(f"grid {grid} does not divide input {input_size}")
        factor = input_size // grid
        n_stages = len(channels)
        if 2 ** n_stages != factor:
            raise ConfigError(
                f"{n_stages} stride-2 stages reduce by {2 ** n_stages}, need {factor}")
        spec = BranchSpec(target_grid=(grid, grid), stage_channels=tuple(channels),
                          stage_strides=(2,) * n_stages, expansion=expansion,
                          se_reduction=se_reduction)
        self.stem = BranchStem(init, "embed.trunk", spec, input_size, channel)
        gh, gw = spec.target_grid
        self.provenance = [Provenance(0, r, c) for r in range(gh) for c in range(gw)]

    @property
    def token_count(self) -> int:
        return len(self.provenance)

    def __call__(self, image: Tensor) -> TokenSet:
        return TokenSet(self.stem(image), self.provenance)


class NaivePatchEmbed:
    """Even patch split plus a linear projection of each flattened patch."""

    def __init__(self, init: Init, patch: int, input_size: int, channel: int):
        if input_size % patch:
            raise ConfigError(f"patch {patch} does not divide input size {input_size}")
        self.patch = patch
        self.grid = input_size // patch
        self.raw_dim = 3 * patch * patch
        self.proj_w = init.trunc_normal("embed.proj.w", (channel, self.raw_dim))
        self.proj_b = init.zeros("embed.proj.b", (channel,))
        self.provenance = [Provenance(0, r, c) for r in range(self.grid) for c in range(self.grid)]

    @property
    def token_count(self) -> int:
        return self.grid * self.grid

    def raw_patches(self, image: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, N, 3*p*p) channel-major flattened patches."""
        b = image.shape[0]
        g, p = self.grid, self.patch
        x = T.reshape(image, (b, 3, g, p, g, p))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))
        return T.reshape(x, (b, g * g, self.raw_dim))

    def __call__(self, image: Tensor) -> TokenSet:
        raw = self.raw_patches(image)
        tokens = T.linear(raw, self.proj_w.tensor, self.proj_b.tensor)
        return TokenSet(tokens, self.provenance)


def patches_to_image(raw: np.ndarray, patch: int, input_size: int) -> np.ndarray:
    """Inverse of NaivePatchEmbed.raw_patches for (B, N, 3*p*p) arrays."""
    b = raw.shape[0]
    g = input_size // patch
    x = raw.reshape(b, g, g, 3, patch, patch)
    return x.transpose(0, 3, 1, 4, 2, 5).reshape(b, 3, input_size, input_size)
